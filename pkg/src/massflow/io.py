"""Configuration files, summary tables, trajectory dumps and run manifests.

Every file written here is a deterministic function of the configuration
and seed: floats are printed with 17 significant digits, rows follow
replica and grid order, and JSON keys keep a fixed order. The manifest is
the one exception, since it records wall-clock time.
"""

from __future__ import annotations

import csv
import hashlib
import io as _io
import json
import os
import struct
import time
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .state import SimConfig, TrajectoryRecord

__all__ = [
    "ConfigError",
    "CONFIG_ALIASES",
    "SEED_ENV",
    "parse_config",
    "load_config",
    "config_to_json",
    "format_float",
    "write_csv",
    "DUMP_MAGIC",
    "write_dump",
    "read_dump",
    "SummaryAccumulator",
    "RunManifest",
    "sha256_file",
]

SEED_ENV = "MASSFLOW_SEED"
# short spellings accepted in config files
CONFIG_ALIASES = {"T": "horizon", "seed": "master_seed"}
DUMP_MAGIC = b"MFS1"

_FIELDS = ("n", "horizon", "dt", "scheme", "master_seed", "replicas", "record_stride", "u_probes")


class ConfigError(ValueError):
    """Invalid configuration; the message starts with the offending field."""


def parse_config(doc: dict, seed_override: str | None = None) -> SimConfig:
    """Validate a decoded JSON document into a :class:`SimConfig`.

    Unknown keys are errors. ``seed_override`` (the value of
    ``MASSFLOW_SEED``) replaces ``master_seed`` when given.
    """
    if not isinstance(doc, dict):
        raise ConfigError("config: top level must be a JSON object")
    fields: dict = {}
    for key, value in doc.items():
        name = CONFIG_ALIASES.get(key, key)
        if name not in _FIELDS:
            raise ConfigError(f"{key}: unknown config key (valid: {', '.join(_FIELDS)})")
        if name in fields:
            raise ConfigError(f"{key}: given twice (as {name!r} and an alias)")
        fields[name] = value
    for required in ("n", "horizon", "dt"):
        if required not in fields:
            raise ConfigError(f"{required}: missing")
    if seed_override is not None:
        try:
            fields["master_seed"] = int(seed_override, 0)
        except ValueError:
            raise ConfigError(f"master_seed: {SEED_ENV}={seed_override!r} is not an integer") from None
    if "u_probes" in fields:
        if not isinstance(fields["u_probes"], list):
            raise ConfigError("u_probes: must be a list of numbers")
        fields["u_probes"] = tuple(fields["u_probes"])
    for name in ("horizon", "dt"):
        v = fields.get(name)
        if isinstance(v, int) and not isinstance(v, bool):
            fields[name] = float(v)
    try:
        return SimConfig(**fields)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def load_config(path: str | os.PathLike, env: dict | None = None) -> SimConfig:
    """Read a JSON config file. ``OSError`` propagates; bad content raises :class:`ConfigError`."""
    env = os.environ if env is None else env
    text = Path(path).read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config: invalid JSON ({exc})") from None
    return parse_config(doc, env.get(SEED_ENV))


def config_to_json(config: SimConfig) -> str:
    """Canonical JSON form; ``parse_config(json.loads(...))`` gives ``config`` back."""
    return json.dumps(config.to_dict(), indent=2) + "\n"


def format_float(x: float) -> str:
    """Shortest round-trip representation, ``nan`` for missing values."""
    x = float(x)
    if np.isnan(x):
        return "nan"
    return repr(x)


def write_csv(path: str | os.PathLike, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([format_float(v) if isinstance(v, (float, np.floating)) else v for v in row])
    Path(path).write_text(buf.getvalue())


def write_dump(path: str | os.PathLike, record: TrajectoryRecord) -> None:
    """Binary little-endian trajectory.

    Layout: ``b"MFS1"``, then ``n``, the simulation step count and the
    record stride as ``u64``; then for every recorded instant (the initial
    one included) the cluster count as ``u64`` followed by the positions
    and the masses as ``f64`` arrays.
    """
    cfg = record.config
    with open(path, "wb") as fh:
        fh.write(DUMP_MAGIC)
        fh.write(struct.pack("<QQQ", cfg.n, cfg.n_steps, cfg.record_stride))
        masses = record.masses
        for i in range(len(record.times)):
            a, b = record.offsets[i], record.offsets[i + 1]
            fh.write(struct.pack("<Q", b - a))
            fh.write(record.positions[a:b].astype("<f8").tobytes())
            fh.write(masses[a:b].astype("<f8").tobytes())


def read_dump(path: str | os.PathLike) -> dict:
    """Inverse of :func:`write_dump`: header fields and per-instant arrays."""
    data = Path(path).read_bytes()
    if data[:4] != DUMP_MAGIC:
        raise ValueError(f"{path}: not a trajectory dump (magic {data[:4]!r})")
    n, nsteps, stride = struct.unpack_from("<QQQ", data, 4)
    pos = 28
    positions, masses = [], []
    while pos < len(data):
        (k,) = struct.unpack_from("<Q", data, pos)
        pos += 8
        positions.append(np.frombuffer(data, "<f8", k, pos))
        pos += 8 * k
        masses.append(np.frombuffer(data, "<f8", k, pos))
        pos += 8 * k
    expected = 1 + -(-nsteps // stride)
    if len(positions) != expected:
        raise ValueError(f"{path}: {len(positions)} recorded instants, header implies {expected}")
    return {"n": n, "n_steps": nsteps, "record_stride": stride, "positions": positions, "masses": masses}


class SummaryAccumulator:
    """Per-time ensemble sums for ``clusters.csv`` and ``probes.csv``.

    Replicas must be added in replica order; the float sums are then
    reproducible bit for bit.
    """

    def __init__(self, config: SimConfig):
        self.config = config
        self.count = 0
        self.times: np.ndarray | None = None
        self._n = None
        self._y = None
        self._m = None

    def add(self, record: TrajectoryRecord) -> None:
        counts = record.counts.astype(float)
        y = np.array([record.probe_path(u)[0] for u in self.config.u_probes]).reshape(-1, len(record.times))
        m = np.array([record.probe_path(u)[1] for u in self.config.u_probes]).reshape(-1, len(record.times))
        if self._n is None:
            self.times = record.times.copy()
            self._n = np.zeros((2, len(counts)))
            self._y = np.zeros((2,) + y.shape)
            self._m = np.zeros(m.shape)
        self.count += 1
        self._n[0] += counts
        self._n[1] += counts * counts
        self._y[0] += y
        self._y[1] += y * y
        self._m += m

    @staticmethod
    def _moments(s1, s2, c):
        mean = s1 / c
        if c < 2:
            nan = np.full_like(mean, np.nan)
            return mean, nan, nan
        var = np.maximum(s2 - s1 * s1 / c, 0.0) / (c - 1)
        return mean, np.sqrt(var / c), var

    def cluster_rows(self):
        mean, se, _ = self._moments(self._n[0], self._n[1], self.count)
        return zip(self.times.tolist(), mean.tolist(), se.tolist())

    def probe_rows(self):
        mean, se, var = self._moments(self._y[0], self._y[1], self.count)
        mm = self._m / self.count
        for a, u in enumerate(self.config.u_probes):
            for i, t in enumerate(self.times.tolist()):
                yield (float(u), t, float(mean[a, i]), float(se[a, i]), float(var[a, i]), float(mm[a, i]))


def sha256_file(path: str | os.PathLike) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class RunManifest:
    """Everything needed to reproduce and audit a run."""

    command: str
    config: SimConfig
    version: str
    convention: str
    options: dict = field(default_factory=dict)
    started: str = field(default_factory=lambda: datetime.now(timezone.utc).isoformat(timespec="seconds"))
    elapsed: float = 0.0
    files: dict = field(default_factory=dict)
    _t0: float = field(default_factory=time.perf_counter, repr=False)

    def seeds(self) -> list[dict]:
        return [
            {"replica": i, "entropy": int(self.config.master_seed), "spawn_key": [i]}
            for i in range(self.config.replicas)
        ]

    def register(self, path: Path, root: Path) -> None:
        self.files[str(path.relative_to(root))] = {"sha256": sha256_file(path), "bytes": path.stat().st_size}

    def to_dict(self) -> dict:
        return {
            "command": self.command,
            "version": self.version,
            "convention": self.convention,
            "config": self.config.to_dict(),
            "options": self.options,
            "started": self.started,
            "elapsed_seconds": self.elapsed,
            "seeds": self.seeds(),
            "files": dict(sorted(self.files.items())),
        }

    def write(self, out: Path) -> Path:
        self.elapsed = round(time.perf_counter() - self._t0, 3)
        path = out / "manifest.json"
        path.write_text(json.dumps(self.to_dict(), indent=2) + "\n")
        return path

    @staticmethod
    def verify(out: Path) -> list[str]:
        """Files whose digest no longer matches ``out/manifest.json``."""
        doc = json.loads((Path(out) / "manifest.json").read_text())
        return [name for name, meta in doc["files"].items() if sha256_file(Path(out) / name) != meta["sha256"]]
