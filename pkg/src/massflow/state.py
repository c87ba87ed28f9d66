"""Value types for the finite system of coalescing heavy particles.

Particles are labelled ``1..n`` and start at ``k/n`` with mass ``1/n``.
Because coalescence preserves order, every cluster is a contiguous block
``[lo, hi]`` of labels, and its mass is ``(hi - lo + 1) / n``.

Recorded trajectories are stored flat (CSR style): all clusters of all
recorded instants are concatenated, and ``offsets[i]:offsets[i + 1]``
selects the clusters alive at ``times[i]``.
"""

from __future__ import annotations

import bisect
import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

__all__ = [
    "SCHEMES",
    "StateCorruption",
    "SimConfig",
    "ClusterState",
    "FlowState",
    "CoalescenceEvent",
    "EVENT_DTYPE",
    "TrajectoryRecord",
    "CheckResult",
    "VerificationReport",
    "probe_index",
    "locate_cluster",
]

SCHEMES = ("grid-crossing", "bridge-corrected")

MASS_TOL = 1e-12


class StateCorruption(RuntimeError):
    """An internal invariant of the particle state was violated."""


@dataclass(frozen=True)
class SimConfig:
    """Reproducibility contract of a run.

    Parameters
    ----------
    n : int
        Number of initial particles.
    horizon : float
        Final time ``T``.
    dt : float
        Time step. The last step is shortened so that the run ends at ``T``.
    scheme : {"grid-crossing", "bridge-corrected"}
        Merge detection scheme.
    master_seed : int
        Unsigned 64-bit seed; replica streams are derived from it.
    replicas : int
        Ensemble size ``M``.
    record_stride : int
        Record every ``record_stride``-th step (the final time is always
        recorded).
    u_probes : tuple of float
        Sorted labels in ``[0, 1]`` whose paths are extracted.
    """

    n: int
    horizon: float
    dt: float
    scheme: str = "bridge-corrected"
    master_seed: int = 0
    replicas: int = 1
    record_stride: int = 1
    u_probes: tuple[float, ...] = (0.25, 0.5, 0.75)

    def __post_init__(self):
        object.__setattr__(self, "u_probes", tuple(float(u) for u in self.u_probes))
        self.validate()

    def validate(self) -> None:
        """Raise ``ValueError`` naming the first offending field."""
        if isinstance(self.n, bool) or not isinstance(self.n, (int, np.integer)) or self.n < 1:
            raise ValueError(f"n: must be a positive integer, got {self.n!r}")
        if not (isinstance(self.horizon, (int, float)) and math.isfinite(self.horizon) and self.horizon > 0):
            raise ValueError(f"horizon: must be a positive finite number, got {self.horizon!r}")
        if not (isinstance(self.dt, (int, float)) and math.isfinite(self.dt) and self.dt > 0):
            raise ValueError(f"dt: must be a positive finite number, got {self.dt!r}")
        if self.dt >= self.horizon:
            raise ValueError(f"dt: must be smaller than horizon ({self.dt} >= {self.horizon})")
        if self.scheme not in SCHEMES:
            raise ValueError(f"scheme: must be one of {SCHEMES}, got {self.scheme!r}")
        if (
            isinstance(self.master_seed, bool)
            or not isinstance(self.master_seed, (int, np.integer))
            or not 0 <= self.master_seed < 2**64
        ):
            raise ValueError(f"master_seed: must be an unsigned 64-bit integer, got {self.master_seed!r}")
        if isinstance(self.replicas, bool) or not isinstance(self.replicas, (int, np.integer)) or self.replicas < 1:
            raise ValueError(f"replicas: must be a positive integer, got {self.replicas!r}")
        if (
            isinstance(self.record_stride, bool)
            or not isinstance(self.record_stride, (int, np.integer))
            or self.record_stride < 1
        ):
            raise ValueError(f"record_stride: must be a positive integer, got {self.record_stride!r}")
        u = self.u_probes
        if any(not (0.0 <= x <= 1.0) for x in u):
            raise ValueError("u_probes: values must lie in [0, 1]")
        if any(a > b for a, b in zip(u, u[1:])):
            raise ValueError("u_probes: values must be sorted")

    @property
    def n_steps(self) -> int:
        # tolerance keeps T/dt = 1000.0000000001 from producing an extra sliver step
        return max(1, math.ceil(self.horizon / self.dt - 1e-9))

    @property
    def last_dt(self) -> float:
        return self.horizon - (self.n_steps - 1) * self.dt

    def replace(self, **changes) -> "SimConfig":
        fields = {**self.to_dict(), **changes}
        return SimConfig(**fields)

    def to_dict(self) -> dict:
        return {
            "n": int(self.n),
            "horizon": float(self.horizon),
            "dt": float(self.dt),
            "scheme": self.scheme,
            "master_seed": int(self.master_seed),
            "replicas": int(self.replicas),
            "record_stride": int(self.record_stride),
            "u_probes": list(self.u_probes),
        }


def probe_index(u: float, n: int) -> int:
    """Label of the particle carrying probe ``u``: ``floor(u n) + 1`` clamped to ``[1, n]``.

    >>> probe_index(0.5, 4), probe_index(1.0, 4), probe_index(0.0, 7)
    (3, 4, 1)
    """
    if n < 1:
        raise ValueError(f"n must be positive, got {n}")
    if not 0.0 <= u <= 1.0:
        raise ValueError(f"u must lie in [0, 1], got {u}")
    return min(int(math.floor(u * n)) + 1, n)


@dataclass(frozen=True)
class ClusterState:
    position: float
    lo: int
    hi: int
    n: int
    birth_time: float = 0.0

    def __post_init__(self):
        if not 1 <= self.lo <= self.hi <= self.n:
            raise StateCorruption(f"bad cluster interval [{self.lo}, {self.hi}] for n={self.n}")

    @property
    def mass(self) -> float:
        return (self.hi - self.lo + 1) / self.n

    @property
    def size(self) -> int:
        return self.hi - self.lo + 1


@dataclass(frozen=True)
class FlowState:
    """Ordered configuration of clusters at one instant."""

    time: float
    clusters: tuple[ClusterState, ...]

    def __post_init__(self):
        object.__setattr__(self, "clusters", tuple(self.clusters))
        self.check()

    @property
    def n(self) -> int:
        return self.clusters[0].n

    def check(self) -> None:
        cl = self.clusters
        if not cl:
            raise StateCorruption("empty cluster sequence")
        n = cl[0].n
        if cl[0].lo != 1 or cl[-1].hi != n:
            raise StateCorruption("cluster intervals do not cover 1..n")
        for a, b in zip(cl, cl[1:]):
            if b.lo != a.hi + 1:
                raise StateCorruption(f"intervals [{a.lo},{a.hi}] and [{b.lo},{b.hi}] are not adjacent")
            if not a.position < b.position:
                raise StateCorruption(f"positions not strictly increasing at label {b.lo}")
        if abs(sum(c.mass for c in cl) - 1.0) > MASS_TOL:
            raise StateCorruption("masses do not sum to 1")

    @property
    def positions(self) -> np.ndarray:
        return np.array([c.position for c in self.clusters])

    @property
    def masses(self) -> np.ndarray:
        return np.array([c.mass for c in self.clusters])

    @property
    def intervals(self) -> np.ndarray:
        return np.array([(c.lo, c.hi) for c in self.clusters], dtype=np.int64).reshape(-1, 2)

    def __len__(self) -> int:
        return len(self.clusters)


def locate_cluster(state: FlowState, index: int) -> ClusterState:
    """Cluster whose label interval contains ``index`` (binary search)."""
    n = state.n
    if not 1 <= index <= n:
        raise ValueError(f"index must lie in [1, {n}], got {index}")
    his = [c.hi for c in state.clusters]
    j = bisect.bisect_left(his, index)
    if j >= len(his) or not state.clusters[j].lo <= index <= state.clusters[j].hi:
        raise StateCorruption(f"no cluster contains label {index}")
    return state.clusters[j]


@dataclass(frozen=True)
class CoalescenceEvent:
    """One pairwise merge.

    Cluster identifiers are the smallest absorbed label (``lo``), which is
    stable for the left parent and unique among clusters alive at a time.
    """

    time: float
    left_id: int
    right_id: int
    lo: int
    hi: int
    merged_mass: float
    via_bridge: bool = False

    @property
    def merged_interval(self) -> tuple[int, int]:
        return (self.lo, self.hi)


EVENT_DTYPE = np.dtype(
    [
        ("time", "f8"),
        ("left_id", "i8"),
        ("right_id", "i8"),
        ("lo", "i8"),
        ("hi", "i8"),
        ("merged_mass", "f8"),
        ("via_bridge", "?"),
    ]
)


@dataclass(frozen=True, eq=False)
class TrajectoryRecord:
    """Time-gridded history of one replica.

    ``positions``/``lo``/``hi`` are flat arrays over all recorded clusters,
    ``offsets`` has ``len(times) + 1`` entries. ``events`` is a structured
    array with :data:`EVENT_DTYPE`.
    """

    config: SimConfig
    times: np.ndarray
    offsets: np.ndarray
    positions: np.ndarray
    lo: np.ndarray
    hi: np.ndarray
    events: np.ndarray
    replica_index: int = 0
    tag: str = ""

    @property
    def n(self) -> int:
        return self.config.n

    @cached_property
    def masses(self) -> np.ndarray:
        return (self.hi - self.lo + 1) / self.n

    @cached_property
    def counts(self) -> np.ndarray:
        """Number of clusters at each recorded time."""
        return np.diff(self.offsets)

    @cached_property
    def snapshot_id(self) -> np.ndarray:
        """Recorded-time index of every flat cluster entry."""
        return np.repeat(np.arange(len(self.times)), self.counts)

    def _flat_lookup(self, index: int) -> np.ndarray:
        """Flat entry of the cluster containing label ``index`` at every recorded time."""
        key = self.snapshot_id * (self.n + 1) + self.hi
        query = np.arange(len(self.times)) * (self.n + 1) + index
        return np.searchsorted(key, query, side="left")

    @cached_property
    def successor(self) -> np.ndarray:
        """For each entry at time ``i < last``, the entry at ``i + 1`` that absorbed it.

        Entries of the last recorded time map to ``-1``.
        """
        sid = self.snapshot_id
        key = sid * (self.n + 1) + self.hi
        nxt = sid + 1
        out = np.searchsorted(key, nxt * (self.n + 1) + self.lo, side="left")
        out[sid == len(self.times) - 1] = -1
        return out

    def probe_path(self, u: float) -> tuple[np.ndarray, np.ndarray]:
        """Position and mass of the cluster carrying label ``u`` at each recorded time."""
        j = self._flat_lookup(probe_index(u, self.n))
        return self.positions[j], self.masses[j]

    @cached_property
    def probe_paths(self) -> dict[float, tuple[np.ndarray, np.ndarray]]:
        return {u: self.probe_path(u) for u in self.config.u_probes}

    def time_index(self, t: float) -> int:
        """Index of recorded time ``t``; off-grid times raise ``ValueError``."""
        i = int(np.searchsorted(self.times, t))
        for j in (i - 1, i):
            if 0 <= j < len(self.times) and abs(self.times[j] - t) <= 1e-9 * max(1.0, abs(t)):
                return j
        raise ValueError(f"t={t} is not a recorded time")

    def state_at(self, i: int) -> FlowState:
        s = slice(self.offsets[i], self.offsets[i + 1])
        ev = self.events[self.events["time"] <= self.times[i] + 1e-12]
        birth = {(int(e["lo"]), int(e["hi"])): float(e["time"]) for e in ev}
        n = self.n
        clusters = [
            ClusterState(float(x), int(a), int(b), n, birth.get((int(a), int(b)), 0.0))
            for x, a, b in zip(self.positions[s], self.lo[s], self.hi[s])
        ]
        return FlowState(float(self.times[i]), clusters)

    def event_list(self) -> list[CoalescenceEvent]:
        return [
            CoalescenceEvent(
                float(e["time"]),
                int(e["left_id"]),
                int(e["right_id"]),
                int(e["lo"]),
                int(e["hi"]),
                float(e["merged_mass"]),
                bool(e["via_bridge"]),
            )
            for e in self.events
        ]

    def check(self) -> None:
        """Verify the partition, ordering and mass invariants at every recorded time."""
        n = self.n
        off = self.offsets
        first = self.lo[off[:-1]]
        last = self.hi[off[1:] - 1]
        if (first != 1).any() or (last != n).any():
            raise StateCorruption("intervals do not cover 1..n")
        same = self.snapshot_id[1:] == self.snapshot_id[:-1]
        if (self.lo[1:][same] != self.hi[:-1][same] + 1).any():
            raise StateCorruption("intervals are not adjacent")
        if (self.positions[1:][same] <= self.positions[:-1][same]).any():
            raise StateCorruption("positions not strictly increasing")
        msum = np.bincount(self.snapshot_id, weights=self.masses, minlength=len(self.times))
        if np.abs(msum - 1.0).max() > MASS_TOL:
            raise StateCorruption("masses do not sum to 1")


@dataclass
class CheckResult:
    name: str
    estimate: float
    se: float
    target: float
    rule: str
    passed: bool | None
    replicas: int = 0
    runtime: float = 0.0
    detail: dict = field(default_factory=dict)

    @property
    def status(self) -> str:
        if self.passed is None:
            return "inconclusive"
        return "pass" if self.passed else "fail"

    def to_dict(self, timing: bool = False) -> dict:
        """JSON-ready record; ``timing`` adds the (non-deterministic) runtime."""

        def clean(v):
            if isinstance(v, (np.floating, float)):
                v = float(v)
                return v if math.isfinite(v) else None
            if isinstance(v, np.integer):
                return int(v)
            if isinstance(v, np.ndarray):
                return [clean(x) for x in v.tolist()]
            if isinstance(v, (list, tuple)):
                return [clean(x) for x in v]
            if isinstance(v, dict):
                return {str(k): clean(x) for k, x in v.items()}
            return v

        out = {
            "name": self.name,
            "estimate": clean(self.estimate),
            "se": clean(self.se),
            "target": clean(self.target),
            "rule": self.rule,
            "pass": self.passed,
            "replicas": int(self.replicas),
            "detail": clean(self.detail),
        }
        if timing:
            out["runtime"] = float(self.runtime)
        return out


@dataclass
class VerificationReport:
    results: list[CheckResult] = field(default_factory=list)
    convention: str = "rate=1/mass per (F4)"

    def add(self, *results: CheckResult) -> None:
        self.results.extend(results)

    @property
    def passed(self) -> bool:
        return all(r.passed is not False for r in self.results)

    def failures(self) -> list[CheckResult]:
        return [r for r in self.results if r.passed is False]

    def to_list(self) -> list[dict]:
        return [r.to_dict() for r in self.results]

    def table(self) -> str:
        rows = [f"{'check':<48} {'status':<12} {'estimate':>12} {'se':>10} {'target':>18} {'M':>6} {'sec':>8}"]
        for r in self.results:
            rows.append(
                f"{r.name:<48} {r.status:<12} {_fmt(r.estimate):>12} {_fmt(r.se):>10} {_fmt(r.target):>18}"
                f" {r.replicas:>6} {r.runtime:>8.2f}"
            )
        return "\n".join(rows)


def _fmt(x) -> str:
    if isinstance(x, (list, tuple)):
        return "[" + ",".join(_fmt(v) for v in x) + "]"
    try:
        return f"{float(x):.5g}"
    except (TypeError, ValueError):
        return str(x)
