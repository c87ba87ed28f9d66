"""Time stepping of the finite coalescing system.

Each cluster of mass ``m`` receives an independent Gaussian displacement
with variance ``dt / m``. Adjacent clusters whose proposed positions cross
(``x_left >= x_right``) merge at the mass-weighted average of the two
proposals; the weighted average of two free paths is exactly the merged
path in law, so no rollback to the meeting time is needed. The
``bridge-corrected`` scheme also merges separated pairs with the
probability that the gap, a Brownian bridge over the step, touched zero.

Two routes implement the same step: :func:`step` in plain Python on
immutable :class:`~massflow.state.FlowState` values, and the compiled
kernel behind :func:`run_replica`. Given one :class:`RngStream` they
consume identical variates and produce identical trajectories.
"""

from __future__ import annotations

import math
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Iterable

import numpy as np

from . import _kernel
from .state import (
    EVENT_DTYPE,
    ClusterState,
    CoalescenceEvent,
    FlowState,
    SimConfig,
    StateCorruption,
    TrajectoryRecord,
)

__all__ = [
    "CONVENTION",
    "MERGE_RULES",
    "Dynamics",
    "RngStream",
    "EnsembleError",
    "init_uniform",
    "diffuse",
    "merge_pass",
    "bridge_merge_prob",
    "step",
    "run_replica",
    "run_ensemble",
    "eta_path",
]

CONVENTION = "rate=1/mass per (F4)"
MERGE_RULES = ("weighted", "midpoint")

_BLOCK = 1 << 16


@dataclass(frozen=True)
class Dynamics:
    """Perturbations of the dynamics used as test fixtures.

    ``drift`` adds a deterministic velocity to every cluster, ``noise``
    scales all Gaussian displacements (``0`` freezes the system) and
    ``merge_rule="midpoint"`` places merged clusters halfway between the
    parents regardless of mass. The defaults are the true dynamics.
    """

    drift: float = 0.0
    noise: float = 1.0
    merge_rule: str = "weighted"

    def __post_init__(self):
        if self.merge_rule not in MERGE_RULES:
            raise ValueError(f"merge_rule must be one of {MERGE_RULES}, got {self.merge_rule!r}")

    @property
    def is_default(self) -> bool:
        return self == Dynamics()

    @property
    def tag(self) -> str:
        if self.is_default:
            return CONVENTION
        return f"{CONVENTION}; drift={self.drift}; noise={self.noise}; merge_rule={self.merge_rule}"


class RngStream:
    """Variates of one replica.

    Streams are derived from ``SeedSequence(master_seed, spawn_key=(replica_index,))``;
    normals and uniforms come from two independent PCG64 children so
    that each can be drawn in blocks without disturbing the other.
    """

    def __init__(self, master_seed: int, replica_index: int = 0):
        self.master_seed = int(master_seed)
        self.replica_index = int(replica_index)
        root = np.random.SeedSequence(self.master_seed, spawn_key=(self.replica_index,))
        zs, us = root.spawn(2)
        self._normal = np.random.Generator(np.random.PCG64(zs))
        self._uniform = np.random.Generator(np.random.PCG64(us))
        self.stream_id = root.generate_state(2, np.uint64).tolist()

    def normals(self, k: int) -> np.ndarray:
        return self._normal.standard_normal(k)

    def uniforms(self, k: int) -> np.ndarray:
        return self._uniform.random(k)

    def uniform(self) -> float:
        return float(self._uniform.random())


class EnsembleError(RuntimeError):
    def __init__(self, replica_index: int, cause: BaseException):
        super().__init__(f"replica {replica_index} failed: {cause!r}")
        self.replica_index = replica_index
        self.__cause__ = cause


def init_uniform(n: int) -> FlowState:
    """``n`` singletons, particle ``k`` at ``k/n`` with mass ``1/n``."""
    if n < 1:
        raise ValueError(f"n must be positive, got {n}")
    return FlowState(0.0, [ClusterState(k / n, k, k, n) for k in range(1, n + 1)])


def diffuse(
    state: FlowState,
    dt: float,
    rng: RngStream,
    dynamics: Dynamics = Dynamics(),
) -> np.ndarray:
    """Proposed positions ``x + sqrt(dt / m) Z``; ordering is not enforced."""
    if dt <= 0:
        raise ValueError(f"dt must be positive, got {dt}")
    x = state.positions
    m = state.masses
    if (m <= 0).any():
        raise StateCorruption("nonpositive cluster mass")
    z = rng.normals(len(x))
    return x + dynamics.drift * dt + dynamics.noise * np.sqrt(dt / m) * z


def bridge_merge_prob(g0: float, g1: float, rate: float, dt: float) -> float:
    """Probability that a Brownian bridge from ``g0`` to ``g1`` over ``dt`` touches zero.

    ``rate`` is the variance rate of the gap, ``1/m_left + 1/m_right``
    for two free clusters.
    """
    if g0 <= 0 or g1 <= 0:
        raise ValueError("gaps must be positive; touching pairs merge deterministically")
    if rate <= 0 or dt <= 0:
        raise ValueError("rate and dt must be positive")
    return math.exp(-2.0 * g0 * g1 / (rate * dt))


class _Stack:
    """Cluster stack shared by the crossing and bridge passes."""

    def __init__(self, n: int, t: float, rule: str):
        self.n = n
        self.t = t
        self.midpoint = rule == "midpoint"
        self.x0: list[float] = []
        self.x1: list[float] = []
        self.lo: list[int] = []
        self.hi: list[int] = []
        self.birth: list[float] = []
        self.events: list[CoalescenceEvent] = []

    def push(self, x0, x1, lo, hi, birth):
        self.x0.append(x0)
        self.x1.append(x1)
        self.lo.append(lo)
        self.hi.append(hi)
        self.birth.append(birth)

    def mass(self, j: int) -> float:
        return (self.hi[j] - self.lo[j] + 1.0) / self.n

    def merge_top(self, via_bridge: bool = False) -> None:
        x0b, x1b, lob, hib = self.x0.pop(), self.x1.pop(), self.lo.pop(), self.hi.pop()
        self.birth.pop()
        ca = self.hi[-1] - self.lo[-1] + 1.0
        cb = hib - lob + 1.0
        if self.midpoint:
            self.x1[-1] = 0.5 * (self.x1[-1] + x1b)
            self.x0[-1] = 0.5 * (self.x0[-1] + x0b)
        else:
            self.x1[-1] = (ca * self.x1[-1] + cb * x1b) / (ca + cb)
            self.x0[-1] = (ca * self.x0[-1] + cb * x0b) / (ca + cb)
        lo = self.lo[-1]
        self.hi[-1] = hib
        self.birth[-1] = self.t
        self.events.append(
            CoalescenceEvent(self.t, lo, lob, lo, hib, (hib - lo + 1.0) / self.n, via_bridge)
        )

    def resolve_crossings(self) -> None:
        while len(self.x1) >= 2 and self.x1[-2] >= self.x1[-1]:
            self.merge_top()

    def state(self) -> FlowState:
        return FlowState(
            self.t,
            [ClusterState(x, a, b, self.n, bt) for x, a, b, bt in zip(self.x1, self.lo, self.hi, self.birth)],
        )


def _crossing_pass(x0, x1, lo, hi, birth, n, t, rule) -> _Stack:
    s = _Stack(n, t, rule)
    for j in range(len(x1)):
        s.push(float(x0[j]), float(x1[j]), int(lo[j]), int(hi[j]), float(birth[j]))
        s.resolve_crossings()
    return s


def merge_pass(
    proposed,
    masses,
    intervals,
    *,
    time: float = 0.0,
    rule: str = "weighted",
    births=None,
) -> tuple[FlowState, list[CoalescenceEvent]]:
    """Merge every adjacent pair with ``x_left >= x_right`` until the order is strict.

    The merged cluster sits at ``(m_l x_l + m_r x_r) / (m_l + m_r)``;
    cascades are resolved within the pass. Events carry ``time``.
    """
    proposed = np.asarray(proposed, dtype=float)
    intervals = np.asarray(intervals, dtype=np.int64).reshape(-1, 2)
    masses = np.asarray(masses, dtype=float)
    n = int(intervals[-1, 1])
    sizes = intervals[:, 1] - intervals[:, 0] + 1
    if len(proposed) != len(intervals) or not np.allclose(masses, sizes / n, rtol=0, atol=1e-12):
        raise StateCorruption("masses do not match intervals")
    birth = np.zeros(len(proposed)) if births is None else births
    s = _crossing_pass(proposed, proposed, intervals[:, 0], intervals[:, 1], birth, n, time, rule)
    return s.state(), s.events


def step(
    state: FlowState,
    dt: float,
    rng: RngStream,
    scheme: str = "bridge-corrected",
    dynamics: Dynamics = Dynamics(),
) -> tuple[FlowState, list[CoalescenceEvent]]:
    """Advance ``state`` by ``dt``: diffuse, merge crossings, then (optionally) bridge merges."""
    n = state.n
    t = state.time + dt
    x0 = state.positions
    x1 = diffuse(state, dt, rng, dynamics)
    iv = state.intervals
    births = [c.birth_time for c in state.clusters]
    s = _crossing_pass(x0, x1, iv[:, 0], iv[:, 1], births, n, t, dynamics.merge_rule)
    if scheme == "bridge-corrected" and dynamics.noise != 0.0:
        crossed = s
        s = _Stack(n, t, dynamics.merge_rule)
        s.events = crossed.events
        for j in range(len(crossed.x1)):
            s.push(crossed.x0[j], crossed.x1[j], crossed.lo[j], crossed.hi[j], crossed.birth[j])
            if len(s.x1) < 2:
                continue
            g0 = s.x0[-1] - s.x0[-2]
            g1 = s.x1[-1] - s.x1[-2]
            rate = (1.0 / s.mass(-2) + 1.0 / s.mass(-1)) * dynamics.noise * dynamics.noise
            if g0 <= 0.0:
                hit = True
            else:
                arg = 2.0 * g0 * g1 / (rate * dt)
                hit = arg < _kernel.BRIDGE_CUTOFF and rng.uniform() < math.exp(-arg)
            if hit:
                s.merge_top(via_bridge=True)
                s.resolve_crossings()
    elif scheme not in ("grid-crossing", "bridge-corrected"):
        raise ValueError(f"unknown scheme {scheme!r}")
    return s.state(), s.events


def _grow(a: np.ndarray, size: int) -> np.ndarray:
    out = np.empty(size, dtype=a.dtype)
    out[: len(a)] = a
    return out


def run_replica(
    config: SimConfig,
    replica_index: int = 0,
    dynamics: Dynamics = Dynamics(),
) -> TrajectoryRecord:
    """Simulate one replica on ``[0, T]`` and record every ``record_stride``-th step."""
    n = config.n
    nsteps = config.n_steps
    stride = config.record_stride
    bridge = config.scheme == "bridge-corrected"
    rng = RngStream(config.master_seed, replica_index)

    x = np.arange(1, n + 1) / n
    lo = np.arange(1, n + 1, dtype=np.int64)
    hi = lo.copy()
    st = np.zeros(7, dtype=np.int64)
    st[_kernel.NCL] = n

    nrec = 1 + nsteps // stride + (1 if nsteps % stride else 0)
    rec_t = np.zeros(nrec)
    rec_off = np.zeros(nrec + 1, dtype=np.int64)
    cap = n + min(nrec * min(n, 64), 1 << 22)
    try:
        rec_x = np.empty(cap)
        rec_lo = np.empty(cap, dtype=np.int64)
        rec_hi = np.empty(cap, dtype=np.int64)
    except MemoryError as exc:
        raise MemoryError(f"cannot allocate {cap} record entries for n={n}") from exc
    rec_x[:n] = x
    rec_lo[:n] = lo
    rec_hi[:n] = hi
    rec_off[1] = n
    st[_kernel.NREC] = 1
    st[_kernel.NENT] = n

    ev_f = np.empty((max(n - 1, 1), 2))
    ev_i = np.empty((max(n - 1, 1), 5), dtype=np.int64)
    # a step needs at most n variates; small runs should not pay for a full block
    block = max(2 * n, min(_BLOCK, n * nsteps))
    z = rng.normals(block)
    u = rng.uniforms(block) if bridge else np.empty(0)
    x0 = np.empty(n)
    x1 = np.empty(n)

    while True:
        status = _kernel.advance(
            x, lo, hi, st, n, nsteps, config.dt, config.last_dt, config.horizon, stride,
            bridge, dynamics.merge_rule == "midpoint", dynamics.drift, dynamics.noise,
            z, u, x0, x1, rec_t, rec_off, rec_x, rec_lo, rec_hi, ev_f, ev_i,
        )
        if status == _kernel.DONE:
            break
        if status == _kernel.NEED_NORMALS:
            z = np.concatenate([z[st[_kernel.ZP]:], rng.normals(block)])
            st[_kernel.ZP] = 0
        elif status == _kernel.NEED_UNIFORMS:
            u = np.concatenate([u[st[_kernel.UP]:], rng.uniforms(block)])
            st[_kernel.UP] = 0
        elif status == _kernel.NEED_RECORD_ENTRIES:
            size = 2 * len(rec_x)
            try:
                rec_x, rec_lo, rec_hi = (_grow(a, size) for a in (rec_x, rec_lo, rec_hi))
            except MemoryError as exc:
                raise MemoryError(
                    f"cannot grow trajectory record to {size} entries (n={n}, step {st[_kernel.STEP]})"
                ) from exc
        else:
            raise StateCorruption(f"kernel returned status {status}")

    ne = st[_kernel.NENT]
    nev = st[_kernel.NEV]
    events = np.empty(nev, dtype=EVENT_DTYPE)
    events["time"] = ev_f[:nev, 0]
    events["merged_mass"] = ev_f[:nev, 1]
    for j, name in enumerate(("left_id", "right_id", "lo", "hi")):
        events[name] = ev_i[:nev, j]
    events["via_bridge"] = ev_i[:nev, 4].astype(bool)
    return TrajectoryRecord(
        config=config,
        times=rec_t,
        offsets=rec_off,
        positions=rec_x[:ne].copy(),
        lo=rec_lo[:ne].copy(),
        hi=rec_hi[:ne].copy(),
        events=events,
        replica_index=replica_index,
        tag=dynamics.tag,
    )


def _checked(config, i, dynamics):
    try:
        return run_replica(config, i, dynamics)
    except Exception as exc:
        raise EnsembleError(i, exc) from exc


def run_ensemble(
    config: SimConfig,
    dynamics: Dynamics = Dynamics(),
    *,
    threads: int = 1,
    consumer: Callable[[TrajectoryRecord], None] | None = None,
    replicas: Iterable[int] | None = None,
) -> list[TrajectoryRecord] | None:
    """Run replicas ``0..M-1``.

    Without ``consumer`` the records are returned in replica order. With a
    consumer each record is handed over in replica order and dropped, so
    at most ``2 * threads`` records are alive at once. ``threads`` never
    changes results.
    """
    indices = list(range(config.replicas) if replicas is None else replicas)
    out: list[TrajectoryRecord] = []
    sink = out.append if consumer is None else consumer
    if threads <= 1:
        for i in indices:
            sink(_checked(config, i, dynamics))
    else:
        _kernel.warmup()
        with ThreadPoolExecutor(threads) as pool:
            window: deque = deque()
            for i in indices:
                window.append(pool.submit(_checked, config, i, dynamics))
                if len(window) >= 2 * threads:
                    sink(window.popleft().result())
            while window:
                sink(window.popleft().result())
    return out if consumer is None else None


def eta_path(record: TrajectoryRecord) -> np.ndarray:
    """Centre of mass ``sum_c m_c x_c`` at every recorded time."""
    return np.bincount(
        record.snapshot_id, weights=record.masses * record.positions, minlength=len(record.times)
    )
