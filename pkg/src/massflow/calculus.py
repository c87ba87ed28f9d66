"""Functionals of a recorded trajectory.

All integrals over labels ``u`` are exact mass-weighted sums over
clusters, since ``y(., s)`` is a step function of ``u``. Over one step
``[t_i, t_{i+1}]`` a cluster ``c`` is absorbed into its successor ``c'``
(possibly itself), and every label of ``c`` moves from ``x_c(t_i)`` to
``x_{c'}(t_{i+1})``.

Integrals against ``dy`` evaluate the integrand at the left endpoint. Integrals against ``ds``
that carry a ``1/m`` weight use the mass at the *end* of the step: the
engine moves a merged cluster as the weighted average of its parents'
free paths over the whole step, so its displacement variance over that
step is ``dt / m_end``. Left endpoint masses would charge the first
steps, where particles of mass ``1/n`` coalesce almost instantly, with a
variance rate of ``n`` for the whole step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.integrate import trapezoid

from .state import TrajectoryRecord, probe_index

__all__ = [
    "TestFunction",
    "LocalTimeProfile",
    "linear",
    "square",
    "sine",
    "constant",
    "indicator_above",
    "bump",
    "mass_at",
    "realized_qv",
    "inverse_mass_integral",
    "stochastic_integral",
    "stochastic_integral_path",
    "stochastic_integral_qv",
    "ito_residual",
    "occupation_integral",
    "local_time_tanaka",
    "meeting_time",
    "cluster_count",
]

Fn = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True)
class TestFunction:
    """A test function with optional first and second derivatives.

    ``integral`` is ``int_0^1 f(u) du`` when known in closed form.
    """

    __test__ = False  # not a pytest class

    f: Fn
    d1: Fn | None = None
    d2: Fn | None = None
    bound: float = math.inf
    bound_d1: float = math.inf
    bound_d2: float = math.inf
    integral: float | None = None
    name: str = "phi"

    def __call__(self, x):
        return np.asarray(self.f(np.asarray(x, dtype=float)), dtype=float) * np.ones_like(x, dtype=float)

    def first(self, x):
        if self.d1 is None:
            raise ValueError(f"{self.name}: first derivative not supplied")
        return np.asarray(self.d1(np.asarray(x, dtype=float)), dtype=float) * np.ones_like(x, dtype=float)

    def second(self, x):
        if self.d2 is None:
            raise ValueError(f"{self.name}: second derivative not supplied")
        return np.asarray(self.d2(np.asarray(x, dtype=float)), dtype=float) * np.ones_like(x, dtype=float)

    def self_check(self, domain=(-2.0, 3.0), points: int = 101, rtol: float = 1e-6) -> bool:
        """Compare the derivatives with centred differences on ``domain``."""
        x = np.linspace(*domain, points)
        ok = True
        if self.d1 is not None:
            h = 1e-5
            fd = (self(x + h) - self(x - h)) / (2 * h)
            ok &= bool(np.all(np.abs(fd - self.first(x)) <= rtol * np.maximum(1.0, np.abs(fd))))
        if self.d2 is not None:
            h = 1e-5
            fd = (self.first(x + h) - self.first(x - h)) / (2 * h)
            ok &= bool(np.all(np.abs(fd - self.second(x)) <= rtol * np.maximum(1.0, np.abs(fd))))
        return ok


def linear(alpha: float = 1.0, beta: float = 0.0) -> TestFunction:
    return TestFunction(
        lambda x: alpha * x + beta,
        lambda x: alpha + 0.0 * x,
        lambda x: 0.0 * x,
        bound_d1=abs(alpha),
        bound_d2=0.0,
        integral=alpha / 2 + beta,
        name=f"{alpha}x+{beta}",
    )


def square() -> TestFunction:
    return TestFunction(lambda x: x * x, lambda x: 2 * x, lambda x: 2.0 + 0.0 * x, bound_d2=2.0, integral=1 / 3, name="x^2")


def sine() -> TestFunction:
    return TestFunction(
        np.sin, np.cos, lambda x: -np.sin(x), 1.0, 1.0, 1.0, integral=1 - math.cos(1.0), name="sin"
    )


def constant(c: float = 1.0) -> TestFunction:
    return TestFunction(lambda x: c + 0.0 * x, lambda x: 0.0 * x, lambda x: 0.0 * x, abs(c), 0.0, 0.0, c, f"{c}")


def indicator_above(a: float) -> TestFunction:
    """``1`` on the open half line ``(a, inf)``; ``x == a`` maps to ``0``."""
    return TestFunction(lambda x: (x > a).astype(float), bound=1.0, integral=min(max(1.0 - a, 0.0), 1.0), name=f"1(x>{a})")


def bump(center: float = 0.5, width: float = 0.5) -> TestFunction:
    """Smooth compactly supported bump ``exp(1 - 1/(1 - r^2))`` for ``|r| < 1``, ``r = (x - c)/w``."""

    def f(x):
        r = (np.asarray(x, dtype=float) - center) / width
        out = np.zeros_like(r)
        inside = np.abs(r) < 1
        out[inside] = np.exp(1.0 - 1.0 / (1.0 - r[inside] ** 2))
        return out

    return TestFunction(f, bound=1.0, name=f"bump({center},{width})")


def _require_stride_one(record: TrajectoryRecord, what: str) -> None:
    if record.config.record_stride != 1:
        raise ValueError(f"{what} needs record_stride=1, got {record.config.record_stride}")


def mass_at(record: TrajectoryRecord, u: float, t: float) -> float:
    """Mass of the cluster carrying label ``u`` at recorded time ``t``."""
    i = record.time_index(t)
    k = probe_index(u, record.n)
    s = slice(record.offsets[i], record.offsets[i + 1])
    j = np.searchsorted(record.hi[s], k)
    return float(record.masses[s][j])


def realized_qv(path) -> np.ndarray:
    """Running sum of squared increments, with a leading zero at the first grid point."""
    path = np.asarray(path, dtype=float)
    if path.size < 2:
        raise ValueError("realized_qv needs at least two grid points")
    return np.concatenate([[0.0], np.cumsum(np.diff(path) ** 2)])


def inverse_mass_integral(record: TrajectoryRecord, u: float, endpoint: str = "right") -> np.ndarray:
    """Running Riemann sum of ``ds / m(u, s)`` on the recorded grid.

    ``endpoint="right"`` charges each step with the mass at its end (the
    default, matching the engine); ``"left"`` uses the mass at its start.
    """
    if endpoint not in ("left", "right"):
        raise ValueError(f"endpoint must be 'left' or 'right', got {endpoint!r}")
    _, m = record.probe_path(u)
    dt = np.diff(record.times)
    w = m[1:] if endpoint == "right" else m[:-1]
    return np.concatenate([[0.0], np.cumsum(dt / w)])


@dataclass(frozen=True)
class _Steps:
    """Per-entry quantities of all entries that start a step."""

    sid: np.ndarray  # step index of the entry
    x: np.ndarray  # position at the step start
    m: np.ndarray  # mass at the step start
    dx: np.ndarray  # displacement of its labels over the step
    m_end: np.ndarray  # mass of the successor
    dt: np.ndarray  # length of the step


def _steps(record: TrajectoryRecord) -> _Steps:
    cached = record.__dict__.get("_steps_cache")
    if cached is not None:
        return cached
    sid = record.snapshot_id
    live = sid < len(record.times) - 1
    succ = record.successor[live]
    x = record.positions[live]
    out = _Steps(
        sid=sid[live],
        x=x,
        m=record.masses[live],
        dx=record.positions[succ] - x,
        m_end=record.masses[succ],
        dt=np.diff(record.times)[sid[live]],
    )
    record.__dict__["_steps_cache"] = out
    return out


def _per_step(record: TrajectoryRecord, values: np.ndarray, steps: _Steps) -> np.ndarray:
    """Running sum over steps, aligned to the grid with a leading zero."""
    per = np.bincount(steps.sid, weights=values, minlength=len(record.times) - 1)
    return np.concatenate([[0.0], np.cumsum(per)])


def stochastic_integral_path(record: TrajectoryRecord, phi: TestFunction) -> np.ndarray:
    """``int_0^1 int_0^t phi(y(u,s)) dy(u,s) du`` at every recorded time."""
    _require_stride_one(record, "stochastic_integral")
    s = _steps(record)
    return _per_step(record, s.m * phi(s.x) * s.dx, s)


def stochastic_integral(record: TrajectoryRecord, phi: TestFunction, t: float) -> float:
    return float(stochastic_integral_path(record, phi)[record.time_index(t)])


def stochastic_integral_qv(record: TrajectoryRecord, phi: TestFunction) -> np.ndarray:
    """Riemann sum of ``int_0^t int_0^1 phi^2(y(u,s)) du ds``, the predicted quadratic variation."""
    _require_stride_one(record, "stochastic_integral_qv")
    s = _steps(record)
    return _per_step(record, s.m * phi(s.x) ** 2 * s.dt, s)


def occupation_integral(
    record: TrajectoryRecord, f: TestFunction, t: float | None = None, form: str = "cluster"
):
    """``int_0^t sum over clusters f(y_c(s)) ds``, i.e. ``int int f(y)/m du ds``.

    Each step is charged once per cluster alive at its end, with ``f``
    averaged (by mass) over the parents' starting positions.
    ``form="mass"`` evaluates the same sum as
    ``sum f(x_c) * m_c * (1 / m_end) * dt`` over starting clusters. With
    ``t=None`` the whole path is returned.
    """
    _require_stride_one(record, "occupation_integral")
    s = _steps(record)
    fx = f(s.x)
    if form == "cluster":
        succ = record.successor[record.snapshot_id < len(record.times) - 1]
        groups, inv = np.unique(succ, return_inverse=True)
        avg = np.bincount(inv, weights=s.m * fx) / record.masses[groups]
        gsid = record.snapshot_id[groups] - 1
        per = np.bincount(gsid, weights=avg * np.diff(record.times)[gsid], minlength=len(record.times) - 1)
        path = np.concatenate([[0.0], np.cumsum(per)])
    elif form == "mass":
        path = _per_step(record, fx * s.m * (1.0 / s.m_end) * s.dt, s)
    else:
        raise ValueError(f"form must be 'cluster' or 'mass', got {form!r}")
    return path if t is None else float(path[record.time_index(t)])


def _initial_integral(record: TrajectoryRecord, phi: TestFunction, initial: str) -> float:
    if initial == "finite":
        s = slice(record.offsets[0], record.offsets[1])
        return float(np.sum(record.masses[s] * phi(record.positions[s])))
    if initial == "continuum":
        if phi.integral is None:
            raise ValueError(f"{phi.name}: no closed-form integral over [0, 1]")
        return float(phi.integral)
    raise ValueError(f"initial must be 'finite' or 'continuum', got {initial!r}")


def ito_residual(record: TrajectoryRecord, phi: TestFunction, t: float, initial: str = "finite") -> float:
    """Remainder of the flow Ito formula at ``t``.

    ``R = int phi(y(u,t)) du - int phi(y(u,0)) du - int int phi'(y) dy du
    - (1/2) int int phi''(y)/m du ds``. With ``initial="finite"`` the
    starting term uses the particles' actual starting grid ``k/n``,
    which makes ``R`` vanish identically for linear ``phi``;
    ``"continuum"`` uses ``int_0^1 phi(u) du``.
    """
    if phi.d1 is None or phi.d2 is None:
        raise ValueError(f"{phi.name}: ito_residual needs both derivatives")
    i = record.time_index(t)
    s = slice(record.offsets[i], record.offsets[i + 1])
    final = float(np.sum(record.masses[s] * phi(record.positions[s])))
    start = _initial_integral(record, phi, initial)
    mart = stochastic_integral_path(record, TestFunction(phi.d1))[i]
    drift = 0.5 * occupation_integral(record, TestFunction(phi.d2))[i]
    return final - start - mart - drift


@dataclass(frozen=True)
class LocalTimeProfile:
    a: np.ndarray
    t: np.ndarray
    values: np.ndarray  # shape (len(t), len(a))

    def integrate(self, f: TestFunction) -> np.ndarray:
        """``int f(a) L(a, t) da`` by the trapezoid rule, one value per time."""
        return trapezoid(f(self.a) * self.values, self.a, axis=-1)


def _plus_part_sum(x: np.ndarray, w: np.ndarray, a: np.ndarray) -> np.ndarray:
    """``sum_j w_j (x_j - a)^+`` for every ``a``."""
    order = np.argsort(x, kind="stable")
    xs, ws = x[order], w[order]
    tail_w = np.concatenate([np.cumsum(ws[::-1])[::-1], [0.0]])
    tail_wx = np.concatenate([np.cumsum((ws * xs)[::-1])[::-1], [0.0]])
    j = np.searchsorted(xs, a, side="right")
    return tail_wx[j] - a * tail_w[j]


def _continuum_plus_part(a: np.ndarray) -> np.ndarray:
    """``int_0^1 (u - a)^+ du`` in closed form."""
    a = np.asarray(a, dtype=float)
    out = np.where(a < 0, 0.5 - a, 0.5 * (1 - a) ** 2)
    return np.where(a > 1, 0.0, out)


def local_time_tanaka(
    record: TrajectoryRecord,
    a_grid: Sequence[float],
    t: float | Sequence[float],
    initial: str = "finite",
) -> LocalTimeProfile:
    """Local time ``L(a, t)`` from the Tanaka representation.

    ``L = int (y(u,t) - a)^+ du - int (y(u,0) - a)^+ du
    - int int 1(y(u,s) > a) dy(u,s) du``; the indicator is strict. With
    ``initial="continuum"`` the middle term is the closed form of
    ``int_0^1 (u - a)^+ du`` instead of the finite starting grid.
    """
    _require_stride_one(record, "local_time_tanaka")
    a = np.asarray(a_grid, dtype=float)
    if a.ndim != 1 or (np.diff(a) <= 0).any():
        raise ValueError("a_grid must be increasing")
    ts = np.atleast_1d(np.asarray(t, dtype=float))
    s = _steps(record)
    w = s.m * s.dx
    if initial == "finite":
        sl = slice(record.offsets[0], record.offsets[1])
        start = _plus_part_sum(record.positions[sl], record.masses[sl], a)
    elif initial == "continuum":
        start = _continuum_plus_part(a)
    else:
        raise ValueError(f"initial must be 'finite' or 'continuum', got {initial!r}")
    rows = []
    for tv in ts:
        i = record.time_index(tv)
        sl = slice(record.offsets[i], record.offsets[i + 1])
        final = _plus_part_sum(record.positions[sl], record.masses[sl], a)
        before = s.sid < i
        xs = s.x[before]
        order = np.argsort(xs, kind="stable")
        tail = np.concatenate([np.cumsum(w[before][order][::-1])[::-1], [0.0]])
        indicator_integral = tail[np.searchsorted(xs[order], a, side="right")]
        rows.append(final - start - indicator_integral)
    return LocalTimeProfile(a, ts, np.array(rows))


def meeting_time(record: TrajectoryRecord, u: float, v: float) -> float:
    """First recorded time at which ``u`` and ``v`` share a cluster; ``inf`` if not by ``T``."""
    k, l = sorted((probe_index(u, record.n), probe_index(v, record.n)))
    if k == l:
        return 0.0
    ev = record.events
    hit = (ev["lo"] <= k) & (ev["hi"] >= l)
    if not hit.any():
        return math.inf
    te = ev["time"][hit].min()
    j = np.searchsorted(record.times, te - 1e-12)
    return float(record.times[min(j, len(record.times) - 1)])


def cluster_count(record: TrajectoryRecord, t: float) -> int:
    return int(record.counts[record.time_index(t)])
