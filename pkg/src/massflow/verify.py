"""Ensemble checks of the flow's properties.

Every check consumes trajectory records one at a time through
``observe`` and keeps only :class:`Accumulator` state, so an ensemble can
be streamed straight from :func:`massflow.engine.run_ensemble` and
discarded. Each result carries a rule from :data:`RULES`; the pass flag
is recomputed from ``(estimate, se, target)`` by :func:`decide`.

Mean tests use a slack of ``3 SE``; inequalities from the theory are
tested one-sided as ``estimate <= bound + 3 SE``; unknown constants are
replaced by log-log slopes inside a window.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Sequence

import numpy as np
from scipy import stats

from . import calculus as fc
from .state import CheckResult, SimConfig, TrajectoryRecord, VerificationReport, probe_index
from .engine import eta_path, run_ensemble, Dynamics

__all__ = [
    "RULES",
    "CheckSpec",
    "Accumulator",
    "SampleAccumulator",
    "decide",
    "tail_bound",
    "hitting_survival",
    "Check",
    "MartingaleMean",
    "SecondMomentGrowth",
    "ClusterCountScaling",
    "InverseMassTail",
    "EtaWiener",
    "MeetingDomination",
    "ZeroCovariation",
    "QvIdentity",
    "ItoFormula",
    "IntegralQv",
    "TanakaDuality",
    "duality_grid",
    "duality_error",
    "CHECKS",
    "check_martingale_mean",
    "check_second_moment_growth",
    "check_cluster_count_scaling",
    "check_inverse_mass_tail",
    "check_eta_wiener",
    "check_meeting_domination",
    "check_c5_zero_covariation",
    "stability_in_n",
    "run_checks",
    "default_checks",
]

RULES = ("mean-within-3SE", "bound-with-slack", "slope-in-range", "ks-level", "pathwise-tolerance")

MIN_REPLICAS = 30
KS_LEVEL = 0.01


@dataclass(frozen=True)
class CheckSpec:
    name: str
    rule: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.rule not in RULES:
            raise ValueError(f"unknown rule {self.rule!r}")


def decide(rule: str, estimate: float, se: float, target) -> bool:
    """Pass flag as a pure function of the persisted fields.

    ``target`` is a number for the mean and bound rules, an inclusive
    ``[lo, hi]`` range for ``slope-in-range`` and ``pathwise-tolerance``
    (where ``estimate`` is the observed error) and the level for
    ``ks-level`` (where ``estimate`` is the p-value).
    """
    if rule == "mean-within-3SE":
        return bool(abs(estimate - target) <= 3 * se + 1e-12 * max(1.0, abs(target)))
    if rule == "bound-with-slack":
        return bool(estimate <= target + 3 * se)
    if rule in ("slope-in-range", "pathwise-tolerance"):
        lo, hi = target
        return bool(lo <= estimate <= hi)
    if rule == "ks-level":
        return bool(estimate >= target)
    raise ValueError(f"unknown rule {rule!r}")


def _frac(x) -> Fraction:
    return Fraction(float(x))


class Accumulator:
    """Count, sum and sum of squares of a fixed-shape statistic.

    Sums are exact rationals, so merging is associative and commutative
    bit for bit and results do not depend on replica order.
    """

    def __init__(self, shape=()):
        self.shape = tuple(np.atleast_1d(np.empty(shape)).shape) if shape != () else ()
        size = int(np.prod(self.shape)) if self.shape else 1
        self.count = 0
        self._s1 = [Fraction(0)] * size
        self._s2 = [Fraction(0)] * size

    def add(self, value) -> None:
        v = np.asarray(value, dtype=float).reshape(-1)
        if v.size != len(self._s1):
            raise ValueError(f"expected {len(self._s1)} values, got {v.size}")
        self.count += 1
        for j, x in enumerate(v.tolist()):
            f = _frac(x)
            self._s1[j] += f
            self._s2[j] += f * f

    def merge(self, other: "Accumulator") -> "Accumulator":
        if other.shape != self.shape:
            raise ValueError("shape mismatch")
        out = Accumulator(self.shape)
        out.count = self.count + other.count
        out._s1 = [a + b for a, b in zip(self._s1, other._s1)]
        out._s2 = [a + b for a, b in zip(self._s2, other._s2)]
        return out

    def _shaped(self, vals) -> np.ndarray:
        a = np.array(vals, dtype=float)
        return a.reshape(self.shape) if self.shape else a[0]

    @property
    def mean(self):
        if self.count == 0:
            return self._shaped([math.nan] * len(self._s1))
        return self._shaped([float(s / self.count) for s in self._s1])

    @property
    def var(self):
        """Unbiased sample variance."""
        c = self.count
        if c < 2:
            return self._shaped([math.nan] * len(self._s1))
        return self._shaped([float(max((s2 - s1 * s1 / c) / (c - 1), 0)) for s1, s2 in zip(self._s1, self._s2)])

    @property
    def se(self):
        return np.sqrt(self.var / self.count) if self.count >= 2 else self.var

    def state(self) -> dict:
        return {"count": self.count, "s1": [str(s) for s in self._s1], "s2": [str(s) for s in self._s2]}


class SampleAccumulator:
    """Pooled samples for empirical distribution tests; merge keeps them sorted."""

    def __init__(self):
        self._chunks: list[np.ndarray] = []

    def add(self, values) -> None:
        self._chunks.append(np.asarray(values, dtype=float).ravel())

    def merge(self, other: "SampleAccumulator") -> "SampleAccumulator":
        out = SampleAccumulator()
        out._chunks = [self.values, other.values]
        return out

    @property
    def values(self) -> np.ndarray:
        if not self._chunks:
            return np.empty(0)
        v = np.sort(np.concatenate(self._chunks))
        self._chunks = [v]
        return v

    def __len__(self) -> int:
        return sum(len(c) for c in self._chunks)


def tail_bound(t: float, r: float) -> float:
    """``P{1/m(u,t) > r} <= (2/sqrt(2 pi)) (t r^3)^(-1/2)``."""
    return 2.0 / math.sqrt(2.0 * math.pi) / math.sqrt(t * r**3)


def hitting_survival(gap: float, t, rate: float = 2.0):
    """``P{sigma >= t}`` for the zero hitting time of a rate-``rate`` Brownian motion from ``gap``."""
    t = np.asarray(t, dtype=float)
    with np.errstate(divide="ignore"):
        z = gap / np.sqrt(rate * t)
    return np.where(t > 0, 2.0 * stats.norm.cdf(z) - 1.0, 1.0)


def _slope(t, y) -> tuple[float, float]:
    """OLS slope of ``log y`` on ``log t`` and its standard error."""
    res = stats.linregress(np.log(t), np.log(y))
    return float(res.slope), float(res.stderr)


def _snap(record: TrajectoryRecord, times: Sequence[float]) -> np.ndarray:
    return np.array([record.time_index(t) for t in times])


def _grid_times(config: SimConfig, times: Sequence[float]) -> list[float]:
    """Round requested times to the nearest recorded grid time."""
    h = config.dt * config.record_stride
    out = []
    for t in times:
        if t >= config.horizon:
            out.append(config.horizon)
        else:
            out.append(min(round(t / h) * h, config.horizon))
    return out


class Check:
    """Base class: ``observe`` every record, then read ``results``."""

    name = "check"

    def __init__(self):
        self.replicas = 0
        self._t0 = time.perf_counter()
        self._elapsed = 0.0

    def observe(self, record: TrajectoryRecord) -> None:
        t0 = time.perf_counter()
        self._observe(record)
        self.replicas += 1
        self._elapsed += time.perf_counter() - t0

    def _observe(self, record: TrajectoryRecord) -> None:
        raise NotImplementedError

    def results(self) -> list[CheckResult]:
        raise NotImplementedError

    def _result(self, name, estimate, se, target, rule, passed=None, **detail) -> CheckResult:
        if passed is None:
            passed = decide(rule, estimate, se, target)
        return CheckResult(
            name=name,
            estimate=estimate,
            se=se,
            target=target,
            rule=rule,
            passed=passed,
            replicas=self.replicas,
            runtime=self._elapsed,
            detail=detail,
        )


class MartingaleMean(Check):
    """``E y(u, t) = y(u, 0)``.

    The target is the probe's starting position ``k/n``, which differs from
    ``u`` by less than ``1/n``.
    """

    name = "martingale_mean"

    def __init__(self, us=(0.25, 0.5, 0.75), ts=(0.1, 0.5, 1.0)):
        super().__init__()
        self.us = tuple(us)
        self.ts = tuple(ts)
        self.acc = Accumulator((len(self.us), len(self.ts)))
        self.start = None

    def _observe(self, record):
        if self.start is None:
            self.ts = tuple(_grid_times(record.config, self.ts))
            self.start = [probe_index(u, record.n) / record.n for u in self.us]
        idx = _snap(record, self.ts)
        self.acc.add([record.probe_path(u)[0][idx] for u in self.us])

    def results(self):
        mean, se = self.acc.mean, self.acc.se
        out = []
        for a, u in enumerate(self.us):
            for b, t in enumerate(self.ts):
                r = self._result(
                    f"{self.name}[u={u:g},t={t:g}]", mean[a, b], se[a, b], self.start[a], "mean-within-3SE",
                    u=u, t=t,
                )
                if self.replicas < MIN_REPLICAS:
                    r.passed = None
                    r.detail["note"] = f"undersized ensemble (M={self.replicas} < {MIN_REPLICAS})"
                out.append(r)
        return out


class SecondMomentGrowth(Check):
    """``E (y(u,t) - u)^2`` grows like ``t^(1/2)`` and equals ``E int_0^t ds / m(u,s)``."""

    name = "second_moment_growth"

    def __init__(self, us=(0.5,), ts=None, slope_range=(0.4, 0.6), isometry_t=None):
        super().__init__()
        self.us = tuple(us)
        self.ts = tuple(np.geomspace(1e-3, 1e-1, 9) if ts is None else ts)
        if math.log10(max(self.ts) / min(self.ts)) < 1.5:
            raise ValueError("second_moment_growth needs a time grid spanning at least 1.5 decades")
        self.slope_range = slope_range
        self.isometry_t = isometry_t
        self.sq = Accumulator((len(self.us), len(self.ts)))
        self.iso = None
        self._ready = False

    def _observe(self, record):
        if not self._ready:
            self.ts = tuple(_grid_times(record.config, self.ts))
            self.isometry_t = _grid_times(record.config, [self.isometry_t or max(self.ts)])[0]
            self.iso = Accumulator((3, len(self.us)))
            self._ready = True
        idx = _snap(record, self.ts)
        j = record.time_index(self.isometry_t)
        rows, sq, qv = [], [], []
        for u in self.us:
            y, _ = record.probe_path(u)
            x0 = y[0]
            rows.append((y[idx] - x0) ** 2)
            sq.append((y[j] - x0) ** 2)
            qv.append(fc.inverse_mass_integral(record, u)[j])
        self.sq.add(rows)
        sq, qv = np.array(sq), np.array(qv)
        self.iso.add([sq, qv, sq - qv])

    def results(self):
        out = []
        mean = self.sq.mean
        imean, ise = self.iso.mean, self.iso.se
        for a, u in enumerate(self.us):
            slope, sse = _slope(self.ts, mean[a])
            out.append(
                self._result(
                    f"{self.name}.slope[u={u:g}]", slope, sse, list(self.slope_range), "slope-in-range",
                    u=u, t=list(self.ts), mean_sq=mean[a],
                )
            )
            out.append(
                self._result(
                    f"{self.name}.isometry[u={u:g},t={self.isometry_t:g}]", imean[2, a], ise[2, a], 0.0,
                    "mean-within-3SE", u=u, mean_sq=imean[0, a], mean_inverse_mass_integral=imean[1, a],
                )
            )
        return out


class ClusterCountScaling(Check):
    """``E N(t) <= C / sqrt(t)`` tested as a log-log slope in ``[-0.6, -0.4]``."""

    name = "cluster_count_scaling"

    def __init__(self, ts=None, slope_range=(-0.6, -0.4), guard=5.0):
        super().__init__()
        self.ts = tuple(np.geomspace(1e-3, 1e-1, 9) if ts is None else ts)
        self.slope_range = slope_range
        self.guard = guard
        self.acc = Accumulator(len(self.ts))
        self._ready = False

    def _observe(self, record):
        if not self._ready:
            self.ts = tuple(_grid_times(record.config, self.ts))
            self._ready = True
        self.acc.add(record.counts[_snap(record, self.ts)])

    def slope(self) -> tuple[float, float]:
        return _slope(self.ts, self.acc.mean)

    def results(self):
        mean, se = self.acc.mean, self.acc.se
        slope, sse = self.slope()
        scaled = mean * np.sqrt(self.ts)
        scaled_se = se * np.sqrt(self.ts)
        nonincreasing = bool(np.all(np.diff(scaled) <= 3 * np.hypot(scaled_se[1:], scaled_se[:-1])))
        detail = dict(t=list(self.ts), mean_count=mean, se_count=se, n_sqrt_t=scaled, n_sqrt_t_nonincreasing=nonincreasing)
        r = self._result(f"{self.name}.slope", slope, sse, list(self.slope_range), "slope-in-range", **detail)
        if mean[-1] < self.guard:
            r.passed = None
            r.detail["note"] = f"inconclusive: E N(t_max) = {mean[-1]:.3g} < {self.guard}"
        return [r]


class InverseMassTail(Check):
    """Tail ``P{1/m(u,t) > r}`` against the hitting-time bound, plus ``E m^-beta sqrt(t)``."""

    name = "inverse_mass_tail"

    def __init__(self, u=0.5, ts=(0.01, 0.04), rs=(2, 5, 10, 20), betas=(0.5, 1.0, 1.4), ratio_range=(0.5, 2.0)):
        super().__init__()
        self.u = u
        self.ts = tuple(ts)
        self.rs = tuple(float(r) for r in rs)
        self.betas = tuple(betas)
        self.ratio_range = ratio_range
        self.tail = Accumulator((len(self.ts), len(self.rs)))
        self.moments = Accumulator((len(self.betas), len(self.ts)))
        self._ready = False

    def _observe(self, record):
        if not self._ready:
            self.ts = tuple(_grid_times(record.config, self.ts))
            self._ready = True
        _, m = record.probe_path(self.u)
        inv = 1.0 / m[_snap(record, self.ts)]
        self.tail.add((inv[:, None] > np.array(self.rs)[None, :]).astype(float))
        self.moments.add(inv[None, :] ** np.array(self.betas)[:, None])

    def results(self):
        out = []
        p, se = self.tail.mean, self.tail.se
        for a, t in enumerate(self.ts):
            for b, r in enumerate(self.rs):
                out.append(
                    self._result(
                        f"{self.name}[t={t:g},r={r:g}]", p[a, b], se[a, b], tail_bound(t, r),
                        "bound-with-slack", u=self.u, t=t, r=r,
                    )
                )
        mm, mse = self.moments.mean, self.moments.se
        st = np.sqrt(self.ts)
        for c, beta in enumerate(self.betas):
            scaled = mm[c] * st
            ratio = scaled[-1] / scaled[0]
            rse = ratio * math.hypot(mse[c, -1] / mm[c, -1], mse[c, 0] / mm[c, 0])
            out.append(
                self._result(
                    f"{self.name}.moment_ratio[beta={beta:g}]", ratio, rse, list(self.ratio_range),
                    "slope-in-range", beta=beta, t=list(self.ts), moment_sqrt_t=scaled,
                )
            )
        return out


class EtaWiener(Check):
    """The centre of mass is a standard Wiener process."""

    name = "eta_wiener"

    def __init__(self, qv_tolerance=0.05):
        super().__init__()
        self.qv_tolerance = qv_tolerance
        self.qv = Accumulator()
        self.lag = Accumulator(3)
        self.samples = SampleAccumulator()
        self.horizon = None

    def _observe(self, record):
        if record.config.record_stride != 1:
            raise ValueError("eta_wiener needs record_stride=1")
        self.horizon = record.config.horizon
        eta = eta_path(record)
        d = np.diff(eta)
        self.qv.add(np.sum(d * d))
        z = d / np.sqrt(np.diff(record.times))
        self.samples.add(z)
        self.lag.add([np.sum(z[1:] * z[:-1]), np.sum(z * z), len(z) - 1])

    def results(self):
        T = self.horizon
        qv, qse = self.qv.mean, self.qv.se
        rel = abs(qv / T - 1)
        pooled = self.samples.values
        ks = stats.kstest(pooled, "norm")
        s = self.lag.mean * self.lag.count
        rho = s[0] / s[1]
        pairs = int(round(s[2]))
        lim = 3 / math.sqrt(pairs)
        return [
            self._result(f"{self.name}.qv", rel, qse / T, [0.0, self.qv_tolerance], "pathwise-tolerance",
                         mean_qv=qv, horizon=T),
            self._result(f"{self.name}.ks", float(ks.pvalue), 0.0, KS_LEVEL, "ks-level",
                         ks_statistic=float(ks.statistic), samples=len(pooled)),
            self._result(f"{self.name}.lag1", abs(rho), 0.0, [0.0, lim], "pathwise-tolerance", rho=rho, pairs=pairs),
        ]


class MeetingDomination(Check):
    """``P{tau_uv >= t} <= P{sigma >= t}``, ``sigma`` the hitting time of a rate-2 Brownian motion."""

    name = "meeting_domination"

    def __init__(self, pairs=((0.4, 0.6), (0.25, 0.75)), ts=None):
        super().__init__()
        self.pairs = tuple(tuple(p) for p in pairs)
        self.ts = None if ts is None else tuple(ts)
        self.acc = None

    def _observe(self, record):
        if self.acc is None:
            if self.ts is None:
                self.ts = tuple(np.linspace(0, record.config.horizon, 21)[1:])
            self.ts = tuple(_grid_times(record.config, self.ts))
            self.acc = Accumulator((len(self.pairs), len(self.ts)))
        tau = np.array([fc.meeting_time(record, u, v) for u, v in self.pairs])
        self.acc.add((tau[:, None] >= np.array(self.ts)[None, :]).astype(float))

    def results(self):
        out = []
        p, se = self.acc.mean, self.acc.se
        for a, (u, v) in enumerate(self.pairs):
            bound = hitting_survival(v - u, self.ts)
            slack = p[a] - (bound + 3 * se[a])
            worst = int(np.argmax(slack))
            passed = bool(np.all(slack <= 0))
            out.append(
                self._result(
                    f"{self.name}[u={u:g},v={v:g}]", p[a, worst], se[a, worst], float(bound[worst]),
                    "bound-with-slack", passed, t=list(self.ts), survival=p[a], bound=bound, worst_t=self.ts[worst],
                )
            )
        return out


class ZeroCovariation(Check):
    """Realized covariation of two probe paths vanishes before they meet."""

    name = "c5_zero_covariation"

    def __init__(self, pairs=((0.25, 0.75),), t=0.1):
        super().__init__()
        self.pairs = tuple(tuple(p) for p in pairs)
        self.t = t
        self.acc = Accumulator((3, len(self.pairs)))

    def _observe(self, record):
        if record.config.record_stride != 1:
            raise ValueError("c5_zero_covariation needs record_stride=1")
        self.t = _grid_times(record.config, [self.t])[0]
        j = record.time_index(self.t)
        dt = record.config.dt
        pre, post, scaled = [], [], []
        for u, v in self.pairs:
            yu, _ = record.probe_path(u)
            yv, _ = record.probe_path(v)
            du, dv = np.diff(yu[: j + 1]), np.diff(yv[: j + 1])
            apart = yu[1 : j + 1] != yv[1 : j + 1]
            together = yu[: j] == yv[: j]
            c = float(np.sum(du[apart] * dv[apart]))
            pre.append(c)
            scaled.append(abs(c) / math.sqrt(dt * self.t))
            post.append(float(np.sum(du[together] * dv[together]) - np.sum(du[together] ** 2)))
        self.acc.add([pre, scaled, post])

    def results(self):
        m, se = self.acc.mean, self.acc.se
        return [
            self._result(
                f"{self.name}[u={u:g},v={v:g},t={self.t:g}]", m[0, a], se[0, a], 0.0, "mean-within-3SE",
                mean_abs_over_sqrt_dt_t=m[1, a], post_meeting_cov_minus_qv=m[2, a],
            )
            for a, (u, v) in enumerate(self.pairs)
        ]


class QvIdentity(Check):
    """Realized QV of a probe path against ``int_0^t ds / m(u, s)``."""

    name = "qv_identity"

    def __init__(self, us=(0.5,), t=0.5, tolerance=0.05, endpoint="right"):
        super().__init__()
        self.us = tuple(us)
        self.t = t
        self.tolerance = tolerance
        self.endpoint = endpoint
        self.acc = Accumulator((2, len(self.us)))

    def _observe(self, record):
        if record.config.record_stride != 1:
            raise ValueError("qv_identity needs record_stride=1")
        self.t = _grid_times(record.config, [self.t])[0]
        j = record.time_index(self.t)
        rel, signed = [], []
        for u in self.us:
            y, _ = record.probe_path(u)
            rq = fc.realized_qv(y)[j]
            q = fc.inverse_mass_integral(record, u, self.endpoint)[j]
            rel.append(abs(rq - q) / q)
            signed.append((rq - q) / q)
        self.acc.add([rel, signed])

    def results(self):
        m, se = self.acc.mean, self.acc.se
        return [
            self._result(
                f"{self.name}[u={u:g},t={self.t:g}]", m[0, a], se[0, a], [0.0, self.tolerance], "pathwise-tolerance",
                mean_signed_error=m[1, a], endpoint=self.endpoint,
            )
            for a, u in enumerate(self.us)
        ]


class ItoFormula(Check):
    """Ito residual: identically zero for linear functions, zero mean otherwise."""

    name = "ito_residual"

    def __init__(self, functions=None, t=0.5, linear_tolerance=1e-10):
        super().__init__()
        self.functions = functions or {"x^2": fc.square(), "sin": fc.sine()}
        self.linear = fc.linear(2.0, -1.0)
        self.t = t
        self.linear_tolerance = linear_tolerance
        self.acc = Accumulator((2, len(self.functions)))
        self.worst_linear = 0.0

    def _observe(self, record):
        self.t = _grid_times(record.config, [self.t])[0]
        res = [fc.ito_residual(record, phi, self.t) for phi in self.functions.values()]
        self.acc.add([res, np.abs(res)])
        self.worst_linear = max(self.worst_linear, abs(fc.ito_residual(record, self.linear, self.t)))

    def results(self):
        m, se = self.acc.mean, self.acc.se
        out = [
            self._result(f"{self.name}.linear[t={self.t:g}]", self.worst_linear, 0.0, [0.0, self.linear_tolerance],
                         "pathwise-tolerance")
        ]
        for a, name in enumerate(self.functions):
            out.append(
                self._result(f"{self.name}[{name},t={self.t:g}]", m[0, a], se[0, a], 0.0, "mean-within-3SE",
                             mean_abs=m[1, a], mean_abs_se=se[1, a])
            )
        return out


class IntegralQv(Check):
    """Realized QV of the stochastic-integral path against ``int int phi^2 du ds``."""

    name = "integral_qv"

    def __init__(self, phi=None, t=0.5, tolerance=0.10):
        super().__init__()
        self.phi = phi or fc.sine()
        self.t = t
        self.tolerance = tolerance
        self.acc = Accumulator(2)

    def _observe(self, record):
        self.t = _grid_times(record.config, [self.t])[0]
        j = record.time_index(self.t)
        rq = fc.realized_qv(fc.stochastic_integral_path(record, self.phi))[j]
        q = fc.stochastic_integral_qv(record, self.phi)[j]
        self.acc.add([abs(rq - q) / q, (rq - q) / q])

    def results(self):
        m, se = self.acc.mean, self.acc.se
        return [
            self._result(f"{self.name}[{self.phi.name},t={self.t:g}]", m[0], se[0], [0.0, self.tolerance],
                         "pathwise-tolerance", mean_signed_error=m[1])
        ]


class TanakaDuality(Check):
    """``2 int f(a) L(a,t) da`` against the occupation integral of ``f``, on every path.

    The estimate is the worst per-path relative error; the mean error is
    reported in the detail.
    """

    name = "tanaka_duality"

    def __init__(self, f=None, t=0.5, a_step=1e-3, tolerance=0.05):
        super().__init__()
        self.f = f or fc.bump(0.5, 0.5)
        self.t = t
        self.a_step = a_step
        self.tolerance = tolerance
        self.acc = Accumulator(2)
        self.worst = 0.0
        self.exceed = 0

    def _observe(self, record):
        self.t = _grid_times(record.config, [self.t])[0]
        rel, signed = duality_error(record, self.f, self.t, self.a_step)
        self.worst = max(self.worst, rel)
        self.exceed += rel > self.tolerance
        self.acc.add([rel, signed])

    def results(self):
        m, se = self.acc.mean, self.acc.se
        return [
            self._result(f"{self.name}[{self.f.name},t={self.t:g}]", self.worst, 0.0, [0.0, self.tolerance],
                         "pathwise-tolerance", mean_error=m[0], mean_error_se=se[0], mean_signed_error=m[1],
                         paths_over_tolerance=self.exceed)
        ]


def duality_grid(record: TrajectoryRecord, t: float, a_step: float) -> np.ndarray:
    """Level grid covering ``[0, 1]`` and every position visited up to ``t``, padded by 1/2."""
    j = record.time_index(t)
    end = record.offsets[j + 1]
    lo = math.floor(min(record.positions[:end].min(), 0.0)) - 0.5
    hi = math.ceil(max(record.positions[:end].max(), 1.0)) + 0.5
    return np.arange(lo, hi + a_step / 2, a_step)


def duality_error(record: TrajectoryRecord, f, t: float, a_step: float = 1e-3) -> tuple[float, float]:
    """Relative error ``|2 int f L da - occ| / occ`` and its signed version on one path."""
    a = duality_grid(record, t, a_step)
    lhs = 2.0 * fc.local_time_tanaka(record, a, t).integrate(f)[0]
    occ = fc.occupation_integral(record, f, t)
    return abs(lhs - occ) / occ, (lhs - occ) / occ


CHECKS = {
    cls.name: cls
    for cls in (
        MartingaleMean, SecondMomentGrowth, ClusterCountScaling, InverseMassTail, EtaWiener,
        MeetingDomination, ZeroCovariation, QvIdentity, ItoFormula, IntegralQv, TanakaDuality,
    )
}


def _drive(check: Check, ensemble: Iterable[TrajectoryRecord]) -> list[CheckResult]:
    for record in ensemble:
        check.observe(record)
    return check.results()


def check_martingale_mean(ensemble, us=(0.25, 0.5, 0.75), ts=(0.1, 0.5, 1.0)):
    return _drive(MartingaleMean(us, ts), ensemble)


def check_second_moment_growth(ensemble, us=(0.5,), ts=None, **kw):
    return _drive(SecondMomentGrowth(us, ts, **kw), ensemble)


def check_cluster_count_scaling(ensemble, ts=None, **kw):
    return _drive(ClusterCountScaling(ts, **kw), ensemble)


def check_inverse_mass_tail(ensemble, u=0.5, ts=(0.01, 0.04), rs=(2, 5, 10, 20), **kw):
    return _drive(InverseMassTail(u, ts, rs, **kw), ensemble)


def check_eta_wiener(ensemble, **kw):
    return _drive(EtaWiener(**kw), ensemble)


def check_meeting_domination(ensemble, pairs=((0.4, 0.6), (0.25, 0.75)), ts=None):
    return _drive(MeetingDomination(pairs, ts), ensemble)


def check_c5_zero_covariation(ensemble, pairs=((0.25, 0.75),), t=0.1):
    return _drive(ZeroCovariation(pairs, t), ensemble)


def run_checks(
    config: SimConfig,
    checks: Sequence[Check],
    dynamics: Dynamics = Dynamics(),
    threads: int = 1,
) -> VerificationReport:
    """Stream one ensemble through all ``checks``."""

    def feed(record):
        for c in checks:
            c.observe(record)

    run_ensemble(config, dynamics, threads=threads, consumer=feed)
    report = VerificationReport(convention=dynamics.tag)
    for c in checks:
        report.add(*c.results())
    return report


def stability_in_n(
    samples: dict[int, np.ndarray] | None = None,
    *,
    config: SimConfig | None = None,
    ns: Sequence[int] = (250, 500, 1000, 2000),
    u: float = 0.5,
    dynamics: Dynamics = Dynamics(),
) -> CheckResult:
    """Two-sample KS comparison of the laws of ``y(u, T)`` at consecutive ``n``.

    Each consecutive distance after the first must either be smaller than
    the previous one or be within noise (two-sample p-value at least 1%). The estimate is
    the smallest p-value among distances that did not decrease (``1`` if
    they all did), so the verdict follows from the ``ks-level`` rule.
    Supply either precomputed ``samples`` keyed by ``n`` or a base
    ``config``.
    """
    t0 = time.perf_counter()
    if samples is None:
        if config is None:
            raise ValueError("need samples or config")
        samples = {}
        for n in ns:
            vals = []
            cfg = config.replace(n=n, u_probes=(u,))
            run_ensemble(cfg, dynamics, consumer=lambda r: vals.append(r.probe_path(u)[0][-1]))
            samples[n] = np.array(vals)
    keys = sorted(samples)
    dist, pvals = [], []
    for a, b in zip(keys, keys[1:]):
        res = stats.ks_2samp(samples[a], samples[b])
        dist.append(float(res.statistic))
        pvals.append(float(res.pvalue))
    # the first distance has no predecessor; it is judged alone only when it is the only one
    grew = [len(dist) == 1] + [b >= a for a, b in zip(dist, dist[1:])]
    watched = [p for p, g in zip(pvals, grew) if g]
    estimate = min(watched) if watched else 1.0
    means = {int(k): float(np.mean(v)) for k, v in samples.items()}
    ses = {int(k): float(np.std(v, ddof=1) / math.sqrt(len(v))) for k, v in samples.items()}
    return CheckResult(
        name="stability_in_n",
        estimate=estimate,
        se=0.0,
        target=KS_LEVEL,
        rule="ks-level",
        passed=decide("ks-level", estimate, 0.0, KS_LEVEL),
        replicas=min(len(v) for v in samples.values()),
        runtime=time.perf_counter() - t0,
        detail=dict(n=keys, ks_distance=dist, p_value=pvals, mean=means, se=ses, u=u),
    )


STRIDE_ONE = ("eta_wiener", "c5_zero_covariation", "qv_identity", "ito_residual", "integral_qv", "tanaka_duality")


def default_checks(names: Sequence[str], config: SimConfig) -> list[Check]:
    """Checks named in ``names`` (or ``["all"]``) with probes scaled to ``config``.

    Times are fractions of the horizon so that every probe is on the
    recorded grid. Raises ``ValueError`` for unknown names or a record
    stride the check cannot use.
    """
    names = list(CHECKS) if list(names) == ["all"] else list(names)
    unknown = [x for x in names if x not in CHECKS]
    if unknown:
        raise ValueError(f"unknown check(s) {', '.join(unknown)}; valid: all, {', '.join(CHECKS)}")
    if config.record_stride != 1:
        bad = [x for x in names if x in STRIDE_ONE]
        if bad:
            raise ValueError(f"record_stride: {', '.join(bad)} need record_stride=1")
    T = config.horizon
    h = config.dt * config.record_stride
    us = config.u_probes or (0.5,)
    inner = tuple(u for u in us if 0 < u < 1) or (0.5,)
    t_lo = max(T / 100, h)
    grid = tuple(np.geomspace(t_lo, T, 9)) if T / t_lo >= 10**1.5 else tuple(np.geomspace(T / 10**1.5, T, 9))
    pairs = tuple((u, v) for u, v in zip(us, us[1:]) if probe_index(u, config.n) != probe_index(v, config.n))
    pairs = pairs or ((0.25, 0.75),)
    build = {
        "martingale_mean": lambda: MartingaleMean(us, (T / 10, T / 2, T)),
        "second_moment_growth": lambda: SecondMomentGrowth(inner, grid),
        "cluster_count_scaling": lambda: ClusterCountScaling(grid),
        "inverse_mass_tail": lambda: InverseMassTail(0.5, (T / 4, T), tuple(r for r in (2, 5, 10, 20) if r <= config.n) or (2,)),
        "eta_wiener": lambda: EtaWiener(),
        "meeting_domination": lambda: MeetingDomination(pairs),
        "c5_zero_covariation": lambda: ZeroCovariation(pairs, T / 2),
        "qv_identity": lambda: QvIdentity(inner, T / 2),
        "ito_residual": lambda: ItoFormula(t=T / 2),
        "integral_qv": lambda: IntegralQv(t=T / 2),
        "tanaka_duality": lambda: TanakaDuality(t=T / 2),
    }
    return [build[x]() for x in names]
