import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from massflow import SimConfig, eta_path, run_ensemble, run_replica
from massflow import calculus as fc


@pytest.fixture(scope="module")
def record():
    return run_replica(SimConfig(n=200, horizon=0.5, dt=1e-3, master_seed=17))


@pytest.fixture(scope="module")
def strided():
    return run_replica(SimConfig(n=50, horizon=0.5, dt=1e-3, record_stride=10, master_seed=1))


@pytest.mark.parametrize("phi", [fc.square(), fc.sine(), fc.linear(2.0, -1.0), fc.constant(3.0)])
def test_test_function_self_check(phi):
    assert phi.self_check()


def test_self_check_catches_wrong_derivative():
    wrong = fc.TestFunction(np.sin, np.sin, np.cos)
    assert not wrong.self_check()


def test_missing_derivative_is_rejected(record):
    with pytest.raises(ValueError, match="derivative"):
        fc.ito_residual(record, fc.bump(), 0.5)


def test_indicator_is_strict():
    ind = fc.indicator_above(0.5)
    np.testing.assert_array_equal(ind([0.4, 0.5, 0.6]), [0.0, 0.0, 1.0])


def test_mass_at(record):
    assert fc.mass_at(record, 0.3, 0.0) == 1 / 200
    _, m = record.probe_path(0.3)
    assert fc.mass_at(record, 0.3, 0.5) == m[-1]
    with pytest.raises(ValueError):
        fc.mass_at(record, 0.3, 0.0005)
    full = run_replica(SimConfig(n=3, horizon=5.0, dt=0.01, master_seed=2))
    assert full.counts[-1] == 1
    assert fc.mass_at(full, 0.9, 5.0) == 1.0


def test_realized_qv_examples():
    np.testing.assert_array_equal(fc.realized_qv([1.0, 1.0, 1.0]), [0, 0, 0])
    np.testing.assert_allclose(fc.realized_qv([0.0, 0.1, 0.0]), [0.0, 0.01, 0.02])
    with pytest.raises(ValueError):
        fc.realized_qv([1.0])


def test_stride_is_enforced(strided):
    for fn in (
        lambda r: fc.stochastic_integral(r, fc.sine(), 0.5),
        lambda r: fc.occupation_integral(r, fc.sine(), 0.5),
        lambda r: fc.local_time_tanaka(r, [0.0, 1.0], 0.5),
    ):
        with pytest.raises(ValueError, match="record_stride"):
            fn(strided)


def test_integral_of_zero_and_one(record):
    assert fc.stochastic_integral(record, fc.constant(0.0), 0.5) == 0.0
    eta = eta_path(record)
    np.testing.assert_allclose(fc.stochastic_integral_path(record, fc.constant(1.0)), eta - eta[0], atol=1e-13)


@settings(max_examples=20, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3))
def test_linearity_in_test_function(a, b):
    rec = _shared()
    phi, psi = fc.sine(), fc.square()
    mix = fc.TestFunction(lambda x: a * np.sin(x) + b * x * x)
    for fn in (fc.stochastic_integral_path, fc.occupation_integral):
        lhs = fn(rec, mix)
        rhs = a * fn(rec, phi) + b * fn(rec, psi)
        np.testing.assert_allclose(lhs, rhs, rtol=1e-12, atol=1e-11)


_SHARED = {}


def _shared():
    if "rec" not in _SHARED:
        _SHARED["rec"] = run_replica(SimConfig(n=100, horizon=0.3, dt=1e-3, master_seed=23))
    return _SHARED["rec"]


@settings(max_examples=30, deadline=None)
@given(st.floats(-5, 5), st.floats(-5, 5), st.integers(0, 1000))
def test_ito_exact_for_linear(alpha, beta, seed):
    rec = run_replica(SimConfig(n=40, horizon=0.2, dt=1e-3, master_seed=seed))
    assert abs(fc.ito_residual(rec, fc.linear(alpha, beta), 0.2)) < 1e-12 * (1 + abs(alpha) + abs(beta))


def test_ito_continuum_initial_term(record):
    # the starting grid k/n differs from the continuum by alpha / (2n)
    r = fc.ito_residual(record, fc.linear(1.0, 0.0), 0.5, initial="continuum")
    assert r == pytest.approx(1 / (2 * 200), abs=1e-12)


def test_occupation_forms_agree(record):
    for f in (fc.sine(), fc.bump(), fc.constant(1.0)):
        np.testing.assert_allclose(
            fc.occupation_integral(record, f), fc.occupation_integral(record, f, form="mass"), rtol=1e-12
        )


def test_occupation_of_one_counts_clusters(record):
    path = fc.occupation_integral(record, fc.constant(1.0))
    expected = np.concatenate([[0.0], np.cumsum(record.counts[1:] * np.diff(record.times))])
    np.testing.assert_allclose(path, expected, rtol=1e-13)
    frozen = run_replica(SimConfig(n=3, horizon=0.001, dt=1e-4, master_seed=0))
    assert len(frozen.events) == 0
    assert fc.occupation_integral(frozen, fc.constant(1.0), 0.001) == pytest.approx(3 * 0.001)


def test_inverse_mass_integral_endpoints(record):
    right = fc.inverse_mass_integral(record, 0.5)
    left = fc.inverse_mass_integral(record, 0.5, "left")
    assert right[0] == left[0] == 0.0
    assert right[-1] <= left[-1]
    assert left[1] == pytest.approx(200 * 1e-3)


def test_local_time_vanishes_outside_range(record):
    lo = min(record.positions.min(), 0.0)
    hi = max(record.positions.max(), 1.0)
    a = np.array([lo - 1.0, lo - 0.01, hi + 0.01, hi + 2.0])
    prof = fc.local_time_tanaka(record, a, [0.25, 0.5])
    np.testing.assert_allclose(prof.values, 0.0, atol=1e-12)


def test_local_time_nonnegative(record):
    a = np.linspace(-1, 2, 301)
    prof = fc.local_time_tanaka(record, a, 0.5)
    assert prof.values.min() > -0.02 * prof.values.max()


def test_local_time_continuum_initial_term():
    a = np.array([-0.5, 0.0, 0.3, 1.0, 1.5])
    np.testing.assert_allclose(fc._continuum_plus_part(a), [1.0, 0.5, 0.245, 0.0, 0.0])


def test_local_time_strict_indicator():
    # a level exactly at a starting position belongs to the zero side
    rec = run_replica(SimConfig(n=4, horizon=0.02, dt=0.01, master_seed=3))
    a = np.array([0.5])
    s = fc._steps(rec)
    first = s.sid == 0
    expected_ind = np.sum((s.m * s.dx)[first][s.x[first] > 0.5])
    one = fc.local_time_tanaka(rec, a, 0.01).values[0, 0]
    sl = slice(rec.offsets[1], rec.offsets[2])
    plus = lambda x, w: np.sum(w * np.maximum(x - 0.5, 0))
    direct = plus(rec.positions[sl], rec.masses[sl]) - plus(rec.positions[:4], rec.masses[:4]) - expected_ind
    assert one == pytest.approx(direct, abs=1e-15)


def test_duality_on_one_path():
    rec = run_replica(SimConfig(n=300, horizon=0.3, dt=1e-4, master_seed=5))
    f = fc.bump(0.5, 0.5)
    a = np.arange(-3, 4, 1e-3)
    lhs = 2 * fc.local_time_tanaka(rec, a, 0.3).integrate(f)[0]
    occ = fc.occupation_integral(rec, f, 0.3)
    assert lhs == pytest.approx(occ, rel=0.1)


def test_qv_identity_on_probe():
    cfg = SimConfig(n=200, horizon=0.2, dt=1e-4, replicas=40, master_seed=2)
    errs = []
    for rec in run_ensemble(cfg):
        y, _ = rec.probe_path(0.5)
        q = fc.inverse_mass_integral(rec, 0.5)[-1]
        errs.append(abs(fc.realized_qv(y)[-1] - q) / q)
    assert np.mean(errs) < 0.05


def test_meeting_time():
    rec = run_replica(SimConfig(n=20, horizon=1.0, dt=1e-3, master_seed=4))
    assert fc.meeting_time(rec, 0.3, 0.3) == 0.0
    assert fc.meeting_time(rec, 0.30, 0.34) == 0.0  # same starting cell
    t = fc.meeting_time(rec, 0.1, 0.9)
    y1, _ = rec.probe_path(0.1)
    y2, _ = rec.probe_path(0.9)
    same = np.flatnonzero(y1 == y2)
    if same.size:
        assert t == rec.times[same[0]]
    else:
        assert t == math.inf


def test_cluster_count(record):
    assert fc.cluster_count(record, 0.0) == 200
    counts = [fc.cluster_count(record, t) for t in record.times[::50]]
    assert all(b <= a for a, b in zip(counts, counts[1:]))
