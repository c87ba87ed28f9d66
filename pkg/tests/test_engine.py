import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from massflow import (
    ClusterState,
    Dynamics,
    EnsembleError,
    FlowState,
    RngStream,
    SimConfig,
    bridge_merge_prob,
    diffuse,
    eta_path,
    init_uniform,
    merge_pass,
    run_ensemble,
    run_replica,
    step,
)
from massflow import engine


def test_init_uniform():
    s = init_uniform(4)
    np.testing.assert_array_equal(s.positions, [0.25, 0.5, 0.75, 1.0])
    np.testing.assert_array_equal(s.masses, [0.25] * 4)
    assert init_uniform(1).positions.tolist() == [1.0]
    assert init_uniform(2).positions.tolist() == [0.5, 1.0]
    with pytest.raises(ValueError):
        init_uniform(0)


def test_rng_stream_reproducible_and_distinct():
    a, b, c = RngStream(7, 0), RngStream(7, 0), RngStream(7, 1)
    za = a.normals(1000)
    np.testing.assert_array_equal(za, b.normals(1000))
    zc = c.normals(1000)
    assert not np.array_equal(za, zc)
    assert abs(np.corrcoef(za, zc)[0, 1]) < 4 / math.sqrt(1000)


def test_rng_blocks_concatenate():
    a, b = RngStream(3, 2), RngStream(3, 2)
    np.testing.assert_array_equal(np.concatenate([a.normals(5), a.normals(7)]), b.normals(12))
    np.testing.assert_array_equal(np.concatenate([a.uniforms(3), [a.uniform()]]), b.uniforms(4))


@pytest.mark.parametrize("mass_count, n, std", [(4, 4, 0.1), (1, 4, 0.2)])
def test_diffuse_std(mass_count, n, std):
    if mass_count == n:
        state = FlowState(0.0, [ClusterState(0.0, 1, n, n)])
    else:
        state = FlowState(0.0, [ClusterState(-1.0, 1, 1, n), ClusterState(1.0, 2, n, n)])
    rng = RngStream(11)
    d = np.array([diffuse(state, 0.01, rng)[0] - state.positions[0] for _ in range(20000)])
    assert d.std(ddof=1) == pytest.approx(std, rel=0.03)


def test_diffuse_mean_zero():
    state = init_uniform(10)
    rng = RngStream(5)
    d = (np.array([diffuse(state, 0.01, rng) for _ in range(10_000)]) - state.positions).ravel()
    assert abs(d.mean()) <= 3 * d.std(ddof=1) / math.sqrt(d.size)


def test_merge_pass_examples():
    s, ev = merge_pass([0.3, 0.2], [0.5, 0.5], [[1, 1], [2, 2]])
    assert len(s) == 1 and s.positions[0] == pytest.approx(0.25) and s.masses[0] == 1.0
    assert len(ev) == 1

    third = [1 / 3] * 3
    iv = [[1, 1], [2, 2], [3, 3]]
    s, ev = merge_pass([0.1, 0.3, 0.29], third, iv)
    np.testing.assert_allclose(s.positions, [0.1, 0.295])

    s, ev = merge_pass([0.5, 0.4, 0.42], third, iv)
    assert s.positions[0] == pytest.approx(0.44) and s.masses[0] == 1.0
    assert [e.merged_mass for e in ev] == [pytest.approx(2 / 3), 1.0]


def test_merge_pass_touch_counts():
    s, ev = merge_pass([0.2, 0.2], [0.5, 0.5], [[1, 1], [2, 2]])
    assert len(s) == 1


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-2, 2, allow_nan=False), min_size=1, max_size=40))
def test_merge_pass_restores_order_and_centre(xs):
    n = len(xs)
    s, ev = merge_pass(xs, [1 / n] * n, [[k, k] for k in range(1, n + 1)])
    assert (np.diff(s.positions) > 0).all()
    assert len(ev) == n - len(s)
    assert np.dot(s.masses, s.positions) == pytest.approx(np.mean(xs), abs=1e-12)


def test_bridge_prob_limits():
    assert bridge_merge_prob(0.1, 0.1, 2, 0.01) == pytest.approx(math.exp(-1))
    assert bridge_merge_prob(1e-12, 0.1, 2, 0.01) == pytest.approx(1.0, abs=1e-9)
    assert bridge_merge_prob(1, 1, 2, 0.01) < 1e-40
    for bad in [(0, 0.1, 1, 1), (0.1, -1, 1, 1), (0.1, 0.1, 0, 1), (0.1, 0.1, 1, 0)]:
        with pytest.raises(ValueError):
            bridge_merge_prob(*bad)


@pytest.mark.parametrize("g0, g1, rate, h", [(0.1, 0.1, 2, 0.01), (0.2, 0.3, 2, 0.02), (0.05, 0.3, 1, 0.03)])
def test_bridge_prob_matches_reflection_density_ratio(g0, g1, rate, h):
    # P(hit | end at g1) = density of the reflected path over that of the free path
    sd = math.sqrt(rate * h)
    ratio = stats.norm.pdf(g1 + g0, scale=sd) / stats.norm.pdf(g1 - g0, scale=sd)
    assert bridge_merge_prob(g0, g1, rate, h) == pytest.approx(ratio, rel=1e-12)


def test_step_single_cluster():
    s = FlowState(0.0, [ClusterState(0.3, 1, 3, 3)])
    out, ev = step(s, 0.01, RngStream(1))
    assert ev == [] and len(out) == 1 and out.time == 0.01


def test_step_zero_noise_is_identity():
    s = init_uniform(8)
    out, ev = step(s, 0.01, RngStream(1), dynamics=Dynamics(noise=0.0))
    np.testing.assert_array_equal(out.positions, s.positions)
    assert ev == []


@pytest.mark.parametrize("scheme", ["grid-crossing", "bridge-corrected"])
@pytest.mark.parametrize("dyn", [Dynamics(), Dynamics(merge_rule="midpoint"), Dynamics(drift=0.3)])
def test_python_step_matches_kernel(scheme, dyn):
    cfg = SimConfig(n=40, horizon=0.25, dt=0.01, scheme=scheme, master_seed=9, replicas=1)
    rec = run_replica(cfg, 4, dyn)
    rng = RngStream(9, 4)
    s = init_uniform(40)
    events = []
    for i in range(cfg.n_steps):
        h = cfg.last_dt if i == cfg.n_steps - 1 else cfg.dt
        s, ev = step(s, h, rng, scheme, dyn)
        events += ev
        sl = slice(rec.offsets[i + 1], rec.offsets[i + 2])
        np.testing.assert_array_equal(s.positions, rec.positions[sl])
        np.testing.assert_array_equal(s.intervals[:, 0], rec.lo[sl])
    assert [(e.lo, e.hi, e.via_bridge) for e in events] == [
        (int(e["lo"]), int(e["hi"]), bool(e["via_bridge"])) for e in rec.events
    ]


def test_run_replica_deterministic():
    cfg = SimConfig(n=50, horizon=0.3, dt=0.001, master_seed=2)
    a, b = run_replica(cfg, 1), run_replica(cfg, 1)
    for name in ("times", "offsets", "positions", "lo", "hi", "events"):
        assert getattr(a, name).tobytes() == getattr(b, name).tobytes()
    assert a.times[-1] == 0.3


def test_run_replica_truncates_last_step():
    rec = run_replica(SimConfig(n=3, horizon=0.25, dt=0.1, record_stride=2))
    np.testing.assert_allclose(rec.times, [0.0, 0.2, 0.25])


def test_singleton_is_brownian():
    rec = run_replica(SimConfig(n=1, horizon=1.0, dt=1e-4, master_seed=4))
    y, m = rec.probe_path(0.5)
    d = np.diff(y)
    assert np.sum(d * d) == pytest.approx(1.0, rel=0.05)
    assert stats.kstest(d / math.sqrt(1e-4), "norm").pvalue > 0.01
    assert (m == 1.0).all()


def test_gap_increments_before_merging():
    s = FlowState(0.0, [ClusterState(0.0, 1, 1, 4), ClusterState(10.0, 2, 4, 4)])
    rng = RngStream(8)
    d = np.array([np.diff(diffuse(s, 0.01, rng))[0] - 10.0 for _ in range(40000)])
    target = (1 / 0.25 + 1 / 0.75) * 0.01
    assert d.var(ddof=1) == pytest.approx(target, rel=4 * math.sqrt(2 / d.size))
    assert abs(d.mean()) < 4 * math.sqrt(target / d.size)


@pytest.mark.parametrize("scheme, slack", [("bridge-corrected", 0.0), ("grid-crossing", 0.05)])
def test_two_particle_gap_survival(scheme, slack):
    # gap of two singletons of mass 1/2 is a rate-4 Brownian motion from 1/2
    cfg = SimConfig(n=2, horizon=0.05, dt=1e-3, scheme=scheme, replicas=4000, master_seed=6)
    alive = np.array([r.counts[-1] == 2 for r in run_ensemble(cfg)], dtype=float)
    oracle = 2 * stats.norm.cdf(0.5 / math.sqrt(4 * 0.05)) - 1
    se = math.sqrt(oracle * (1 - oracle) / cfg.replicas)
    assert alive.mean() - oracle <= 3 * se + slack
    assert alive.mean() - oracle >= -3 * se


def test_bridge_and_grid_merge_times_converge():
    def first_merge(dt, scheme):
        cfg = SimConfig(n=2, horizon=0.2, dt=dt, scheme=scheme, replicas=1500, master_seed=12)
        return np.array([r.events["time"][0] if len(r.events) else 1.0 for r in run_ensemble(cfg)])

    gaps = [
        stats.ks_2samp(first_merge(dt, "bridge-corrected"), first_merge(dt, "grid-crossing")).statistic
        for dt in (8e-3, 2e-3, 5e-4)
    ]
    assert gaps[0] > gaps[1] > gaps[2]


def test_ensemble_matches_replicas_and_threads():
    cfg = SimConfig(n=30, horizon=0.1, dt=0.001, replicas=6, master_seed=1)
    serial = run_ensemble(cfg)
    threaded = run_ensemble(cfg, threads=3)
    single = run_replica(cfg.replace(replicas=1), 0)
    assert serial[0].positions.tobytes() == single.positions.tobytes()
    for a, b in zip(serial, threaded):
        assert a.replica_index == b.replica_index
        assert a.positions.tobytes() == b.positions.tobytes()
    seen = []
    assert run_ensemble(cfg, consumer=lambda r: seen.append(r.replica_index), threads=2) is None
    assert seen == list(range(6))


def test_ensemble_reports_failing_replica(monkeypatch):
    real = engine.run_replica

    def flaky(config, i, dynamics):
        if i == 2:
            raise RuntimeError("boom")
        return real(config, i, dynamics)

    monkeypatch.setattr(engine, "run_replica", flaky)
    with pytest.raises(EnsembleError) as info:
        run_ensemble(SimConfig(n=4, horizon=0.1, dt=0.01, replicas=4))
    assert info.value.replica_index == 2


def test_ensemble_mean_of_probe():
    cfg = SimConfig(n=100, horizon=0.5, dt=1e-3, replicas=100, master_seed=21)
    y = np.array([r.probe_path(0.5)[0][-1] for r in run_ensemble(cfg)])
    assert abs(y.mean() - 0.5) <= 3 * y.std(ddof=1) / math.sqrt(len(y))


def test_eta_path():
    rec = run_replica(SimConfig(n=4, horizon=0.1, dt=0.01, master_seed=1))
    eta = eta_path(rec)
    assert eta[0] == pytest.approx(0.625)
    rec = run_replica(SimConfig(n=500, horizon=1.0, dt=1e-4, master_seed=3))
    d = np.diff(eta_path(rec))
    assert np.sum(d * d) == pytest.approx(1.0, rel=0.05)
    assert stats.kstest(d / math.sqrt(1e-4), "norm").pvalue > 0.01


def test_weighted_merge_conserves_centre_exactly_in_law():
    # centre of mass moves by sum m Z sqrt(dt/m): merges never add a jump
    rec = run_replica(SimConfig(n=200, horizon=0.2, dt=1e-3, master_seed=8))
    eta = eta_path(rec)
    rng = RngStream(8)
    z = rng.normals(10**6)
    counts = rec.counts[:-1]
    used = np.concatenate([[0], np.cumsum(counts)])
    expected = [
        np.sum(np.sqrt(rec.masses[rec.offsets[i]:rec.offsets[i + 1]] * 1e-3) * z[used[i]:used[i + 1]])
        for i in range(len(counts))
    ]
    np.testing.assert_allclose(np.diff(eta), expected, atol=1e-12)
