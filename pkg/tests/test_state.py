import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from massflow import (
    CheckResult,
    ClusterState,
    FlowState,
    SimConfig,
    StateCorruption,
    VerificationReport,
    init_uniform,
    locate_cluster,
    probe_index,
    run_replica,
)


@pytest.mark.parametrize("u, n, k", [(0.5, 4, 3), (1.0, 4, 4), (0.0, 7, 1), (0.2499, 4, 1), (0.25, 4, 2)])
def test_probe_index(u, n, k):
    assert probe_index(u, n) == k


@pytest.mark.parametrize("u", [-0.01, 1.01, math.nan])
def test_probe_index_rejects_out_of_range(u):
    with pytest.raises(ValueError):
        probe_index(u, 4)


@given(st.floats(0, 1), st.integers(1, 10_000))
def test_probe_index_cell(u, n):
    k = probe_index(u, n)
    assert 1 <= k <= n
    if u < 1:
        assert (k - 1) / n <= u * (1 + 1e-15) and u < k / n * (1 + 1e-15)


def test_config_validation_names_field():
    with pytest.raises(ValueError, match="^dt"):
        SimConfig(n=4, horizon=0.1, dt=0.1)
    with pytest.raises(ValueError, match="^n"):
        SimConfig(n=0, horizon=1.0, dt=0.1)
    with pytest.raises(ValueError, match="^u_probes"):
        SimConfig(n=4, horizon=1.0, dt=0.1, u_probes=(0.5, 0.2))
    with pytest.raises(ValueError, match="^scheme"):
        SimConfig(n=4, horizon=1.0, dt=0.1, scheme="exact")
    with pytest.raises(ValueError, match="^master_seed"):
        SimConfig(n=4, horizon=1.0, dt=0.1, master_seed=2**64)


def test_config_steps_and_last_step():
    c = SimConfig(n=4, horizon=1.0, dt=0.3)
    assert c.n_steps == 4
    assert c.last_dt == pytest.approx(0.1)
    assert SimConfig(n=4, horizon=0.1, dt=1e-4).n_steps == 1000


def test_config_replace_roundtrip():
    c = SimConfig(n=10, horizon=1.0, dt=0.01, master_seed=5)
    assert SimConfig(**c.to_dict()) == c
    assert c.replace(n=20).n == 20


def test_cluster_mass_is_exact():
    c = ClusterState(0.3, 2, 5, 10)
    assert c.mass == 0.4
    with pytest.raises(StateCorruption):
        ClusterState(0.3, 5, 2, 10)


def test_flowstate_invariants():
    with pytest.raises(StateCorruption, match="strictly"):
        FlowState(0.0, [ClusterState(0.5, 1, 1, 2), ClusterState(0.5, 2, 2, 2)])
    with pytest.raises(StateCorruption, match="adjacent"):
        FlowState(0.0, [ClusterState(0.1, 1, 1, 3), ClusterState(0.5, 3, 3, 3)])
    with pytest.raises(StateCorruption, match="cover"):
        FlowState(0.0, [ClusterState(0.1, 1, 1, 3), ClusterState(0.5, 2, 2, 3)])


def test_locate_cluster_examples():
    s = init_uniform(5)
    assert locate_cluster(s, 3).position == 3 / 5
    full = FlowState(1.0, [ClusterState(0.7, 1, 5, 5)])
    assert all(locate_cluster(full, k).hi == 5 for k in range(1, 6))
    two = FlowState(0.5, [ClusterState(0.1, 1, 2, 5), ClusterState(0.6, 3, 5, 5)])
    assert locate_cluster(two, 4) is two.clusters[1]
    with pytest.raises(ValueError):
        locate_cluster(two, 6)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 60), st.integers(0, 2**32), st.sampled_from(["grid-crossing", "bridge-corrected"]))
def test_record_invariants(n, seed, scheme):
    cfg = SimConfig(n=n, horizon=0.2, dt=0.01, master_seed=seed, scheme=scheme, u_probes=(0.0, 0.3, 0.7, 1.0))
    rec = run_replica(cfg)
    rec.check()
    # cluster count nonincreasing, events are exactly the decrements
    assert (np.diff(rec.counts) <= 0).all()
    assert len(rec.events) == n - rec.counts[-1] <= n - 1
    paths = [rec.probe_path(u) for u in cfg.u_probes]
    ys = np.array([p[0] for p in paths])
    ms = np.array([p[1] for p in paths])
    # order preservation and mass monotonicity
    assert (np.diff(ys, axis=0) >= 0).all()
    assert (np.diff(ms, axis=1) >= 0).all()
    # once merged, always merged
    together = ys[1:] == ys[:-1]
    assert (np.diff(together.astype(int), axis=1) >= 0).all()


def test_record_state_at_and_events():
    cfg = SimConfig(n=30, horizon=0.5, dt=0.01, master_seed=3)
    rec = run_replica(cfg)
    s = rec.state_at(len(rec.times) - 1)
    assert len(s) == rec.counts[-1]
    assert s.time == 0.5
    evs = rec.event_list()
    assert all(e.merged_mass == (e.hi - e.lo + 1) / 30 for e in evs)
    assert all(e.left_id == e.lo for e in evs)
    with pytest.raises(ValueError):
        rec.time_index(0.005)


def test_check_result_json_and_status():
    r = CheckResult("x", np.float64(0.5), 0.1, [0.0, 1.0], "pathwise-tolerance", True, replicas=3, runtime=1.5)
    d = r.to_dict()
    assert d["pass"] is True and "runtime" not in d
    assert r.to_dict(timing=True)["runtime"] == 1.5
    assert CheckResult("y", math.nan, 0, 0, "mean-within-3SE", None).to_dict()["estimate"] is None
    rep = VerificationReport()
    rep.add(r, CheckResult("y", 1.0, 0.0, 0.0, "mean-within-3SE", None))
    assert rep.passed and rep.results[1].status == "inconclusive"
    rep.add(CheckResult("z", 1.0, 0.0, 0.0, "mean-within-3SE", False))
    assert not rep.passed and [f.name for f in rep.failures()] == ["z"]
    assert "inconclusive" in rep.table()
