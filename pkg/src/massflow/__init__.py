"""Simulation and stochastic calculus of a coalescing mass-carrying flow.

``n`` particles start on the grid ``k/n`` with mass ``1/n`` each. Every
cluster diffuses with variance rate ``1 / mass`` and clusters coalesce
irreversibly on contact, adding their masses. The package provides the
ensemble engine, pathwise stochastic-integral and local-time estimators
on recorded trajectories, and statistical checks of the flow's
properties.
"""

from importlib.metadata import PackageNotFoundError, version as _version

from .state import (
    SCHEMES,
    CheckResult,
    ClusterState,
    CoalescenceEvent,
    FlowState,
    SimConfig,
    StateCorruption,
    TrajectoryRecord,
    VerificationReport,
    locate_cluster,
    probe_index,
)
from .engine import (
    CONVENTION,
    Dynamics,
    EnsembleError,
    RngStream,
    bridge_merge_prob,
    diffuse,
    eta_path,
    init_uniform,
    merge_pass,
    run_ensemble,
    run_replica,
    step,
)

try:
    __version__ = _version("artifact")
except PackageNotFoundError:  # running from a source tree
    __version__ = "0.1.0"

__all__ = [
    "SCHEMES",
    "CONVENTION",
    "CheckResult",
    "ClusterState",
    "CoalescenceEvent",
    "Dynamics",
    "EnsembleError",
    "FlowState",
    "RngStream",
    "SimConfig",
    "StateCorruption",
    "TrajectoryRecord",
    "VerificationReport",
    "bridge_merge_prob",
    "diffuse",
    "eta_path",
    "init_uniform",
    "locate_cluster",
    "merge_pass",
    "probe_index",
    "run_ensemble",
    "run_replica",
    "step",
]
