"""Watch n particles coalesce into a few heavy clusters.

Run with ``python demos/01_coalescence.py``. Each particle starts at k/n
with mass 1/n and diffuses with variance rate 1/mass, so light clusters
move fast and heavy ones slowly; touching clusters merge at their centre
of mass.
"""

import numpy as np

from massflow import SimConfig, eta_path, run_replica

cfg = SimConfig(n=1000, horizon=1.0, dt=1e-5, record_stride=10, master_seed=1, u_probes=(0.25, 0.5, 0.75))
rec = run_replica(cfg)

print(f"{cfg.n} particles, {len(rec.events)} merges by t={cfg.horizon:g}")
print(f"{'t':>6} {'clusters':>9} {'heaviest':>9}")
for t in (0.0, 1e-4, 1e-3, 1e-2, 0.1, 1.0):
    i = rec.time_index(t)
    masses = rec.masses[rec.offsets[i]:rec.offsets[i + 1]]
    print(f"{t:6g} {rec.counts[i]:9d} {masses.max():9.3f}")

# The centre of mass never feels a merge: it moves like one Brownian motion.
eta = eta_path(rec)
print(f"\ncentre of mass: start {eta[0]:.4f}, end {eta[-1]:.4f}")

# Individual labels ride along with whichever cluster swallowed them.
for u in cfg.u_probes:
    y, m = rec.probe_path(u)
    print(f"label u={u:g}: position {y[-1]:+.4f}, cluster mass {m[-1]:.3f}")

sizes = np.sort(rec.masses[rec.offsets[-2]:])[::-1]
print("\nfinal masses:", np.round(sizes, 3))
