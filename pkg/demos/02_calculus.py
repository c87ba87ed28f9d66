"""Stochastic calculus along one coalescing path.

Run with ``python demos/02_calculus.py``. The label path y(u, t) is a
martingale whose quadratic variation grows like the integral of 1/mass;
an Ito formula holds for the whole flow, and local time integrates back
to the occupation measure.
"""

import numpy as np

from massflow import SimConfig, run_replica
from massflow import calculus as fc

rec = run_replica(SimConfig(n=500, horizon=0.5, dt=1e-4, master_seed=7))

y, _ = rec.probe_path(0.5)
qv = fc.realized_qv(y)[-1]
clock = fc.inverse_mass_integral(rec, 0.5)[-1]
print(f"label 0.5: realized QV {qv:.3f} vs integral of ds/m {clock:.3f}")

for phi in (fc.linear(2.0, -1.0), fc.square(), fc.sine()):
    print(f"Ito residual for {phi.name:>10}: {fc.ito_residual(rec, phi, 0.5):+.2e}")

phi = fc.sine()
path = fc.stochastic_integral_path(rec, phi)
print(f"integral of sin: value {path[-1]:+.4f}, realized QV {fc.realized_qv(path)[-1]:.4f}, "
      f"predicted {fc.stochastic_integral_qv(rec, phi)[-1]:.4f}")

bump = fc.bump(0.5, 0.5)
a = np.arange(-3, 4, 1e-3)
lhs = 2 * fc.local_time_tanaka(rec, a, 0.5).integrate(bump)[0]
rhs = fc.occupation_integral(rec, bump, 0.5)
print(f"2 * int f L da = {lhs:.4f}, occupation integral = {rhs:.4f}")
print(f"labels 0.4 and 0.6 met at t = {fc.meeting_time(rec, 0.4, 0.6):g}")
