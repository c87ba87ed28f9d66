"""Compiled inner loop of :func:`massflow.engine.run_replica`.

The kernel advances one replica until it finishes or runs out of a
resource, and reports which one through its return code so that the
Python driver can refill buffers and call again. Variates are consumed
strictly in order, so the trajectory does not depend on buffer sizes.
"""

import math

import numpy as np
from numba import njit

DONE = 0
NEED_NORMALS = 1
NEED_UNIFORMS = 2
NEED_RECORD_ROWS = 3
NEED_RECORD_ENTRIES = 4

# exp(-50) < 2e-22: such pairs are never tested and consume no uniform
BRIDGE_CUTOFF = 50.0

# layout of the int64 state vector
NCL, STEP, NREC, NENT, NEV, ZP, UP = range(7)


@njit(cache=True, nogil=True)
def _merge(a, b, x0, x1, lo, hi, midpoint, t, ev_f, ev_i, st, n, bridge):
    ca = hi[a] - lo[a] + 1.0
    cb = hi[b] - lo[b] + 1.0
    if midpoint:
        x1[a] = 0.5 * (x1[a] + x1[b])
        x0[a] = 0.5 * (x0[a] + x0[b])
    else:
        x1[a] = (ca * x1[a] + cb * x1[b]) / (ca + cb)
        x0[a] = (ca * x0[a] + cb * x0[b]) / (ca + cb)
    e = st[NEV]
    ev_f[e, 0] = t
    ev_f[e, 1] = (hi[b] - lo[a] + 1.0) / n
    ev_i[e, 0] = lo[a]
    ev_i[e, 1] = lo[b]
    ev_i[e, 2] = lo[a]
    ev_i[e, 3] = hi[b]
    ev_i[e, 4] = bridge
    st[NEV] = e + 1
    hi[a] = hi[b]


@njit(cache=True, nogil=True)
def advance(
    x, lo, hi, st, n, nsteps, dt, last_dt, horizon, stride,
    bridge, midpoint, drift, noise,
    z, u, x0, x1,
    rec_t, rec_off, rec_x, rec_lo, rec_hi,
    ev_f, ev_i,
):
    while st[STEP] < nsteps:
        step = st[STEP]
        ncl = st[NCL]
        last = step == nsteps - 1
        h = last_dt if last else dt
        t_end = horizon if last else (step + 1) * dt
        record = last or (step + 1) % stride == 0

        if z.shape[0] - st[ZP] < ncl:
            return NEED_NORMALS
        if bridge and u.shape[0] - st[UP] < ncl:
            return NEED_UNIFORMS
        if record:
            if st[NREC] + 1 > rec_t.shape[0]:
                return NEED_RECORD_ROWS
            if st[NENT] + ncl > rec_x.shape[0]:
                return NEED_RECORD_ENTRIES

        zp = st[ZP]
        for c in range(ncl):
            m = (hi[c] - lo[c] + 1.0) / n
            x0[c] = x[c]
            x1[c] = x[c] + drift * h + noise * math.sqrt(h / m) * z[zp + c]
        st[ZP] = zp + ncl

        # crossing merges; the stack top is k
        k = -1
        for c in range(ncl):
            k += 1
            x0[k] = x0[c]
            x1[k] = x1[c]
            lo[k] = lo[c]
            hi[k] = hi[c]
            while k >= 1 and x1[k - 1] >= x1[k]:
                _merge(k - 1, k, x0, x1, lo, hi, midpoint, t_end, ev_f, ev_i, st, n, 0)
                k -= 1
        ncl = k + 1

        if bridge and noise != 0.0:
            k = -1
            for c in range(ncl):
                k += 1
                x0[k] = x0[c]
                x1[k] = x1[c]
                lo[k] = lo[c]
                hi[k] = hi[c]
                if k >= 1:
                    g0 = x0[k] - x0[k - 1]
                    g1 = x1[k] - x1[k - 1]
                    ml = (hi[k - 1] - lo[k - 1] + 1.0) / n
                    mr = (hi[k] - lo[k] + 1.0) / n
                    rate = (1.0 / ml + 1.0 / mr) * noise * noise
                    hit = False
                    if g0 <= 0.0:
                        hit = True
                    else:
                        arg = 2.0 * g0 * g1 / (rate * h)
                        if arg < BRIDGE_CUTOFF:
                            up = st[UP]
                            st[UP] = up + 1
                            hit = u[up] < math.exp(-arg)
                    if hit:
                        _merge(k - 1, k, x0, x1, lo, hi, midpoint, t_end, ev_f, ev_i, st, n, 1)
                        k -= 1
                        # rounding of the average can re-create a tie on the left
                        while k >= 1 and x1[k - 1] >= x1[k]:
                            _merge(k - 1, k, x0, x1, lo, hi, midpoint, t_end, ev_f, ev_i, st, n, 0)
                            k -= 1
            ncl = k + 1

        for c in range(ncl):
            x[c] = x1[c]
        st[NCL] = ncl
        st[STEP] = step + 1

        if record:
            r = st[NREC]
            e = st[NENT]
            rec_t[r] = t_end
            for c in range(ncl):
                rec_x[e + c] = x[c]
                rec_lo[e + c] = lo[c]
                rec_hi[e + c] = hi[c]
            st[NENT] = e + ncl
            rec_off[r + 1] = e + ncl
            st[NREC] = r + 1
    return DONE


def warmup():
    """Trigger compilation on a tiny input."""
    n = 2
    x = np.array([0.5, 1.0])
    lo = np.array([1, 2], dtype=np.int64)
    hi = lo.copy()
    st = np.zeros(7, dtype=np.int64)
    st[NCL] = 2
    rec_t = np.zeros(4)
    rec_off = np.zeros(5, dtype=np.int64)
    advance(
        x, lo, hi, st, n, 2, 0.1, 0.1, 0.2, 1, True, False, 0.0, 1.0,
        np.zeros(8), np.ones(8), np.empty(2), np.empty(2),
        rec_t, rec_off, np.empty(8), np.empty(8, dtype=np.int64), np.empty(8, dtype=np.int64),
        np.empty((1, 2)), np.empty((1, 5), dtype=np.int64),
    )
