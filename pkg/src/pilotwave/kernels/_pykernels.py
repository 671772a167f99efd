"""Vectorized NumPy implementation of the interpolation/trajectory kernels.

Trajectories are advanced in lockstep; every arithmetic operation is
elementwise, so a path's result does not depend on which other paths share
the batch.  Operation order mirrors ``_ckernels.pyx`` line for line.
"""
from itertools import product
from math import ceil

import numpy as np

OK, NODE_ABORT, BOUNDARY_EXIT = 0, 1, 2


class _Layout:
    def __init__(self, fields, lower, dx, shape, periodic):
        self.nframes, self.nfield = fields.shape[0], fields.shape[1]
        self.shape = tuple(int(n) for n in shape)
        self.dim = len(self.shape)
        self.flat = fields.reshape(self.nframes, self.nfield, -1).view(np.float64).reshape(
            self.nframes, self.nfield, -1, 2)
        self.lower = np.asarray(lower, dtype=np.float64)
        self.dx = np.asarray(dx, dtype=np.float64)
        self.periodic = bool(periodic)
        strides = [1] * self.dim
        for k in range(self.dim - 2, -1, -1):
            strides[k] = strides[k + 1] * self.shape[k + 1]
        self.strides = strides
        self.upper = self.lower + self.dx * np.asarray(self.shape)


def _weights(f):
    fm1 = f - 1.0
    fm2 = f - 2.0
    fp1 = f + 1.0
    return (
        -(f * fm1 * fm2) / 6.0,
        (fp1 * fm1 * fm2) / 2.0,
        -(fp1 * f * fm2) / 2.0,
        (fp1 * f * fm1) / 6.0,
    )


def _stencil(lay, q):
    """Per-axis stencil indices and weights for points ``q`` of shape (n, dim)."""
    idx, wts, valid = [], [], []
    for k in range(lay.dim):
        s = (q[:, k] - lay.lower[k]) / lay.dx[k]
        i0 = np.floor(s)
        f = s - i0
        i0 = i0.astype(np.int64)
        w = _weights(f)
        n = lay.shape[k]
        ik, vk = [], []
        for o in range(4):
            i = i0 + (o - 1)
            if lay.periodic:
                ik.append(np.mod(i, n))
                vk.append(None)
            else:
                ok = (i >= 0) & (i < n)
                ik.append(np.where(ok, i, 0))
                vk.append(ok)
        idx.append(ik)
        wts.append(w)
        valid.append(vk)
    return idx, wts, valid


def _spatial(lay, frame, idx, wts, valid, n):
    acc = np.zeros((n, lay.nfield, 2))
    for combo in product(range(4), repeat=lay.dim):
        flat = np.zeros(n, dtype=np.int64)
        w = None
        ok = None
        for k, o in enumerate(combo):
            flat = flat + idx[k][o] * lay.strides[k]
            w = wts[k][o] if w is None else w * wts[k][o]
            if valid[k][o] is not None:
                ok = valid[k][o] if ok is None else ok & valid[k][o]
        if ok is not None:
            w = np.where(ok, w, 0.0)
        vals = lay.flat[frame[:, None], np.arange(lay.nfield)[None, :], flat[:, None]]
        acc = acc + w[:, None, None] * vals
    return acc


def _interp(lay, j, a, q):
    """Interpolated fields (n, nfield, 2) at frame-interval ``j`` fraction ``a``."""
    n = q.shape[0]
    idx, wts, valid = _stencil(lay, q)
    A = _spatial(lay, j, idx, wts, valid, n)
    B = _spatial(lay, j + 1, idx, wts, valid, n)
    a = a[:, None, None]
    return (1.0 - a) * A + a * B


def _frame_index(lay, frame_times, t):
    t0 = frame_times[0]
    span = frame_times[1] - frame_times[0] if lay.nframes > 1 else 1.0
    x = (t - t0) / span
    j = np.clip(np.floor(x).astype(np.int64), 0, max(lay.nframes - 2, 0))
    a = x - j
    return j, a


def interpolate(fields, frame_times, lower, dx, shape, periodic, t, points):
    """Interpolate complex ``fields`` of shape (nframes, nfield, *shape).

    Cubic Lagrange in space, linear in time.  Returns (npoints, nfield) complex.
    Points outside a Dirichlet grid see zero field.
    """
    lay = _Layout(fields, lower, dx, shape, periodic)
    q = np.atleast_2d(np.asarray(points, dtype=np.float64))
    n = q.shape[0]
    if lay.nframes == 1:
        idx, wts, valid = _stencil(lay, q)
        out = _spatial(lay, np.zeros(n, dtype=np.int64), idx, wts, valid, n)
    else:
        j, a = _frame_index(lay, np.asarray(frame_times, dtype=np.float64),
                            np.full(n, float(t)))
        out = _interp(lay, j, a, q)
    return out[..., 0] + 1j * out[..., 1]


def _velocity(lay, hom, j, a, q, eps, cap):
    """Velocity (n, dim), node flag, clamp flag."""
    F = _interp(lay, j, a, q)
    re, im = F[:, 0, 0], F[:, 0, 1]
    den = re * re + im * im
    node = ~(den >= eps)
    v = np.empty_like(q)
    with np.errstate(divide="ignore", invalid="ignore"):
        for k in range(lay.dim):
            num = re * F[:, 1 + k, 1] - im * F[:, 1 + k, 0]
            v[:, k] = hom[k] * num / den
        sp2 = np.zeros(q.shape[0])
        for k in range(lay.dim):
            sp2 = sp2 + v[:, k] * v[:, k]
        speed = np.sqrt(sp2)
        clamp = speed > cap
        scale = np.where(clamp, cap / speed, 1.0)
    v = np.where(clamp[:, None], v * scale[:, None], v)
    v[node] = 0.0
    return v, node, clamp


def _outside(lay, q):
    if lay.periodic:
        return np.zeros(q.shape[0], dtype=bool)
    return np.any((q < lay.lower) | (q >= lay.upper), axis=1)


def _rk4(lay, hom, j, a0, da, h, q, eps, cap, clamps):
    """One RK4 step for all rows.  Returns new q and failure code per row."""
    n = q.shape[0]
    fail = np.zeros(n, dtype=np.int64)
    alive = np.ones(n, dtype=bool)
    half = 0.5 * h
    stages = ((a0, None, 0.0), (a0 + 0.5 * da, 0, half), (a0 + 0.5 * da, 1, half), (a0 + da, 2, h))
    ks = []
    for a, prev, step in stages:
        qs = q if prev is None else q + step * ks[prev]
        out = _outside(lay, qs) & alive
        fail[out] = BOUNDARY_EXIT
        alive &= ~out
        qs = np.where(alive[:, None] & np.isfinite(qs), qs, lay.lower)
        v, node, clamp = _velocity(lay, hom, j, np.broadcast_to(a, (n,)).copy(), qs, eps, cap)
        node &= alive
        fail[node] = NODE_ABORT
        clamps += (clamp & alive).astype(np.int64)
        alive &= ~node
        ks.append(v)
    k1, k2, k3, k4 = ks
    qn = q + (h / 6.0) * (((k1 + 2.0 * k2) + 2.0 * k3) + k4)
    return qn, fail


def _wrap(lay, q, wraps):
    if not lay.periodic:
        return q
    L = lay.upper - lay.lower
    shift = np.floor((q - lay.lower) / L)
    moved = shift != 0.0
    if np.any(moved):
        q = np.where(moved, q - shift * L, q)
        # guard the half-open interval against rounding
        q = np.where(q >= lay.upper, lay.lower, q)
        wraps += np.abs(shift).sum(axis=1).astype(np.int64)
    return q


def integrate_paths(fields, frame_times, lower, dx, shape, periodic, hbar_over_m, q0,
                    substeps, shrink, max_retries, eps_node, speed_cap, n_threads=1):
    """RK4-integrate the guiding equation for every row of ``q0``.

    ``fields[f, 0]`` is psi and ``fields[f, 1 + k]`` its derivative along
    axis ``k`` at frame ``f``.  Positions are recorded at every frame time.
    Returns ``(paths, status, wraps, clamps)``; aborted paths are NaN from
    the first unrecorded frame on.  ``n_threads`` is accepted for interface
    parity and ignored.
    """
    lay = _Layout(fields, lower, dx, shape, periodic)
    hom = np.asarray(hbar_over_m, dtype=np.float64)
    q = np.array(np.atleast_2d(q0), dtype=np.float64)
    n = q.shape[0]
    nf = lay.nframes
    paths = np.full((n, nf, lay.dim), np.nan)
    paths[:, 0] = q
    status = np.zeros(n, dtype=np.int64)
    wraps = np.zeros(n, dtype=np.int64)
    clamps = np.zeros(n, dtype=np.int64)
    span = float(frame_times[1] - frame_times[0]) if nf > 1 else 0.0
    m = int(substeps)
    levels = [int(ceil(shrink ** (-r) - 1e-9)) for r in range(1, max_retries + 1)]
    for j in range(nf - 1):
        rows = np.flatnonzero(status == OK)
        if rows.size == 0:
            break
        for s in range(m):
            qa = q[rows]
            ca = np.zeros(rows.size, dtype=np.int64)
            jj = np.full(rows.size, j, dtype=np.int64)
            qn, fail = _rk4(lay, hom, jj, s / m, 1.0 / m, span / m, qa, eps_node, speed_cap, ca)
            retry = np.flatnonzero(fail == NODE_ABORT)
            if retry.size:
                qn[retry], fail[retry] = _retry(lay, hom, j, s, m, span, qa[retry], eps_node,
                                                speed_cap, ca, retry, levels)
            clamps[rows] += ca
            okm = fail == OK
            w = np.zeros(int(okm.sum()), dtype=np.int64)
            q[rows[okm]] = _wrap(lay, qn[okm], w)
            wraps[rows[okm]] += w
            status[rows[~okm]] = fail[~okm]
            rows = rows[okm]
            if rows.size == 0:
                break
        paths[rows, j + 1] = q[rows]
    return paths, status, wraps, clamps


def _retry(lay, hom, j, s, m, span, q, eps, cap, clamps_all, rows, levels):
    """Re-attempt one substep with successively finer sub-substeps."""
    n = q.shape[0]
    result = q.copy()
    code = np.full(n, NODE_ABORT, dtype=np.int64)
    pending = np.arange(n)
    for M in levels:
        if pending.size == 0:
            break
        qt = q[pending].copy()
        code_t = np.zeros(pending.size, dtype=np.int64)
        sub_clamps = np.zeros(pending.size, dtype=np.int64)
        for p in range(M):
            live = np.flatnonzero(code_t == OK)
            if live.size == 0:
                break
            jj = np.full(live.size, j, dtype=np.int64)
            cl = np.zeros(live.size, dtype=np.int64)
            a0 = (s * M + p) / (m * M)
            qn, fail = _rk4(lay, hom, jj, a0, 1.0 / (m * M), span / (m * M), qt[live], eps, cap, cl)
            sub_clamps[live] += cl
            qt[live] = np.where((fail == OK)[:, None], qn, qt[live])
            code_t[live] = fail
        clamps_all[rows[pending]] += sub_clamps
        done = code_t != NODE_ABORT
        result[pending[done]] = qt[done]
        code[pending[done]] = code_t[done]
        pending = pending[~done]
    return result, code
