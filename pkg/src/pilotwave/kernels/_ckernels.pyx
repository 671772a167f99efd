# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled interpolation and trajectory kernels.

Same contract and operation order as ``_pykernels``; paths are integrated
independently (optionally across OpenMP threads), so results do not depend
on the thread count.
"""
import numpy as np
cimport numpy as cnp
from cython.parallel cimport prange
from libc.math cimport floor, sqrt, fabs, NAN

cnp.import_array()

cdef enum:
    MAXDIM = 3
    MAXFIELD = 16

cdef enum:
    OK = 0
    NODE_ABORT = 1
    BOUNDARY_EXIT = 2


cdef struct Layout:
    int nframes
    int nfield
    int dim
    int periodic
    long size
    long shape[MAXDIM]
    long strides[MAXDIM]
    double lower[MAXDIM]
    double dx[MAXDIM]
    double upper[MAXDIM]
    const double* data


cdef Layout _layout(const double[:, :, :, ::1] flat, lower, dx, shape, periodic) except *:
    cdef Layout L
    cdef int k
    L.nframes = flat.shape[0]
    L.nfield = flat.shape[1]
    L.size = flat.shape[2]
    L.dim = len(shape)
    if L.dim > MAXDIM or L.nfield > MAXFIELD:
        raise ValueError("kernel supports at most 3 dimensions and 16 fields")
    L.periodic = 1 if periodic else 0
    for k in range(L.dim):
        L.shape[k] = shape[k]
        L.lower[k] = lower[k]
        L.dx[k] = dx[k]
        L.upper[k] = L.lower[k] + L.dx[k] * <double>L.shape[k]
    L.strides[L.dim - 1] = 1
    for k in range(L.dim - 2, -1, -1):
        L.strides[k] = L.strides[k + 1] * L.shape[k + 1]
    L.data = &flat[0, 0, 0, 0]
    return L


cdef inline void _weights(double f, double* w) noexcept nogil:
    cdef double fm1 = f - 1.0
    cdef double fm2 = f - 2.0
    cdef double fp1 = f + 1.0
    w[0] = -(f * fm1 * fm2) / 6.0
    w[1] = (fp1 * fm1 * fm2) / 2.0
    w[2] = -(fp1 * f * fm2) / 2.0
    w[3] = (fp1 * f * fm1) / 6.0


cdef inline void _stencil(const Layout* L, const double* q, long* idx, double* w, int* valid) noexcept nogil:
    cdef int k, o
    cdef double s, i0d, f
    cdef long i0, i, n
    for k in range(L.dim):
        s = (q[k] - L.lower[k]) / L.dx[k]
        i0d = floor(s)
        f = s - i0d
        i0 = <long>i0d
        _weights(f, &w[4 * k])
        n = L.shape[k]
        for o in range(4):
            i = i0 + (o - 1)
            if L.periodic:
                i = i % n
                if i < 0:
                    i = i + n
                idx[4 * k + o] = i
                valid[4 * k + o] = 1
            else:
                if i >= 0 and i < n:
                    idx[4 * k + o] = i
                    valid[4 * k + o] = 1
                else:
                    idx[4 * k + o] = 0
                    valid[4 * k + o] = 0


cdef inline void _spatial(const Layout* L, long frame, const long* idx, const double* w,
                          const int* valid, double* acc) noexcept nogil:
    cdef int f, k, o, ok
    cdef long c, ncombo = 1, rem, flat, base
    cdef long div
    cdef double wt
    cdef const double* p
    for k in range(L.dim):
        ncombo = ncombo * 4
    for f in range(2 * L.nfield):
        acc[f] = 0.0
    for c in range(ncombo):
        flat = 0
        ok = 1
        wt = 0.0
        div = ncombo
        for k in range(L.dim):
            div = div // 4
            o = <int>((c // div) % 4)
            flat = flat + idx[4 * k + o] * L.strides[k]
            if k == 0:
                wt = w[o]
            else:
                wt = wt * w[4 * k + o]
            ok = ok & valid[4 * k + o]
        if not ok:
            wt = 0.0
        for f in range(L.nfield):
            base = ((frame * L.nfield + f) * L.size + flat) * 2
            p = L.data + base
            acc[2 * f] = acc[2 * f] + wt * p[0]
            acc[2 * f + 1] = acc[2 * f + 1] + wt * p[1]


cdef inline void _interp(const Layout* L, long j, double a, const double* q, double* out) noexcept nogil:
    cdef long idx[4 * MAXDIM]
    cdef double w[4 * MAXDIM]
    cdef int valid[4 * MAXDIM]
    cdef double A[2 * MAXFIELD]
    cdef double B[2 * MAXFIELD]
    cdef int f
    _stencil(L, q, idx, w, valid)
    _spatial(L, j, idx, w, valid, A)
    _spatial(L, j + 1, idx, w, valid, B)
    for f in range(2 * L.nfield):
        out[f] = (1.0 - a) * A[f] + a * B[f]


cdef inline int _velocity(const Layout* L, const double* hom, long j, double a, const double* q,
                          double eps, double cap, double* v, int* clamp) noexcept nogil:
    cdef double F[2 * MAXFIELD]
    cdef double re, im, den, num, sp2, speed, scale
    cdef int k, node
    _interp(L, j, a, q, F)
    re = F[0]
    im = F[1]
    den = re * re + im * im
    node = not (den >= eps)
    for k in range(L.dim):
        num = re * F[2 * (1 + k) + 1] - im * F[2 * (1 + k)]
        v[k] = hom[k] * num / den
    sp2 = 0.0
    for k in range(L.dim):
        sp2 = sp2 + v[k] * v[k]
    speed = sqrt(sp2)
    clamp[0] = speed > cap
    if clamp[0]:
        scale = cap / speed
        for k in range(L.dim):
            v[k] = v[k] * scale
    return node


cdef inline int _outside(const Layout* L, const double* q) noexcept nogil:
    cdef int k
    if L.periodic:
        return 0
    for k in range(L.dim):
        if q[k] < L.lower[k] or q[k] >= L.upper[k]:
            return 1
    return 0


cdef int _rk4(const Layout* L, const double* hom, long j, double a0, double da, double h,
              const double* q, double* qn, double eps, double cap, long* clamps) noexcept nogil:
    cdef double K[4][MAXDIM]
    cdef double qs[MAXDIM]
    cdef double a[4]
    cdef double step[4]
    cdef double half = 0.5 * h
    cdef int st, k, clamp, node
    a[0] = a0
    a[1] = a0 + 0.5 * da
    a[2] = a0 + 0.5 * da
    a[3] = a0 + da
    step[0] = 0.0
    step[1] = half
    step[2] = half
    step[3] = h
    for st in range(4):
        for k in range(L.dim):
            if st == 0:
                qs[k] = q[k]
            else:
                qs[k] = q[k] + step[st] * K[st - 1][k]
        if _outside(L, qs):
            return BOUNDARY_EXIT
        node = _velocity(L, hom, j, a[st], qs, eps, cap, K[st], &clamp)
        if clamp:
            clamps[0] = clamps[0] + 1
        if node:
            return NODE_ABORT
    for k in range(L.dim):
        qn[k] = q[k] + (h / 6.0) * (((K[0][k] + 2.0 * K[1][k]) + 2.0 * K[2][k]) + K[3][k])
    return OK


cdef int _retry(const Layout* L, const double* hom, long j, long s, long m, double span,
                double* q, double eps, double cap, const long* levels, int nlevels,
                long* clamps) noexcept nogil:
    cdef double qt[MAXDIM]
    cdef double qn[MAXDIM]
    cdef int r, k, code
    cdef long M, p
    for r in range(nlevels):
        M = levels[r]
        for k in range(L.dim):
            qt[k] = q[k]
        code = OK
        for p in range(M):
            code = _rk4(L, hom, j, (<double>(s * M + p)) / (<double>(m * M)),
                        1.0 / (<double>(m * M)), span / (<double>(m * M)),
                        qt, qn, eps, cap, clamps)
            if code != OK:
                break
            for k in range(L.dim):
                qt[k] = qn[k]
        if code != NODE_ABORT:
            if code == OK:
                for k in range(L.dim):
                    q[k] = qt[k]
            return code
    return NODE_ABORT


cdef inline void _wrap(const Layout* L, double* q, long* wraps) noexcept nogil:
    cdef int k
    cdef double Lk, shift
    if not L.periodic:
        return
    for k in range(L.dim):
        Lk = L.upper[k] - L.lower[k]
        shift = floor((q[k] - L.lower[k]) / Lk)
        if shift != 0.0:
            q[k] = q[k] - shift * Lk
            if q[k] >= L.upper[k]:
                q[k] = L.lower[k]
            wraps[0] = wraps[0] + <long>fabs(shift)


cdef void _one_path(const Layout* L, const double* hom, double* q, double* path,
                    long* status, long* wraps, long* clamps, long m, double span,
                    const long* levels, int nlevels, double eps, double cap) noexcept nogil:
    cdef long j, s
    cdef int k, code
    cdef double qn[MAXDIM]
    for j in range(L.nframes - 1):
        for s in range(m):
            code = _rk4(L, hom, j, (<double>s) / (<double>m), 1.0 / (<double>m),
                        span / (<double>m), q, qn, eps, cap, clamps)
            if code == NODE_ABORT:
                for k in range(L.dim):
                    qn[k] = q[k]
                code = _retry(L, hom, j, s, m, span, qn, eps, cap, levels, nlevels, clamps)
            if code != OK:
                status[0] = code
                return
            _wrap(L, qn, wraps)
            for k in range(L.dim):
                q[k] = qn[k]
        for k in range(L.dim):
            path[(j + 1) * L.dim + k] = q[k]


def _flat(fields):
    f = np.ascontiguousarray(fields, dtype=np.complex128)
    return f.reshape(f.shape[0], f.shape[1], -1).view(np.float64).reshape(
        f.shape[0], f.shape[1], -1, 2)


def integrate_paths(fields, frame_times, lower, dx, shape, periodic, hbar_over_m, q0,
                    long substeps, double shrink, int max_retries, double eps_node,
                    double speed_cap, int n_threads=1):
    """See ``_pykernels.integrate_paths``."""
    cdef const double[:, :, :, ::1] flat = _flat(fields)
    cdef Layout L = _layout(flat, lower, dx, shape, periodic)
    cdef double[::1] hom = np.ascontiguousarray(hbar_over_m, dtype=np.float64)
    q_arr = np.array(np.atleast_2d(q0), dtype=np.float64, order="C")
    cdef double[:, ::1] q = q_arr
    cdef long n = q.shape[0], i
    cdef int k
    paths_arr = np.full((n, L.nframes, L.dim), np.nan)
    cdef double[:, :, ::1] paths = paths_arr
    status_arr = np.zeros(n, dtype=np.int64)
    wraps_arr = np.zeros(n, dtype=np.int64)
    clamps_arr = np.zeros(n, dtype=np.int64)
    cdef long[::1] status = status_arr
    cdef long[::1] wraps = wraps_arr
    cdef long[::1] clamps = clamps_arr
    levels_arr = np.array([int(np.ceil(shrink ** (-r) - 1e-9)) for r in range(1, max_retries + 1)]
                          + [1], dtype=np.int64)
    cdef long[::1] levels = levels_arr
    cdef double span = float(frame_times[1] - frame_times[0]) if L.nframes > 1 else 0.0
    cdef int nthreads = max(1, n_threads)
    for i in range(n):
        for k in range(L.dim):
            paths[i, 0, k] = q[i, k]
    if n == 0:
        return paths_arr, status_arr, wraps_arr, clamps_arr
    for i in prange(n, nogil=True, num_threads=nthreads, schedule="dynamic"):
        _one_path(&L, &hom[0], &q[i, 0], &paths[i, 0, 0], &status[i], &wraps[i], &clamps[i],
                  substeps, span, &levels[0], max_retries, eps_node, speed_cap)
    return paths_arr, status_arr, wraps_arr, clamps_arr


def interpolate(fields, frame_times, lower, dx, shape, periodic, double t, points):
    """See ``_pykernels.interpolate``."""
    cdef const double[:, :, :, ::1] flat = _flat(fields)
    cdef Layout L = _layout(flat, lower, dx, shape, periodic)
    q_arr = np.array(np.atleast_2d(points), dtype=np.float64, order="C")
    cdef double[:, ::1] q = q_arr
    cdef long n = q.shape[0], i, j = 0
    cdef double a = 0.0, x, span
    cdef long idx[4 * MAXDIM]
    cdef double w[4 * MAXDIM]
    cdef int valid[4 * MAXDIM]
    out_arr = np.empty((n, L.nfield, 2))
    cdef double[:, :, ::1] out = out_arr
    if L.nframes > 1:
        span = frame_times[1] - frame_times[0]
        x = (t - frame_times[0]) / span
        j = <long>floor(x)
        if j < 0:
            j = 0
        if j > L.nframes - 2:
            j = L.nframes - 2
        a = x - j
    for i in range(n):
        if L.nframes == 1:
            _stencil(&L, &q[i, 0], idx, w, valid)
            _spatial(&L, 0, idx, w, valid, &out[i, 0, 0])
        else:
            _interp(&L, j, a, &q[i, 0], &out[i, 0, 0])
    return out_arr[..., 0] + 1j * out_arr[..., 1]
