# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled inner loops for the cylindrical transform and feature pooling.

All functions release the GIL so callers may fan poles out over threads.
"""

from libc.string cimport memset
from libc.stdlib cimport malloc, free
from libc.math cimport isfinite

cimport numpy as cnp
import numpy as np

cnp.import_array()

NAME = "cython"

ctypedef fused voxel_t:
    cnp.uint8_t
    cnp.int16_t
    cnp.float32_t


cdef inline void _slots(Py_ssize_t z, Py_ssize_t delta_s, Py_ssize_t n_slices,
                        Py_ssize_t S, Py_ssize_t* out) noexcept nogil:
    cdef Py_ssize_t half = (n_slices - 1) // 2
    cdef Py_ssize_t k, zz
    for k in range(n_slices):
        zz = z + (k - half) * delta_s
        out[k] = zz if 0 <= zz < S else -1


def slot_slices(Py_ssize_t z, Py_ssize_t delta_s, Py_ssize_t n_slices, Py_ssize_t S):
    cdef cnp.ndarray[cnp.int64_t, ndim=1] out = np.empty(n_slices, dtype=np.int64)
    cdef Py_ssize_t k
    cdef Py_ssize_t half = (n_slices - 1) // 2
    for k in range(n_slices):
        zz = z + (k - half) * delta_s
        out[k] = zz if 0 <= zz < S else -1
    return out


cdef inline bint _inside(Py_ssize_t u, Py_ssize_t v, Py_ssize_t H, Py_ssize_t W,
                         const cnp.int32_t[:, ::1] tx, const cnp.int32_t[:, ::1] ty,
                         Py_ssize_t m, Py_ssize_t r) noexcept nogil:
    cdef Py_ssize_t row = u + tx[m, r], col = v + ty[m, r]
    return 0 <= row < H and 0 <= col < W


cdef void _ray_limits(Py_ssize_t u, Py_ssize_t v, Py_ssize_t H, Py_ssize_t W,
                      const cnp.int32_t[:, ::1] tx, const cnp.int32_t[:, ::1] ty,
                      Py_ssize_t* lim) noexcept nogil:
    # Number of in-bounds radii per ray, by bisection; valid only for tables
    # whose offsets are monotone along every ray (in-bounds radii form a prefix).
    cdef Py_ssize_t M = tx.shape[0], N = tx.shape[1]
    cdef Py_ssize_t m, lo, hi, mid
    for m in range(M):
        if not _inside(u, v, H, W, tx, ty, m, 0):
            lim[m] = 0
            continue
        lo = 1
        hi = N
        while lo < hi:
            mid = (lo + hi) // 2
            if _inside(u, v, H, W, tx, ty, m, mid):
                lo = mid + 1
            else:
                hi = mid
        lim[m] = lo


cdef void _ray_offsets(Py_ssize_t u, Py_ssize_t v, Py_ssize_t H, Py_ssize_t W,
                       const cnp.int32_t[:, ::1] tx, const cnp.int32_t[:, ::1] ty,
                       bint prefix, Py_ssize_t* off, Py_ssize_t* lim) noexcept nogil:
    # Flat in-slice offset of each (ray, radius) sample, -1 when outside, and
    # lim[m] = number of radii to visit on ray m. With prefix set the samples
    # to visit are exactly r < lim[m] and every one of them is inside.
    cdef Py_ssize_t M = tx.shape[0], N = tx.shape[1]
    cdef Py_ssize_t m, r, row, col
    if prefix:
        _ray_limits(u, v, H, W, tx, ty, lim)
        for m in range(M):
            for r in range(lim[m]):
                off[m * N + r] = (u + tx[m, r]) * W + v + ty[m, r]
        return
    for m in range(M):
        lim[m] = N
        for r in range(N):
            row = u + tx[m, r]
            col = v + ty[m, r]
            if 0 <= row < H and 0 <= col < W:
                off[m * N + r] = row * W + col
            else:
                off[m * N + r] = -1


def transform_into(const voxel_t[:, :, ::1] data, Py_ssize_t u, Py_ssize_t v,
                   const cnp.int64_t[::1] slots,
                   const cnp.int32_t[:, ::1] tx, const cnp.int32_t[:, ::1] ty,
                   voxel_t[:, ::1] out, bint prefix=False):
    cdef Py_ssize_t M = tx.shape[0], N = tx.shape[1]
    cdef Py_ssize_t H = data.shape[1], W = data.shape[2]
    cdef Py_ssize_t n_slots = slots.shape[0]
    cdef Py_ssize_t k, m, r, z, o
    cdef const voxel_t* sl
    cdef Py_ssize_t[::1] off = np.empty(M * N, dtype=np.intp)
    cdef Py_ssize_t[::1] lim = np.empty(M, dtype=np.intp)
    with nogil:
        memset(&out[0, 0], 0, n_slots * M * N * sizeof(voxel_t))
        _ray_offsets(u, v, H, W, tx, ty, prefix, &off[0], &lim[0])
        for k in range(n_slots):
            z = slots[k]
            if z < 0:
                continue
            sl = &data[z, 0, 0]
            for m in range(M):
                for r in range(lim[m]):
                    o = off[m * N + r]
                    if o >= 0:
                        out[k * M + m, r] = sl[o]


def pool_into(const voxel_t[:, ::1] img, const cnp.int64_t[::1] row_win,
              const cnp.int64_t[::1] col_win, const double[:, ::1] counts,
              double[::1] out):
    cdef Py_ssize_t R = img.shape[0], C = img.shape[1]
    cdef Py_ssize_t pc = counts.shape[1]
    cdef Py_ssize_t D = counts.shape[0] * pc
    cdef Py_ssize_t i, j, base, w
    with nogil:
        for w in range(D):
            out[w] = 0.0
        for i in range(R):
            base = row_win[i] * pc
            for j in range(C):
                out[base + col_win[j]] += <double>img[i, j]
        for w in range(D):
            out[w] = out[w] / counts[w // pc, w % pc]


def features_batch(const voxel_t[:, :, ::1] data, const cnp.int64_t[:, ::1] poles,
                   Py_ssize_t delta_s, Py_ssize_t n_slices,
                   const cnp.int32_t[:, ::1] tx, const cnp.int32_t[:, ::1] ty,
                   const cnp.int64_t[::1] row_win, const cnp.int64_t[::1] col_win,
                   const double[:, ::1] counts, double[:, ::1] out, bint prefix=False):
    """Fused transform + pooling for many poles without materialising images.

    Integer volumes are summed exactly in int64. Float volumes are summed in
    double in the same row-major order as ``pool_into``; skipped pixels are
    exactly zero. Either way the result is bit-identical to pooling the
    materialised transform image.
    """
    cdef Py_ssize_t M = tx.shape[0], N = tx.shape[1]
    cdef Py_ssize_t S = data.shape[0], H = data.shape[1], W = data.shape[2]
    cdef Py_ssize_t pc = counts.shape[1]
    cdef Py_ssize_t D = counts.shape[0] * pc
    cdef Py_ssize_t P = poles.shape[0]
    cdef Py_ssize_t i, k, m, r, z, o, base, w, n, stop, pbase
    cdef cnp.int64_t run
    cdef const voxel_t* sl
    cdef const Py_ssize_t* offm
    cdef double* acc
    cdef cnp.int64_t[::1] iacc_buf = np.zeros(D, dtype=np.int64)
    cdef cnp.int64_t* iacc = &iacc_buf[0]
    cdef Py_ssize_t[::1] slots = np.empty(n_slices, dtype=np.intp)
    cdef Py_ssize_t[::1] off = np.empty(M * N, dtype=np.intp)
    cdef Py_ssize_t[::1] lim = np.empty(M, dtype=np.intp)
    cdef Py_ssize_t[::1] col_end = np.zeros(pc, dtype=np.intp)
    for r in range(N):
        col_end[col_win[r]] = r + 1
    if prefix:
        # pole-independent part of the flat offset; the pole adds u * W + v
        for m in range(M):
            for r in range(N):
                off[m * N + r] = tx[m, r] * W + ty[m, r]
    with nogil:
        for i in range(P):
            _slots(poles[i, 2], delta_s, n_slices, S, &slots[0])
            if prefix:
                _ray_limits(poles[i, 0], poles[i, 1], H, W, tx, ty, &lim[0])
                pbase = poles[i, 0] * W + poles[i, 1]
            else:
                _ray_offsets(poles[i, 0], poles[i, 1], H, W, tx, ty, False, &off[0], &lim[0])
                pbase = 0
            acc = &out[i, 0]
            for w in range(D):
                acc[w] = 0.0
                iacc[w] = 0
            for k in range(n_slices):
                z = slots[k]
                if z < 0:
                    continue
                sl = &data[z, 0, 0] + pbase
                for m in range(M):
                    base = row_win[k * M + m] * pc
                    offm = &off[m * N]
                    n = lim[m]
                    if voxel_t is cnp.float32_t and prefix:
                        for r in range(n):
                            acc[base + col_win[r]] += <double>sl[offm[r]]
                    elif voxel_t is cnp.float32_t:
                        for r in range(n):
                            o = offm[r]
                            if o >= 0:
                                acc[base + col_win[r]] += <double>sl[o]
                    elif prefix:
                        # windows are contiguous runs of r; sum each run in a register
                        r = 0
                        while r < n:
                            w = col_win[r]
                            stop = col_end[w] if col_end[w] < n else n
                            run = 0
                            while r < stop:
                                run = run + sl[offm[r]]
                                r += 1
                            iacc[base + w] += run
                    else:
                        for r in range(n):
                            o = offm[r]
                            if o >= 0:
                                iacc[base + col_win[r]] += sl[o]
            for w in range(D):
                if voxel_t is not cnp.float32_t:
                    acc[w] = <double>iacc[w]
                acc[w] = acc[w] / counts[w // pc, w % pc]


def linear_into(const double[:, ::1] X, const double[:, ::1] W, const double[::1] b,
                double[:, ::1] out):
    """``out = X @ W.T + b`` with a fixed summation order per entry (four
    interleaved partial sums), so a row's result does not depend on the rest
    of the batch."""
    cdef Py_ssize_t P = X.shape[0], C = W.shape[0], D = W.shape[1]
    cdef Py_ssize_t i, c, d, D4 = D - D % 4
    cdef double s0, s1, s2, s3
    cdef const double* x
    cdef const double* w
    with nogil:
        for i in range(P):
            x = &X[i, 0]
            for c in range(C):
                w = &W[c, 0]
                s0 = s1 = s2 = s3 = 0.0
                for d in range(0, D4, 4):
                    s0 = s0 + x[d] * w[d]
                    s1 = s1 + x[d + 1] * w[d + 1]
                    s2 = s2 + x[d + 2] * w[d + 2]
                    s3 = s3 + x[d + 3] * w[d + 3]
                for d in range(D4, D):
                    s0 = s0 + x[d] * w[d]
                out[i, c] = ((s0 + s1) + (s2 + s3)) + b[c]


def standard_linear_into(const double[:, ::1] X, const double[::1] mean, const double[::1] std,
                         const double[:, ::1] W, const double[::1] b, double[:, ::1] out):
    """``linear_into((X - mean) / std, W, b, out)`` without the temporary.

    Returns False if any standardised feature is not finite."""
    cdef Py_ssize_t P = X.shape[0], C = W.shape[0], D = W.shape[1]
    cdef Py_ssize_t i, c, d, D4 = D - D % 4
    cdef double s0, s1, s2, s3
    cdef double* z = <double*> malloc(max(D, 1) * sizeof(double))
    cdef const double* w
    cdef bint ok = True
    if z == NULL:
        raise MemoryError()
    try:
        with nogil:
            for i in range(P):
                for d in range(D):
                    z[d] = (X[i, d] - mean[d]) / std[d]
                    if not isfinite(z[d]):
                        ok = False
                for c in range(C):
                    w = &W[c, 0]
                    s0 = s1 = s2 = s3 = 0.0
                    for d in range(0, D4, 4):
                        s0 = s0 + z[d] * w[d]
                        s1 = s1 + z[d + 1] * w[d + 1]
                        s2 = s2 + z[d + 2] * w[d + 2]
                        s3 = s3 + z[d + 3] * w[d + 3]
                    for d in range(D4, D):
                        s0 = s0 + z[d] * w[d]
                    out[i, c] = ((s0 + s1) + (s2 + s3)) + b[c]
    finally:
        free(z)
    return ok
