"""Pure numpy implementations of the hot loops.

Same signatures and results as the compiled ``_kernels`` module; selected
when the extension is not built or ``CYLSEG_BACKEND=python``.
"""

import numpy as np

NAME = "python"


def slot_slices(z, delta_s, n_slices, S):
    half = (n_slices - 1) // 2
    out = np.arange(-half, half + 1, dtype=np.int64) * delta_s + z
    out[(out < 0) | (out >= S)] = -1
    return out


def transform_into(data, u, v, slots, tx, ty, out, prefix=False):
    """Write the transform image of pole ``(u, v)`` over ``slots`` into ``out``."""
    M, N = tx.shape
    _, H, W = data.shape
    out[...] = 0
    rows = tx + u
    cols = ty + v
    inside = (rows >= 0) & (rows < H) & (cols >= 0) & (cols < W)
    ri, ci = rows[inside], cols[inside]
    for k, z in enumerate(slots):
        if z < 0:
            continue
        block = out[k * M:(k + 1) * M]
        block[inside] = data[z, ri, ci]


def pool_into(img, row_win, col_win, counts, out):
    """Window means of ``img``; windows given as per-row / per-col window ids."""
    pr = counts.shape[0]
    pc = counts.shape[1]
    row_starts = np.flatnonzero(np.r_[True, np.diff(row_win) != 0])
    col_starts = np.flatnonzero(np.r_[True, np.diff(col_win) != 0])
    sums = np.add.reduceat(np.asarray(img, dtype=np.float64), row_starts, axis=0)
    sums = np.add.reduceat(sums, col_starts, axis=1)
    out[:] = (sums / counts).reshape(pr * pc)


def features_batch(data, poles, delta_s, n_slices, tx, ty, row_win, col_win, counts, out,
                   prefix=False):
    M, N = tx.shape
    S = data.shape[0]
    img = np.empty((n_slices * M, N), dtype=data.dtype)
    for i in range(poles.shape[0]):
        u, v, z = (int(x) for x in poles[i])
        transform_into(data, u, v, slot_slices(z, delta_s, n_slices, S), tx, ty, img)
        pool_into(img, row_win, col_win, counts, out[i])


def linear_into(X, W, b, out):
    # per-row reduction; independent of batch composition
    out[...] = (X[:, None, :] * W).sum(axis=-1) + b


def standard_linear_into(X, mean, std, W, b, out):
    Z = (X - mean) / std
    linear_into(Z, W, b, out)
    return bool(np.all(np.isfinite(Z)))
