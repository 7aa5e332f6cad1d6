"""Whole-volume inference: every (strided) voxel is a pole."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

from ._backend import kernels
from .classifier import Model, volume_features
from .transform import TransformConfig, build_offset_table, shared_offset_table
from .volume import LabelVolume, Volume, VolumeError


@dataclass(frozen=True)
class InferenceConfig:
    stride_xy: int = 1
    stride_z: int = 1
    roi: Optional[Tuple[int, int, int, int, int, int]] = None  # m0, m1, n0, n1, s0, s1
    emit_scores: bool = False

    def __post_init__(self):
        if self.stride_xy < 1 or self.stride_z < 1:
            raise ValueError("strides must be >= 1")

    def box(self, dims) -> Tuple[int, int, int, int, int, int]:
        S, M, N = dims
        if self.roi is None:
            return 0, M, 0, N, 0, S
        m0, m1, n0, n1, s0, s1 = self.roi
        if not (0 <= m0 < m1 <= M and 0 <= n0 < n1 <= N and 0 <= s0 < s1 <= S):
            raise VolumeError(f"roi {self.roi} outside volume of dims (S,M,N)={dims}")
        return m0, m1, n0, n1, s0, s1


@dataclass(eq=False)
class Segmentation:
    labels: LabelVolume
    scores: Optional[List[Volume]]
    n_visited: int


def lattice(dims, cfg: InferenceConfig):
    """Visited row, column and slice coordinates."""
    m0, m1, n0, n1, s0, s1 = cfg.box(dims)
    return (np.arange(m0, m1, cfg.stride_xy), np.arange(n0, n1, cfg.stride_xy),
            np.arange(s0, s1, cfg.stride_z))


def lattice_poles(rows, cols, slices) -> np.ndarray:
    """``(u, v, z)`` rows in slice-major, row-major order."""
    z, u, v = np.meshgrid(slices, rows, cols, indexing="ij")
    return np.stack([u.ravel(), v.ravel(), z.ravel()], axis=1).astype(np.int64)


def _nearest(coord_lo, coord_hi, stride, n_visited):
    # nearest lattice index per coordinate; halfway ties go to the lower index
    x = np.arange(coord_hi - coord_lo)
    return np.minimum((x + (stride - 1) // 2) // stride, n_visited - 1)


def _check_model(vol: Volume, model: Model, cfg_t: TransformConfig):
    _, M, N = vol.dims
    shape = (cfg_t.n_slices * M, N)
    if model.image_shape is not None and tuple(model.image_shape) != shape:
        raise VolumeError(
            f"model trained on {tuple(model.image_shape)} images; this volume gives {shape}"
        )
    model.feature_cfg.windows(*shape)


def segment_volume(
    vol: Volume,
    model: Model,
    cfg_t: TransformConfig,
    cfg_i: InferenceConfig = InferenceConfig(),
    *,
    threads: int = 1,
    class_map=None,
) -> Segmentation:
    _check_model(vol, model, cfg_t)
    rows, cols, slices = lattice(vol.dims, cfg_i)
    poles = lattice_poles(rows, cols, slices)
    feats = volume_features(vol, poles, cfg_t, model.feature_cfg, threads=threads)
    probs = model.predict_proba(feats)
    visited = np.argmax(probs, axis=1).astype(np.uint8)

    m0, m1, n0, n1, s0, s1 = cfg_i.box(vol.dims)
    km = _nearest(m0, m1, cfg_i.stride_xy, rows.size)
    kn = _nearest(n0, n1, cfg_i.stride_xy, cols.size)
    ks = _nearest(s0, s1, cfg_i.stride_z, slices.size)
    grid = np.ix_(ks, km, kn)
    shape = (slices.size, rows.size, cols.size)

    mask = np.zeros(vol.dims, dtype=np.uint8)
    mask[s0:s1, m0:m1, n0:n1] = visited.reshape(shape)[grid]
    C = model.n_classes
    labels = LabelVolume(mask, class_map or {c: str(c) for c in range(C)}, n_classes=C)

    scores = None
    if cfg_i.emit_scores:
        scores = []
        for c in range(C):
            vol_c = np.zeros(vol.dims, dtype=np.float32)
            vol_c[s0:s1, m0:m1, n0:n1] = probs[:, c].astype(np.float32).reshape(shape)[grid]
            scores.append(Volume(vol_c))
    return Segmentation(labels, scores, int(poles.shape[0]))


def _rebuild_features(vol, poles, cfg_t, fcfg):
    """Same kernel as the shared path, but with a fresh offset table per pole."""
    _, M, N = vol.dims
    row_win, col_win, counts = fcfg.windows(cfg_t.n_slices * M, N)
    out = np.empty((poles.shape[0], fcfg.dim))
    for i in range(poles.shape[0]):
        table = build_offset_table(M, N)
        kernels.features_batch(
            vol.data, poles[i:i + 1], cfg_t.delta_s, cfg_t.n_slices, table.dx, table.dy,
            row_win, col_win, counts, out[i:i + 1], table.monotone,
        )
    return out


def throughput_report(
    vol: Volume,
    model: Model,
    cfg_t: TransformConfig,
    cfg_i: InferenceConfig = InferenceConfig(),
    *,
    threads: int = 1,
    rebuild_limit: Optional[int] = None,
) -> dict:
    """Time shared-table inference against rebuilding the table per pole.

    ``rebuild_limit`` times the per-pole path on the first poles only and
    compares per-pole rates.
    """
    _check_model(vol, model, cfg_t)
    poles = lattice_poles(*lattice(vol.dims, cfg_i))
    n = int(poles.shape[0])

    t0 = time.perf_counter()
    shared_offset_table.cache_clear()
    feats = volume_features(vol, poles, cfg_t, model.feature_cfg, threads=threads)
    shared_labels = np.argmax(model.predict_proba(feats), axis=1)
    t_shared = time.perf_counter() - t0

    sub = poles if rebuild_limit is None else poles[:rebuild_limit]
    t0 = time.perf_counter()
    feats_r = _rebuild_features(vol, sub, cfg_t, model.feature_cfg)
    rebuild_labels = np.argmax(model.predict_proba(feats_r), axis=1)
    t_rebuild = time.perf_counter() - t0

    rate_shared = n / t_shared
    rate_rebuild = sub.shape[0] / t_rebuild
    return {
        "backend": kernels.NAME,
        "dims": list(vol.dims),
        "transform": cfg_t.to_json(),
        "stride_xy": cfg_i.stride_xy,
        "stride_z": cfg_i.stride_z,
        "threads": threads,
        "poles": n,
        "wall_time_s": t_shared,
        "poles_per_s": rate_shared,
        "rebuild_poles": int(sub.shape[0]),
        "rebuild_wall_time_s": t_rebuild,
        "rebuild_poles_per_s": rate_rebuild,
        "speedup": rate_shared / rate_rebuild,
        "labels_agree": bool(np.array_equal(shared_labels[: sub.shape[0]], rebuild_labels)),
    }
