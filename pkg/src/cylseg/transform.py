"""Cylindrical transform of a volume around a pole.

For a pole ``(u, v, z)`` the transform stacks ``n_slices`` polar resamplings,
one per slice ``z + j * delta_s`` (``j`` from ``-(n_slices-1)/2`` up), into an
image of ``n_slices * M`` rows and ``N`` columns.  Row ``k * M + m`` is ray
``m`` at angle ``2*pi*m/M`` of slice slot ``k``; column ``r`` is the radius.
Ray ``m`` at radius ``r`` reads voxel ``(u + x, v + y)`` with
``x = round(r * cos(theta))`` and ``y = round(r * sin(-theta))``.

Samples falling outside the slice, and whole slots whose slice is outside the
volume, stay zero.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from functools import cached_property, lru_cache
from pathlib import Path
from typing import Optional, Tuple

import numpy as np

from ._backend import kernels
from .volume import PathLike, Pole, Volume, VolumeError

INVALID = None

# Offsets whose exact value is a half-integer (e.g. r*cos(pi/3) = r/2) come out
# of float trig a few ulps either side of the tie; anything this close is a tie.
_TIE_TOL = 1e-9


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TransformConfig:
    delta_s: int = 3
    n_slices: int = 5

    def __post_init__(self):
        if int(self.delta_s) != self.delta_s or self.delta_s < 1:
            raise ConfigError(f"delta_s must be a positive integer, got {self.delta_s}")
        if int(self.n_slices) != self.n_slices or self.n_slices < 1 or self.n_slices % 2 == 0:
            raise ConfigError(f"n_slices must be an odd positive integer, got {self.n_slices}")

    @property
    def half(self) -> int:
        return (self.n_slices - 1) // 2

    def to_json(self) -> dict:
        return {"delta_s": self.delta_s, "n_slices": self.n_slices}


RADIAL = TransformConfig(delta_s=1, n_slices=1)


@dataclass(frozen=True)
class SliceSet:
    """Slice index per slot, ascending; ``None`` marks a slot outside the volume."""

    entries: Tuple[Optional[int], ...]

    @property
    def valid(self) -> Tuple[int, ...]:
        return tuple(e for e in self.entries if e is not None)

    def as_array(self) -> np.ndarray:
        return np.array([-1 if e is None else e for e in self.entries], dtype=np.int64)

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)


def slice_set(z: int, cfg: TransformConfig, S: int) -> SliceSet:
    if not 0 <= z < S:
        raise VolumeError(f"slice {z} outside [0, {S})")
    entries = []
    for j in range(-cfg.half, cfg.half + 1):
        zz = z + j * cfg.delta_s
        entries.append(zz if 0 <= zz < S else INVALID)
    return SliceSet(tuple(entries))


def round_half_away(x: np.ndarray) -> np.ndarray:
    """Nearest integer, ties away from zero (near-ties within ``_TIE_TOL``)."""
    a = np.abs(x)
    whole = np.floor(a)
    up = (a - whole) >= 0.5 - _TIE_TOL
    return np.copysign(whole + up, x)


@dataclass(frozen=True, eq=False)
class OffsetTable:
    """Per ray/radius in-plane offsets; depends only on ``(M, N)``."""

    dx: np.ndarray  # int32 (M, N), row offsets
    dy: np.ndarray  # int32 (M, N), column offsets
    _monotone: Optional[bool] = None

    @cached_property
    def monotone(self) -> bool:
        """Offsets start at 0 and never turn back along a ray, so the
        in-bounds samples of each ray form a prefix of its radii."""
        if self._monotone is not None:
            return self._monotone
        ok = True
        for a in (self.dx, self.dy):
            d = np.diff(a, axis=1)
            ok &= bool(np.all((d >= 0).all(axis=1) | (d <= 0).all(axis=1)))
            ok &= bool(np.all(a[:, 0] == 0))
        return ok

    @property
    def M(self) -> int:
        return self.dx.shape[0]

    @property
    def N(self) -> int:
        return self.dx.shape[1]

    def __getitem__(self, key):
        m, r = key
        return int(self.dx[m, r]), int(self.dy[m, r])


def build_offset_table(M: int, N: int) -> OffsetTable:
    if M < 1 or N < 1:
        raise ConfigError(f"offset table needs M, N >= 1, got {M}x{N}")
    theta = 2.0 * np.pi * np.arange(M) / M
    radius = np.arange(N, dtype=np.float64)
    dx = round_half_away(np.cos(theta)[:, None] * radius).astype(np.int32)
    dy = round_half_away(np.sin(-theta)[:, None] * radius).astype(np.int32)
    dx.setflags(write=False)
    dy.setflags(write=False)
    # round(r * c) is monotone in r for fixed c, so every ray is a prefix
    return OffsetTable(dx, dy, _monotone=True)


@lru_cache(maxsize=16)
def shared_offset_table(M: int, N: int) -> OffsetTable:
    """Process-wide cached table; safe to share since tables are read-only."""
    return build_offset_table(M, N)


@dataclass(frozen=True, eq=False)
class TransformImage:
    data: np.ndarray
    pole: Pole
    config: TransformConfig

    @property
    def shape(self) -> Tuple[int, int]:
        return self.data.shape

    def block(self, slot: int) -> np.ndarray:
        M = self.data.shape[0] // self.config.n_slices
        return self.data[slot * M:(slot + 1) * M]


def _check(vol: Volume, pole: Pole, table: OffsetTable) -> None:
    _, M, N = vol.dims
    pole = Pole(*pole)
    pole.check(vol.dims)
    if (table.M, table.N) != (M, N):
        raise VolumeError(f"offset table is {table.M}x{table.N} but slices are {M}x{N}")


def cylindrical_transform(
    vol: Volume,
    pole: Pole,
    cfg: TransformConfig,
    table: Optional[OffsetTable] = None,
    out: Optional[np.ndarray] = None,
) -> TransformImage:
    """Transform image of ``vol`` around ``pole``; dtype follows the volume."""
    S, M, N = vol.dims
    if table is None:
        table = shared_offset_table(M, N)
    _check(vol, pole, table)
    pole = Pole(*pole)
    shape = (cfg.n_slices * M, N)
    if out is None:
        out = np.empty(shape, dtype=vol.data.dtype)
    elif out.shape != shape or out.dtype != vol.data.dtype:
        raise VolumeError(f"output buffer must be {shape} {vol.data.dtype}")
    slots = slice_set(pole.z, cfg, S).as_array()
    kernels.transform_into(vol.data, pole.u, pole.v, slots, table.dx, table.dy, out,
                           table.monotone)
    return TransformImage(out, pole, cfg)


def radial_transform(
    vol: Volume, pole: Pole, table: Optional[OffsetTable] = None
) -> TransformImage:
    """Single-slice polar transform (``n_slices=1``)."""
    return cylindrical_transform(vol, pole, RADIAL, table)


def save_raw(img: TransformImage, path: PathLike) -> None:
    """Lossless f32 dump plus JSON sidecar."""
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    p.with_name(p.name + ".raw").write_bytes(img.data.astype("<f4").tobytes())
    meta = {
        "shape": list(img.shape),
        "dtype": "f32",
        "source_dtype": str(img.data.dtype),
        "pole": list(img.pole),
        "config": img.config.to_json(),
    }
    p.with_name(p.name + ".json").write_text(json.dumps(meta, indent=1) + "\n")


def load_raw(path: PathLike) -> TransformImage:
    p = Path(path)
    meta = json.loads(p.with_name(p.name + ".json").read_text())
    data = np.frombuffer(p.with_name(p.name + ".raw").read_bytes(), dtype="<f4")
    rows, cols = meta["shape"]
    if data.size != rows * cols:
        raise VolumeError(f"{p}: expected {rows * cols} samples, found {data.size}")
    cfg = TransformConfig(**meta["config"])
    return TransformImage(data.reshape(rows, cols).astype(np.float32), Pole(*meta["pole"]), cfg)


def save_pgm(img: TransformImage, path: PathLike) -> None:
    """16-bit binary PGM, min-max scaled over the image's own range."""
    data = img.data.astype(np.float64)
    lo, hi = float(data.min()), float(data.max())
    scale = 65535.0 / (hi - lo) if hi > lo else 0.0
    pix = np.rint((data - lo) * scale).astype(">u2")
    rows, cols = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{cols} {rows}\n65535\n".encode("ascii"))
        fh.write(pix.tobytes())


def read_pgm(path: PathLike) -> np.ndarray:
    raw = Path(path).read_bytes()
    fields = raw.split(maxsplit=4)
    if fields[0] != b"P5":
        raise VolumeError(f"{path}: not a binary PGM")
    cols, rows, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    dtype = ">u2" if maxval > 255 else "u1"
    body = raw[len(raw) - rows * cols * np.dtype(dtype).itemsize:]
    return np.frombuffer(body, dtype=dtype).reshape(rows, cols)


def expected_dims(vol_dims: Tuple[int, int, int], cfg: TransformConfig) -> Tuple[int, int]:
    _, M, N = vol_dims
    return cfg.n_slices * M, N
