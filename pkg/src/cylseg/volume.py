"""Volumes, label volumes and the ``rvol`` on-disk format.

A volume is a stack of ``S`` slices of ``M x N`` pixels held as a C-contiguous
numpy array of shape ``(S, M, N)``, so the flat index of voxel ``(m, n, s)`` is
``(s * M + m) * N + n`` and a single slice is one contiguous block.

On disk a volume is a pair of files sharing a stem: ``<stem>.json`` (header)
and ``<stem>.raw`` (little-endian flat data).
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, NamedTuple, Optional, Tuple, Union

import numpy as np

PathLike = Union[str, os.PathLike]

DTYPES: Dict[str, np.dtype] = {
    "u8": np.dtype("<u1"),
    "i16": np.dtype("<i2"),
    "f32": np.dtype("<f4"),
}

#: Class ids for the kidney use case.
KIDNEY_CLASSES: Dict[int, str] = {0: "non-kidney", 1: "left kidney", 2: "right kidney"}


class VolumeError(ValueError):
    """Raised for malformed volumes, headers or volume/label mismatches."""


class Pole(NamedTuple):
    """Origin voxel of a transform: row ``u``, column ``v``, slice ``z``."""

    u: int
    v: int
    z: int

    @classmethod
    def parse(cls, text: str) -> "Pole":
        parts = [p.strip() for p in text.split(",")]
        try:
            if len(parts) != 3:
                raise ValueError
            return cls(*(int(p) for p in parts))
        except ValueError:
            raise VolumeError(f"pole must be 'u,v,z' integers, got {text!r}") from None

    def check(self, dims: Tuple[int, int, int]) -> None:
        S, M, N = dims
        if not (0 <= self.u < M and 0 <= self.v < N and 0 <= self.z < S):
            raise VolumeError(f"pole {tuple(self)} outside volume of dims (S,M,N)={dims}")


def dtype_code(dtype: np.dtype) -> str:
    dtype = np.dtype(dtype)
    for code, dt in DTYPES.items():
        if dt.kind == dtype.kind and dt.itemsize == dtype.itemsize:
            return code
    raise VolumeError(f"unsupported dtype {dtype}")


@dataclass(frozen=True)
class VolumeHeader:
    dims: Tuple[int, int, int]
    dtype: str
    class_map: Optional[Dict[int, str]] = None
    spacing: Optional[Tuple[float, ...]] = None

    def __post_init__(self):
        if len(self.dims) != 3 or any(int(d) < 1 for d in self.dims):
            raise VolumeError(f"dims must be three positive integers, got {self.dims}")
        if self.dtype not in DTYPES:
            raise VolumeError(f"unknown dtype {self.dtype!r}; expected one of {sorted(DTYPES)}")

    @property
    def nbytes(self) -> int:
        S, M, N = self.dims
        return S * M * N * DTYPES[self.dtype].itemsize

    def to_json(self) -> dict:
        doc: dict = {"dims": [int(d) for d in self.dims], "dtype": self.dtype}
        if self.class_map is not None:
            doc["classes"] = {str(k): v for k, v in sorted(self.class_map.items())}
        if self.spacing is not None:
            doc["spacing"] = [float(s) for s in self.spacing]
        return doc

    @classmethod
    def from_json(cls, doc: dict) -> "VolumeHeader":
        try:
            dims = tuple(int(d) for d in doc["dims"])
            dtype = doc["dtype"]
        except (KeyError, TypeError, ValueError) as exc:
            raise VolumeError(f"malformed header: {exc}") from exc
        classes = doc.get("classes")
        class_map = {int(k): str(v) for k, v in classes.items()} if classes is not None else None
        spacing = doc.get("spacing")
        return cls(dims, dtype, class_map, tuple(spacing) if spacing is not None else None)


@dataclass(frozen=True, eq=False)
class Volume:
    """Immutable scalar volume; ``data[s, m, n]`` is voxel ``(m, n, s)``."""

    data: np.ndarray
    class_map: Optional[Dict[int, str]] = None
    spacing: Optional[Tuple[float, ...]] = None

    def __post_init__(self):
        data = np.ascontiguousarray(self.data)
        if data.ndim != 3:
            raise VolumeError(f"volume data must be 3-D (S, M, N), got shape {data.shape}")
        code = dtype_code(data.dtype)
        data = data.astype(DTYPES[code].newbyteorder("="), copy=False)
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @property
    def header(self) -> VolumeHeader:
        return VolumeHeader(self.dims, dtype_code(self.data.dtype), self.class_map, self.spacing)

    @property
    def dims(self) -> Tuple[int, int, int]:
        S, M, N = self.data.shape
        return int(S), int(M), int(N)

    def __getitem__(self, key):
        return self.data[key]

    def voxel(self, m: int, n: int, s: int):
        return self.data[s, m, n]


@dataclass(frozen=True, eq=False)
class LabelVolume(Volume):
    """u8 volume of class ids in ``[0, n_classes)``."""

    n_classes: int = 0

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.dtype != np.uint8:
            if data.size and (data.min() < 0 or data.max() > 255):
                raise VolumeError("label values must fit in u8")
            data = data.astype(np.uint8)
        object.__setattr__(self, "data", data)
        super().__post_init__()
        n_classes = self.n_classes
        if not n_classes:
            n_classes = len(self.class_map) if self.class_map else int(self.data.max()) + 1
            object.__setattr__(self, "n_classes", n_classes)
        if self.data.size and int(self.data.max()) >= n_classes:
            raise VolumeError(
                f"label value {int(self.data.max())} out of range for {n_classes} classes"
            )

    @property
    def header(self) -> VolumeHeader:
        class_map = self.class_map or {c: str(c) for c in range(self.n_classes)}
        return VolumeHeader(self.dims, "u8", class_map, self.spacing)


def _paths(path: PathLike) -> Tuple[Path, Path]:
    p = Path(path)
    if p.suffix in (".json", ".raw"):
        p = p.with_suffix("")
    return p.with_name(p.name + ".json"), p.with_name(p.name + ".raw")


def read_header(path: PathLike) -> VolumeHeader:
    hdr_path, _ = _paths(path)
    try:
        doc = json.loads(hdr_path.read_text())
    except json.JSONDecodeError as exc:
        raise VolumeError(f"{hdr_path}: header is not valid JSON ({exc})") from exc
    return VolumeHeader.from_json(doc)


def load_volume(path: PathLike) -> Volume:
    """Load ``<path>.json`` + ``<path>.raw``.

    A header carrying a ``classes`` map with dtype u8 is loaded as a
    :class:`LabelVolume`. Any mismatch between declared dims and the raw byte
    length is an error; data is never truncated or padded.
    """
    hdr_path, raw_path = _paths(path)
    if not hdr_path.exists():
        raise FileNotFoundError(f"missing header {hdr_path}")
    if not raw_path.exists():
        raise FileNotFoundError(f"missing raw data {raw_path}")
    header = read_header(path)
    raw = raw_path.read_bytes()
    if len(raw) != header.nbytes:
        raise VolumeError(
            f"{raw_path}: {len(raw)} bytes on disk but dims {list(header.dims)} "
            f"of {header.dtype} need {header.nbytes}"
        )
    data = np.frombuffer(raw, dtype=DTYPES[header.dtype]).reshape(header.dims)
    if header.dtype == "u8" and header.class_map is not None:
        n_classes = max(header.class_map) + 1 if header.class_map else 0
        return LabelVolume(data, header.class_map, header.spacing, n_classes=n_classes)
    return Volume(data, header.class_map, header.spacing)


def load_labels(path: PathLike) -> LabelVolume:
    vol = load_volume(path)
    if not isinstance(vol, LabelVolume):
        if vol.data.dtype != np.uint8:
            raise VolumeError(f"{path}: label volumes must be u8, got {vol.header.dtype}")
        vol = LabelVolume(vol.data, spacing=vol.spacing)
    return vol


def save_volume(vol: Volume, path: PathLike) -> None:
    hdr_path, raw_path = _paths(path)
    hdr_path.parent.mkdir(parents=True, exist_ok=True)
    header = vol.header
    raw_path.write_bytes(vol.data.astype(DTYPES[header.dtype], copy=False).tobytes(order="C"))
    hdr_path.write_text(json.dumps(header.to_json(), indent=1) + "\n")


def validate_pair(vol: Volume, labels: LabelVolume) -> None:
    if vol.dims != labels.dims:
        raise VolumeError(f"dims mismatch: volume {vol.dims} vs labels {labels.dims}")
    if labels.data.size and int(labels.data.max()) >= labels.n_classes:
        raise VolumeError(
            f"label {int(labels.data.max())} out of range for {labels.n_classes} classes"
        )


def flat_index(m: int, n: int, s: int, dims: Tuple[int, int, int]) -> int:
    _, M, N = dims
    return (s * M + m) * N + n


def unflat_index(k: int, dims: Tuple[int, int, int]) -> Tuple[int, int, int]:
    """Inverse of :func:`flat_index`, returning ``(m, n, s)``."""
    _, M, N = dims
    s, rem = divmod(k, M * N)
    m, n = divmod(rem, N)
    return m, n, s
