"""Labelled synthetic phantoms built from spheres, cylinders and cuboids."""

from __future__ import annotations

import json
import warnings
from dataclasses import asdict, dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np

from .volume import DTYPES, LabelVolume, PathLike, Volume, VolumeError

SHAPES = ("sphere", "cylinder", "cuboid")


@dataclass(frozen=True)
class Primitive:
    """One solid. ``center`` is ``(m, n, s)`` in voxel index coordinates.

    sphere: ``radius``; cylinder (axis along slices): ``radius`` and
    ``height``; cuboid: ``edges`` as ``(rows, cols, slices)``.
    """

    shape: str
    center: Tuple[float, float, float]
    intensity: float
    label: int
    radius: float = 0.0
    height: float = 0.0
    edges: Tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise VolumeError(f"unknown shape {self.shape!r}")
        if self.label < 0:
            raise VolumeError(f"negative label {self.label}")

    def mask(self, dims: Tuple[int, int, int]) -> np.ndarray:
        S, M, N = dims
        s, m, n = np.ogrid[0:S, 0:M, 0:N]
        cm, cn, cs = self.center
        if self.shape == "sphere":
            return (m - cm) ** 2 + (n - cn) ** 2 + (s - cs) ** 2 <= self.radius ** 2
        if self.shape == "cylinder":
            disc = (m - cm) ** 2 + (n - cn) ** 2 <= self.radius ** 2
            return disc & (np.abs(s - cs) <= self.height / 2)
        em, en, es = self.edges
        return (
            (cm - em / 2 <= m) & (m < cm + em / 2)
            & (cn - en / 2 <= n) & (n < cn + en / 2)
            & (cs - es / 2 <= s) & (s < cs + es / 2)
        )


@dataclass(frozen=True)
class PhantomSpec:
    dims: Tuple[int, int, int]
    primitives: Tuple[Primitive, ...] = ()
    background_intensity: float = 0.0
    noise_sigma: float = 0.0
    seed: int = 0
    dtype: str = "i16"
    classes: Optional[Dict[int, str]] = None

    def __post_init__(self):
        if self.dtype not in DTYPES:
            raise VolumeError(f"unknown dtype {self.dtype!r}")
        if self.noise_sigma < 0:
            raise VolumeError("noise_sigma must be >= 0")
        n_classes = self.n_classes
        for p in self.primitives:
            if p.label >= n_classes:
                raise VolumeError(f"primitive label {p.label} >= {n_classes} classes")

    @property
    def n_classes(self) -> int:
        if self.classes:
            return max(self.classes) + 1
        return max([p.label for p in self.primitives], default=0) + 1

    def to_json(self) -> dict:
        doc = asdict(self)
        doc["primitives"] = [asdict(p) for p in self.primitives]
        if self.classes is not None:
            doc["classes"] = {str(k): v for k, v in self.classes.items()}
        return doc

    @classmethod
    def from_json(cls, doc: dict) -> "PhantomSpec":
        doc = dict(doc)
        prims = []
        for p in doc.pop("primitives", []):
            p = dict(p)
            p["center"] = tuple(p["center"])
            if "edges" in p:
                p["edges"] = tuple(p["edges"])
            prims.append(Primitive(**p))
        classes = doc.pop("classes", None)
        if classes is not None:
            classes = {int(k): v for k, v in classes.items()}
        return cls(
            dims=tuple(doc.pop("dims")), primitives=tuple(prims), classes=classes, **doc
        )


def load_spec(path: PathLike) -> PhantomSpec:
    with open(path) as fh:
        return PhantomSpec.from_json(json.load(fh))


def save_spec(spec: PhantomSpec, path: PathLike) -> None:
    with open(path, "w") as fh:
        json.dump(spec.to_json(), fh, indent=1)
        fh.write("\n")


def _noise(seed: int, shape) -> np.ndarray:
    # Philox is counter-based: value k of the stream depends only on (seed, k).
    gen = np.random.Generator(np.random.Philox(key=seed))
    return gen.standard_normal(int(np.prod(shape))).reshape(shape)


def make_phantom(spec: PhantomSpec) -> Tuple[Volume, LabelVolume]:
    dims = tuple(int(d) for d in spec.dims)
    intensity = np.full(dims, float(spec.background_intensity))
    labels = np.zeros(dims, dtype=np.uint8)
    for prim in spec.primitives:
        inside = prim.mask(dims)
        if not inside.any():
            warnings.warn(f"{prim.shape} at {prim.center} lies entirely outside the volume")
            continue
        intensity[inside] = prim.intensity
        labels[inside] = prim.label
    if spec.noise_sigma > 0:
        intensity = intensity + spec.noise_sigma * _noise(spec.seed, dims)
    dt = DTYPES[spec.dtype]
    if dt.kind in "iu":
        info = np.iinfo(dt)
        intensity = np.clip(np.rint(intensity), info.min, info.max)
    data = intensity.astype(dt)
    classes = spec.classes or {c: str(c) for c in range(spec.n_classes)}
    return Volume(data), LabelVolume(labels, classes, n_classes=spec.n_classes)


TWO_CIRCLES_CLASSES = {0: "background", 1: "sphere", 2: "cylinder"}


def two_circles_spec(
    seed: int,
    dims: Tuple[int, int, int] = (40, 48, 48),
    radius: Tuple[float, float] = (6.0, 9.0),
    background: float = 100.0,
    foreground: float = 200.0,
    noise_sigma: float = 10.0,
) -> PhantomSpec:
    """A sphere and an upright cylinder of equal radius and equal intensity.

    In the slice through the sphere's equator the two cross-sections are
    identical discs; only neighbouring slices tell them apart. Position and
    radius are drawn from ``seed``. The cylinder runs through every slice;
    the sphere sits at mid-height.
    """
    rng = np.random.default_rng(seed)
    S, M, N = dims
    r = float(rng.uniform(*radius))
    half = M / 2
    # The two discs go in opposite halves of the slice, randomly assigned.
    lo = (r + 1, half - r - 1)
    hi = (half + r, M - r - 2)
    m1, m2 = rng.uniform(*lo), rng.uniform(*hi)
    n1, n2 = rng.uniform(r + 1, N - r - 2, size=2)
    if rng.random() < 0.5:
        m1, m2 = m2, m1
    zs = float(rng.uniform(S / 2 - 1, S / 2 + 1))
    prims: List[Primitive] = [
        Primitive("cylinder", (m2, n2, (S - 1) / 2), foreground, 2, radius=r, height=S + 1),
        Primitive("sphere", (m1, n1, zs), foreground, 1, radius=r),
    ]
    return PhantomSpec(
        dims=dims,
        primitives=tuple(prims),
        background_intensity=background,
        noise_sigma=noise_sigma,
        seed=seed,
        dtype="i16",
        classes=dict(TWO_CIRCLES_CLASSES),
    )
