"""Training pools of (transform image, pole label) pairs.

A pool on disk is a directory::

    pool.json        volume id, dims, transform config, seed, storage mode
    manifest.jsonl   one {"pole": [u, v, z], "label": c, "image": path|null} per line
    images/          f32 transform images, one ``.raw`` per sample (eager mode)

In lazy mode no images are written and they are regenerated from the source
volume on demand; both modes yield identical images.
"""

from __future__ import annotations

import json
import logging
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, List, NamedTuple, Optional, Sequence

import numpy as np

from .transform import (
    TransformConfig,
    TransformImage,
    cylindrical_transform,
    expected_dims,
    shared_offset_table,
)
from .volume import LabelVolume, PathLike, Pole, Volume, VolumeError, load_volume, validate_pair

log = logging.getLogger(__name__)


class PoleSample(NamedTuple):
    pole: Pole
    label: int


def sample_poles(labels: LabelVolume, per_class_per_slice: int, seed: int) -> List[PoleSample]:
    """Stratified draw without replacement of up to ``per_class_per_slice``
    poles for every (slice, class) pair; ordered by slice, class, draw."""
    if per_class_per_slice < 1:
        raise ValueError("per_class_per_slice must be >= 1")
    rng = np.random.default_rng(seed)
    S, M, N = labels.dims
    for c in range(labels.n_classes):
        if not (labels.data == c).any():
            warnings.warn(f"class {c} does not occur in the label volume; no poles drawn")
    samples: List[PoleSample] = []
    for s in range(S):
        flat = labels.data[s].ravel()
        for c in range(labels.n_classes):
            idx = np.flatnonzero(flat == c)
            if idx.size == 0:
                continue
            take = min(per_class_per_slice, idx.size)
            for k in rng.choice(idx, size=take, replace=False):
                m, n = divmod(int(k), N)
                samples.append(PoleSample(Pole(m, n, s), c))
    return samples


@dataclass(eq=False)
class Pool:
    samples: List[PoleSample]
    config: TransformConfig
    dims: tuple
    volume_id: Optional[str] = None
    seed: Optional[int] = None
    volume: Optional[Volume] = field(default=None, repr=False)
    images: Optional[List[np.ndarray]] = field(default=None, repr=False)
    root: Optional[Path] = None

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.samples], dtype=np.int64)

    @property
    def poles(self) -> np.ndarray:
        return np.array([tuple(s.pole) for s in self.samples], dtype=np.int64).reshape(-1, 3)

    @property
    def image_shape(self):
        return expected_dims(self.dims, self.config)

    def _source(self) -> Volume:
        if self.volume is None:
            if self.volume_id is None:
                raise VolumeError("lazy pool has no source volume")
            src = Path(self.volume_id)
            if not src.is_absolute() and self.root is not None:
                # relative ids are resolved against the pool directory
                src = self.root / src
            self.volume = load_volume(src)
        return self.volume

    def image(self, i: int) -> TransformImage:
        pole = self.samples[i].pole
        if self.images is not None:
            return TransformImage(self.images[i], pole, self.config)
        return cylindrical_transform(self._source(), pole, self.config)

    def iter_images(self) -> Iterator[TransformImage]:
        for i in range(len(self)):
            yield self.image(i)

    def subset(self, indices: Sequence[int]) -> "Pool":
        indices = list(indices)
        return Pool(
            samples=[self.samples[i] for i in indices],
            config=self.config,
            dims=self.dims,
            volume_id=self.volume_id,
            seed=self.seed,
            volume=self.volume,
            images=[self.images[i] for i in indices] if self.images is not None else None,
            root=self.root,
        )

    def meta(self) -> dict:
        return {
            "volume_id": self.volume_id,
            "dims": list(self.dims),
            "config": self.config.to_json(),
            "seed": self.seed,
            "n_samples": len(self),
            "stored": self.images is not None,
        }


def _compute_images(vol: Volume, cfg: TransformConfig, samples, threads: int) -> List[np.ndarray]:
    S, M, N = vol.dims
    table = shared_offset_table(M, N)

    def one(sample):
        img = cylindrical_transform(vol, sample.pole, cfg, table)
        return img.data.astype(np.float32)

    if threads > 1:
        with ThreadPoolExecutor(threads) as ex:
            return list(ex.map(one, samples))
    return [one(s) for s in samples]


def build_pool(
    vol: Volume,
    labels: LabelVolume,
    cfg: TransformConfig,
    samples: Sequence[PoleSample],
    out: Optional[PathLike] = None,
    *,
    store: bool = True,
    volume_id: Optional[str] = None,
    seed: Optional[int] = None,
    threads: int = 1,
) -> Pool:
    """Transform every sample and, if ``out`` is given, write the pool there.

    With ``store=False`` only the manifest is written and images are
    regenerated from ``vol`` when needed.
    """
    validate_pair(vol, labels)
    for smp in samples:
        Pole(*smp.pole).check(vol.dims)
        if int(labels.data[smp.pole.z, smp.pole.u, smp.pole.v]) != smp.label:
            raise VolumeError(f"sample {smp} disagrees with the label volume")
    pool = Pool(list(samples), cfg, vol.dims, volume_id=volume_id, seed=seed, volume=vol)
    if store:
        pool.images = _compute_images(vol, cfg, pool.samples, threads)
    if out is not None:
        write_pool(pool, out)
    return pool


def write_pool(pool: Pool, root: PathLike) -> None:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    lines = []
    for i, smp in enumerate(pool.samples):
        rel = None
        if pool.images is not None:
            rel = f"images/{i:07d}.raw"
            (root / rel).write_bytes(np.asarray(pool.images[i], dtype="<f4").tobytes())
        lines.append(json.dumps({"pole": list(smp.pole), "label": smp.label, "image": rel}))
    (root / "manifest.jsonl").write_text("".join(line + "\n" for line in lines))
    (root / "pool.json").write_text(json.dumps(pool.meta(), indent=1) + "\n")
    pool.root = root


def read_manifest(path: PathLike):
    samples, images = [], []
    with open(path) as fh:
        for line in fh:
            if not line.strip():
                continue
            doc = json.loads(line)
            samples.append(PoleSample(Pole(*doc["pole"]), int(doc["label"])))
            images.append(doc.get("image"))
    return samples, images


def load_pool(root: PathLike, volume: Optional[Volume] = None) -> Pool:
    root = Path(root)
    meta = json.loads((root / "pool.json").read_text())
    samples, rels = read_manifest(root / "manifest.jsonl")
    cfg = TransformConfig(**meta["config"])
    dims = tuple(meta["dims"])
    images = None
    if meta.get("stored"):
        shape = expected_dims(dims, cfg)
        images = []
        for rel in rels:
            data = np.frombuffer((root / rel).read_bytes(), dtype="<f4")
            if data.size != shape[0] * shape[1]:
                raise VolumeError(f"{root / rel}: wrong image size")
            images.append(data.reshape(shape))
    if volume is not None and volume.dims != dims:
        raise VolumeError(f"pool built for dims {dims}, volume has {volume.dims}")
    return Pool(samples, cfg, dims, meta.get("volume_id"), meta.get("seed"), volume, images, root)


def split(pool: Pool, k: int, seed: int) -> List[Pool]:
    """Stratified k-fold partition of ``pool``."""
    return [pool.subset(idx) for idx in split_indices(pool.labels, k, seed)]


def split_indices(labels: np.ndarray, k: int, seed: int) -> List[List[int]]:
    if k < 2:
        raise ValueError("need at least two folds")
    labels = np.asarray(labels)
    if labels.size == 0:
        raise ValueError("cannot split an empty pool")
    classes, counts = np.unique(labels, return_counts=True)
    if k > counts.min():
        raise ValueError(f"k={k} exceeds the smallest class count {counts.min()}")
    rng = np.random.default_rng(seed)
    folds: List[List[int]] = [[] for _ in range(k)]
    start = 0
    for c in classes:
        idx = rng.permutation(np.flatnonzero(labels == c))
        for j, i in enumerate(idx):
            folds[(start + j) % k].append(int(i))
        start = (start + idx.size) % k
    return [sorted(f) for f in folds]


def concat(pools: Sequence[Pool]) -> List[Pool]:
    """Normalise a pool or a sequence of pools to a list."""
    if isinstance(pools, Pool):
        return [pools]
    return list(pools)
