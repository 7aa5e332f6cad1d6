"""Softmax baseline classifier over average-pooled transform images.

Images are reduced to a ``pool_rows x pool_cols`` grid of window means,
standardised with training-set statistics and fed to a linear softmax model
trained with Adam, a sigmoid-decay learning rate, L2 weight decay and
early stopping on validation accuracy.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import List, Optional, Tuple, Union

import numpy as np

from . import _fallback
from ._backend import kernels
from .dataset import Pool, concat
from .transform import TransformImage, shared_offset_table
from .volume import PathLike

log = logging.getLogger(__name__)

MODEL_VERSION = "cylseg-model/1"
CHUNK = 512


class TrainingError(RuntimeError):
    pass


class ModelFormatError(ValueError):
    pass


@dataclass(frozen=True)
class FeatureConfig:
    pool_rows: int = 40
    pool_cols: int = 16
    standardize: bool = True

    @property
    def dim(self) -> int:
        return self.pool_rows * self.pool_cols

    def windows(self, rows: int, cols: int):
        """Per-row and per-column window ids plus pixel counts per window."""
        if not (1 <= self.pool_rows <= rows and 1 <= self.pool_cols <= cols):
            raise ValueError(
                f"pooling grid {self.pool_rows}x{self.pool_cols} does not fit a {rows}x{cols} image"
            )
        row_win = np.minimum(np.arange(rows) // (rows // self.pool_rows), self.pool_rows - 1)
        col_win = np.minimum(np.arange(cols) // (cols // self.pool_cols), self.pool_cols - 1)
        counts = np.outer(np.bincount(row_win), np.bincount(col_win)).astype(np.float64)
        return row_win.astype(np.int64), col_win.astype(np.int64), counts


_KERNEL_DTYPES = (np.uint8, np.int16, np.float32)


def pool_features(img: Union[TransformImage, np.ndarray], cfg: FeatureConfig) -> np.ndarray:
    """Window means of the image in row-major window order."""
    data = img.data if isinstance(img, TransformImage) else np.asarray(img)
    row_win, col_win, counts = cfg.windows(*data.shape)
    out = np.empty(cfg.dim, dtype=np.float64)
    if data.dtype in _KERNEL_DTYPES:
        kernels.pool_into(np.ascontiguousarray(data), row_win, col_win, counts, out)
    else:
        _fallback.pool_into(data, row_win, col_win, counts, out)
    return out


def volume_features(
    vol, poles: np.ndarray, tcfg, fcfg: FeatureConfig, table=None, threads: int = 1
) -> np.ndarray:
    """Pooled features for many poles of one volume, computed without
    materialising transform images. Chunking is fixed, so the result does not
    depend on ``threads``."""
    S, M, N = vol.dims
    if table is None:
        table = shared_offset_table(M, N)
    row_win, col_win, counts = fcfg.windows(tcfg.n_slices * M, N)
    prefix = table.monotone
    poles = np.ascontiguousarray(poles, dtype=np.int64).reshape(-1, 3)
    out = np.empty((poles.shape[0], fcfg.dim), dtype=np.float64)

    def run(start):
        stop = min(start + CHUNK, poles.shape[0])
        kernels.features_batch(
            vol.data, poles[start:stop], tcfg.delta_s, tcfg.n_slices,
            table.dx, table.dy, row_win, col_win, counts, out[start:stop], prefix,
        )

    starts = range(0, poles.shape[0], CHUNK)
    if threads > 1:
        with ThreadPoolExecutor(threads) as ex:
            list(ex.map(run, starts))
    else:
        for s in starts:
            run(s)
    return out


def pool_dataset(pools, fcfg: FeatureConfig, threads: int = 1) -> Tuple[np.ndarray, np.ndarray]:
    """Feature matrix and label vector for one or more pools."""
    xs, ys = [], []
    for pool in concat(pools):
        if len(pool) == 0:
            continue
        if pool.images is None:
            X = volume_features(pool._source(), pool.poles, pool.config, fcfg, threads=threads)
        else:
            X = np.stack([pool_features(np.asarray(im), fcfg) for im in pool.images])
        xs.append(X)
        ys.append(pool.labels)
    if not xs:
        raise TrainingError("empty pool")
    return np.concatenate(xs), np.concatenate(ys)


@dataclass(eq=False)
class Model:
    weights: np.ndarray  # (C, D)
    bias: np.ndarray  # (C,)
    feature_cfg: FeatureConfig
    mean: np.ndarray  # (D,)
    std: np.ndarray  # (D,)
    image_shape: Optional[Tuple[int, int]] = None
    transform: Optional[dict] = None

    @property
    def n_classes(self) -> int:
        return self.weights.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.weights.shape[1]

    @classmethod
    def zeros(cls, n_classes: int, fcfg: FeatureConfig, **kw) -> "Model":
        D = fcfg.dim
        return cls(np.zeros((n_classes, D)), np.zeros(n_classes), fcfg,
                   np.zeros(D), np.ones(D), **kw)

    def normalize(self, X: np.ndarray) -> np.ndarray:
        if not self.feature_cfg.standardize:
            return np.asarray(X, dtype=np.float64)
        return (X - self.mean) / self.std

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        """Class probabilities for raw (unstandardised) feature rows.

        Equal to ``forward(self, self.normalize(X))`` but standardises inside
        the linear kernel, row by row, without a temporary copy of ``X``.
        """
        X = np.ascontiguousarray(np.atleast_2d(X), dtype=np.float64)
        if X.shape[-1] != self.feature_dim:
            raise ValueError(f"expected {self.feature_dim} features, got {X.shape[-1]}")
        if self.feature_cfg.standardize:
            mean, std = self.mean, self.std
        else:
            mean, std = np.zeros(self.feature_dim), np.ones(self.feature_dim)
        logits = np.empty((X.shape[0], self.n_classes))
        ok = kernels.standard_linear_into(
            X, np.ascontiguousarray(mean, dtype=np.float64),
            np.ascontiguousarray(std, dtype=np.float64),
            np.ascontiguousarray(self.weights, dtype=np.float64),
            np.ascontiguousarray(self.bias, dtype=np.float64), logits,
        )
        if not ok:
            raise ValueError("non-finite features")
        return softmax(logits)

    def copy(self) -> "Model":
        return Model(self.weights.copy(), self.bias.copy(), self.feature_cfg,
                     self.mean.copy(), self.std.copy(), self.image_shape, self.transform)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def forward(model: Model, features: np.ndarray) -> np.ndarray:
    """softmax(W f + b) for standardised features (a vector or row batch).

    Each row is reduced on its own so a pole's probabilities do not depend on
    what else is in the batch.
    """
    f = np.asarray(features, dtype=np.float64)
    if f.shape[-1] != model.feature_dim:
        raise ValueError(f"expected {model.feature_dim} features, got {f.shape[-1]}")
    if not np.all(np.isfinite(f)):
        raise ValueError("non-finite features")
    rows = np.ascontiguousarray(f.reshape(-1, f.shape[-1]))
    logits = np.empty((rows.shape[0], model.n_classes))
    kernels.linear_into(rows, np.ascontiguousarray(model.weights, dtype=np.float64),
                        np.ascontiguousarray(model.bias, dtype=np.float64), logits)
    return softmax(logits).reshape(f.shape[:-1] + (model.n_classes,))


def predict(model: Model, img: Union[TransformImage, np.ndarray]) -> Tuple[int, np.ndarray]:
    data = img.data if isinstance(img, TransformImage) else np.asarray(img)
    if model.image_shape is not None and tuple(data.shape) != tuple(model.image_shape):
        raise ValueError(f"model expects {tuple(model.image_shape)} images, got {data.shape}")
    probs = model.predict_proba(pool_features(data, model.feature_cfg)[None])[0]
    return int(np.argmax(probs)), probs


@dataclass(frozen=True)
class TrainConfig:
    lr_base: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    l2: float = 1e-4
    epochs: int = 120
    batch: int = 4
    early_stop_window: int = 5
    shuffle: bool = True
    seed: int = 0
    gamma: float = 0.1
    midpoint: Optional[float] = None

    def lr(self, epoch: int) -> float:
        """Sigmoid decay from ~lr_base down to ~0 around ``midpoint``."""
        t0 = self.epochs / 2 if self.midpoint is None else self.midpoint
        x = self.gamma * (epoch - t0)
        if x > 700:
            return 0.0
        return self.lr_base / (1.0 + math.exp(x))


@dataclass
class History:
    rows: List[dict] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    COLUMNS = ("epoch", "lr", "train_loss", "train_acc", "val_loss", "val_acc")

    def to_csv(self, path: PathLike) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.COLUMNS)
            for row in self.rows:
                w.writerow([row["epoch"]] + [repr(float(row[c])) for c in self.COLUMNS[1:]])


def loss_and_grad(W, b, X, y, l2):
    """Mean cross-entropy + l2/2 * ||W||^2 and its gradient."""
    logits = X @ W.T + b
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = X.shape[0]
    loss = -logp[np.arange(n), y].mean() + 0.5 * l2 * float(np.sum(W * W))
    G = np.exp(logp)
    G[np.arange(n), y] -= 1.0
    G /= n
    return loss, G.T @ X + l2 * W, G.sum(axis=0)


def _evaluate(W, b, X, y, l2):
    loss, _, _ = loss_and_grad(W, b, X, y, l2)
    acc = float(np.mean(np.argmax(X @ W.T + b, axis=1) == y))
    return float(loss), acc


class _Adam:
    def __init__(self, shapes, cfg: TrainConfig):
        self.cfg = cfg
        self.m = [np.zeros(s) for s in shapes]
        self.v = [np.zeros(s) for s in shapes]
        self.t = 0

    def step(self, params, grads, lr):
        c = self.cfg
        self.t += 1
        bc1 = 1.0 - c.beta1 ** self.t
        bc2 = 1.0 - c.beta2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= c.beta1
            m += (1.0 - c.beta1) * g
            v *= c.beta2
            v += (1.0 - c.beta2) * (g * g)
            p -= lr * (m / bc1) / (np.sqrt(v / bc2) + c.epsilon)


def train(
    pool_train,
    pool_val,
    tcfg: TrainConfig = TrainConfig(),
    fcfg: FeatureConfig = FeatureConfig(),
    *,
    n_classes: Optional[int] = None,
    init: Optional[Model] = None,
    threads: int = 1,
) -> Tuple[Model, History]:
    """Fit the softmax model; returns the best-validation snapshot and history.

    ``pool_train``/``pool_val`` are pools (or sequences of pools) or
    ``(X, y)`` feature/label tuples.
    """
    Xtr, ytr = _as_xy(pool_train, fcfg, threads)
    Xva, yva = _as_xy(pool_val, fcfg, threads)
    for name, X in (("training", Xtr), ("validation", Xva)):
        if X.ndim != 2 or X.shape[1] != fcfg.dim:
            raise TrainingError(f"{name} features have shape {X.shape}, expected (n, {fcfg.dim})")
    C = n_classes or int(max(ytr.max(), yva.max())) + 1
    missing = sorted(set(range(C)) - set(np.unique(ytr).tolist()))
    if missing:
        raise TrainingError(f"classes {missing} have no training samples")
    if tcfg.batch > len(ytr):
        raise TrainingError(f"batch {tcfg.batch} larger than training set ({len(ytr)})")

    image_shape = transform = None
    pools = _pools_of(pool_train)
    if pools:
        image_shape = pools[0].image_shape
        transform = pools[0].config.to_json()

    if init is not None:
        model = init.copy()
    else:
        model = Model.zeros(C, fcfg, image_shape=image_shape, transform=transform)
        if fcfg.standardize:
            std = Xtr.std(axis=0)
            model.mean = Xtr.mean(axis=0)
            model.std = np.where(std > 0, std, 1.0)
    Ztr, Zva = model.normalize(Xtr), model.normalize(Xva)

    W, b = model.weights, model.bias
    opt = _Adam([W.shape, b.shape], tcfg)
    history = History(meta={
        "lr_base": tcfg.lr_base, "batch": tcfg.batch, "epochs": tcfg.epochs,
        "iterations_as": "epochs", "l2": tcfg.l2, "beta1": tcfg.beta1,
        "early_stop_window": tcfg.early_stop_window, "seed": tcfg.seed,
        "n_train": int(len(ytr)), "n_val": int(len(yva)),
    })
    best = model.copy()
    best_acc, best_epoch = -1.0, None
    n = len(ytr)
    for epoch in range(tcfg.epochs):
        lr = tcfg.lr(epoch)
        order = np.random.default_rng([tcfg.seed, epoch]).permutation(n) if tcfg.shuffle \
            else np.arange(n)
        for start in range(0, n, tcfg.batch):
            idx = order[start:start + tcfg.batch]
            # overflow shows up as a non-finite loss below and is reported there
            with np.errstate(over="ignore", invalid="ignore"):
                _, gW, gb = loss_and_grad(W, b, Ztr[idx], ytr[idx], tcfg.l2)
                opt.step([W, b], [gW, gb], lr)
        with np.errstate(over="ignore", invalid="ignore"):
            tr_loss, tr_acc = _evaluate(W, b, Ztr, ytr, tcfg.l2)
            va_loss, va_acc = _evaluate(W, b, Zva, yva, tcfg.l2)
        if not (math.isfinite(tr_loss) and math.isfinite(va_loss)):
            raise TrainingError(
                f"loss diverged at epoch {epoch + 1} (train {tr_loss}, val {va_loss}, lr {lr:g}); "
                "lower lr_base"
            )
        history.rows.append({"epoch": epoch + 1, "lr": lr, "train_loss": tr_loss,
                             "train_acc": tr_acc, "val_loss": va_loss, "val_acc": va_acc})
        log.info("epoch %d lr %.3g train %.4f/%.4f val %.4f/%.4f",
                 epoch + 1, lr, tr_loss, tr_acc, va_loss, va_acc)
        if va_acc > best_acc:
            best_acc, best_epoch = va_acc, epoch + 1
            best = model.copy()
        elif epoch + 1 - best_epoch >= tcfg.early_stop_window:
            break
    history.meta.update(best_epoch=best_epoch, best_val_acc=best_acc,
                        stopped_epoch=len(history.rows))
    return best, history


def _pools_of(obj) -> List[Pool]:
    if isinstance(obj, Pool):
        return [obj]
    if isinstance(obj, (list, tuple)) and obj and all(isinstance(p, Pool) for p in obj):
        return list(obj)
    return []


def _as_xy(obj, fcfg, threads):
    if _pools_of(obj):
        return pool_dataset(obj, fcfg, threads)
    X, y = obj
    return np.asarray(X, dtype=np.float64), np.asarray(y, dtype=np.int64)


def save_model(model: Model, path: PathLike) -> None:
    doc = {
        "version": MODEL_VERSION,
        "n_classes": model.n_classes,
        "feature_cfg": asdict(model.feature_cfg),
        "norm_stats": {"mean": model.mean.tolist(), "std": model.std.tolist()},
        "weights": model.weights.ravel().tolist(),
        "bias": model.bias.tolist(),
        "image_shape": list(model.image_shape) if model.image_shape else None,
        "transform": model.transform,
    }
    with open(path, "w") as fh:
        json.dump(doc, fh)
        fh.write("\n")


def load_model(path: PathLike) -> Model:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ModelFormatError(f"{path}: corrupt model file ({exc})") from exc
    if doc.get("version") != MODEL_VERSION:
        raise ModelFormatError(f"{path}: model version {doc.get('version')!r}, expected {MODEL_VERSION}")
    try:
        fcfg = FeatureConfig(**doc["feature_cfg"])
        C = int(doc["n_classes"])
        W = np.array(doc["weights"], dtype=np.float64).reshape(C, fcfg.dim)
        model = Model(
            W,
            np.array(doc["bias"], dtype=np.float64),
            fcfg,
            np.array(doc["norm_stats"]["mean"], dtype=np.float64),
            np.array(doc["norm_stats"]["std"], dtype=np.float64),
            tuple(doc["image_shape"]) if doc.get("image_shape") else None,
            doc.get("transform"),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ModelFormatError(f"{path}: corrupt model file ({exc})") from exc
    for arr in (model.weights, model.bias, model.mean, model.std):
        if not np.all(np.isfinite(arr)):
            raise ModelFormatError(f"{path}: non-finite parameters")
    return model


def train_from_features(X, y, Xv, yv, tcfg=TrainConfig(), fcfg=None, **kw):
    """Convenience wrapper for pre-pooled features."""
    fcfg = fcfg or FeatureConfig(pool_rows=1, pool_cols=np.asarray(X).shape[1])
    return train((X, y), (Xv, yv), tcfg, fcfg, **kw)
