"""``cylseg`` command line: synth | transform | sample | train | segment | evaluate | bench.

Every option may also come from a JSON ``--config`` file (keys are the long
option names with ``-`` replaced by ``_``). Precedence is flag, then file,
then built-in default. Each run writes the fully resolved settings, seeds
included, next to its outputs as ``<out>.run.json``.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import __version__
from ._backend import kernels
from .classifier import (
    FeatureConfig,
    Model,
    ModelFormatError,
    TrainConfig,
    TrainingError,
    load_model,
    save_model,
    train,
)
from .dataset import build_pool, concat, load_pool, sample_poles, split
from .metrics import evaluate
from .segmenter import InferenceConfig, segment_volume, throughput_report
from .synth import load_spec, make_phantom, two_circles_spec
from .transform import ConfigError, TransformConfig, cylindrical_transform, save_pgm, save_raw
from .volume import Pole, Volume, VolumeError, load_labels, load_volume, save_volume

log = logging.getLogger("cylseg")


class CliError(Exception):
    pass


def _env_threads() -> int:
    raw = os.environ.get("CYLSEG_THREADS")
    if raw is None:
        return 1
    try:
        n = int(raw)
    except ValueError:
        raise CliError(f"CYLSEG_THREADS={raw!r} is not an integer") from None
    if n < 1:
        raise CliError(f"CYLSEG_THREADS={raw!r} must be >= 1")
    return n


def _triple(text: str) -> Pole:
    try:
        return Pole.parse(text)
    except (ValueError, VolumeError) as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _roi(text: str):
    parts = text.split(",")
    if len(parts) != 6:
        raise argparse.ArgumentTypeError(f"--roi needs m0,m1,n0,n1,s0,s1; got {text!r}")
    try:
        return tuple(int(p) for p in parts)
    except ValueError:
        raise argparse.ArgumentTypeError(f"--roi values must be integers; got {text!r}") from None


# Built-in defaults per subcommand; argparse itself never fills defaults so
# that "given on the command line" can be told apart from "not given".
DEFAULTS: Dict[str, dict] = {
    "synth": {"spec": None, "seed": None, "out": None, "labels_out": None},
    "transform": {"volume": None, "pole": None, "ds": 3, "slices": 5, "format": "raw",
                  "out": None},
    "sample": {"volume": None, "labels": None, "ds": 3, "slices": 5, "per_class": 1000,
               "seed": 0, "store": False, "threads": None, "out": None},
    "train": {"pool": None, "val": None, "folds": 5, "seed": 0, "lr": 1e-5, "epochs": 120,
              "batch": 4, "l2": 1e-4, "early_stop": 5, "gamma": 0.1, "pool_rows": 40,
              "pool_cols": 16, "threads": None, "out": None},
    "segment": {"volume": None, "model": None, "ds": None, "slices": None, "stride": 1,
                "stride_z": 1, "roi": None, "scores": False, "threads": None, "out": None},
    "evaluate": {"pred": None, "truth": None, "scores": None, "roc_out": None, "out": None},
    "bench": {"volume": None, "model": None, "dims": "9,64,64", "seed": 0, "ds": 3,
              "slices": 5, "stride": 1, "stride_z": 1, "threads": None, "rebuild_limit": None,
              "out": None},
}

REQUIRED = {
    "synth": ["out"],
    "transform": ["volume", "pole", "out"],
    "sample": ["volume", "labels", "out"],
    "train": ["pool", "out"],
    "segment": ["volume", "model", "out"],
    "evaluate": ["pred", "truth", "out"],
    "bench": ["out"],
}


def _add(p: argparse.ArgumentParser, cmd: str, flag: str, help: str, **kw):
    dest = flag.lstrip("-").replace("-", "_")
    default = DEFAULTS[cmd][dest]
    if dest == "threads":
        shown = "$CYLSEG_THREADS or 1"
    elif dest in REQUIRED[cmd]:
        shown = "required"
    else:
        shown = default
    p.add_argument(flag, dest=dest, default=argparse.SUPPRESS, help=f"{help} (default: {shown})",
                   **kw)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cylseg", description="Cylindrical-transform sampling for voxel segmentation."
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def command(name, help):
        p = sub.add_parser(name, help=help, description=help)
        p.add_argument("--config", default=None, help="JSON file of option values (default: none)")
        return p

    p = command("synth", "Generate a labelled phantom volume.")
    _add(p, "synth", "--spec", "phantom spec JSON; omit for the sphere/cylinder preset")
    _add(p, "synth", "--seed", "noise seed (overrides the spec's seed)", type=int)
    _add(p, "synth", "--out", "output volume stem (writes <out>.json and <out>.raw)")
    _add(p, "synth", "--labels-out", "label volume stem; <out>_labels when omitted")

    p = command("transform", "Write the cylindrical transform image of one pole.")
    _add(p, "transform", "--volume", "input volume stem")
    _add(p, "transform", "--pole", "pole as u,v,z (row, column, slice)", type=_triple)
    _add(p, "transform", "--ds", "slice step", type=int)
    _add(p, "transform", "--slices", "number of sampled slices (odd)", type=int)
    _add(p, "transform", "--format", "raw (f32 + JSON sidecar) or pgm (16-bit)",
         choices=["raw", "pgm"])
    _add(p, "transform", "--out", "output path stem")

    p = command("sample", "Draw training poles and build a sample pool.")
    _add(p, "sample", "--volume", "input volume stem")
    _add(p, "sample", "--labels", "label volume stem")
    _add(p, "sample", "--ds", "slice step", type=int)
    _add(p, "sample", "--slices", "number of sampled slices (odd)", type=int)
    _add(p, "sample", "--per-class", "poles per class per slice", type=int)
    _add(p, "sample", "--seed", "sampling seed", type=int)
    _add(p, "sample", "--store", "store transform images instead of regenerating them",
         action="store_true")
    _add(p, "sample", "--threads", "worker threads", type=int)
    _add(p, "sample", "--out", "pool directory")

    p = command("train", "Train the softmax classifier on one or more pools.")
    _add(p, "train", "--pool", "training pool directory (repeatable)", action="append")
    _add(p, "train", "--val", "validation pool directory (repeatable); when omitted one "
         "stratified fold of each training pool is held out", action="append")
    _add(p, "train", "--folds", "folds used to carve a validation split", type=int)
    _add(p, "train", "--seed", "shuffle and split seed", type=int)
    _add(p, "train", "--lr", "base learning rate", type=float)
    _add(p, "train", "--epochs", "maximum epochs", type=int)
    _add(p, "train", "--batch", "minibatch size", type=int)
    _add(p, "train", "--l2", "weight decay", type=float)
    _add(p, "train", "--early-stop", "epochs without validation gain before stopping", type=int)
    _add(p, "train", "--gamma", "steepness of the sigmoid learning-rate decay", type=float)
    _add(p, "train", "--pool-rows", "feature grid rows", type=int)
    _add(p, "train", "--pool-cols", "feature grid columns", type=int)
    _add(p, "train", "--threads", "worker threads", type=int)
    _add(p, "train", "--out", "model JSON path (history goes to <out>.history.csv)")

    p = command("segment", "Label every voxel of a volume.")
    _add(p, "segment", "--volume", "input volume stem")
    _add(p, "segment", "--model", "model JSON")
    _add(p, "segment", "--ds", "slice step; taken from the model when omitted", type=int)
    _add(p, "segment", "--slices", "number of sampled slices; taken from the model when omitted",
         type=int)
    _add(p, "segment", "--stride", "in-slice pole stride", type=int)
    _add(p, "segment", "--stride-z", "slice pole stride", type=int)
    _add(p, "segment", "--roi", "region m0,m1,n0,n1,s0,s1 (half-open)", type=_roi)
    _add(p, "segment", "--scores", "also write per-class probability volumes <out>_score<c>",
         action="store_true")
    _add(p, "segment", "--threads", "worker threads", type=int)
    _add(p, "segment", "--out", "output label volume stem")

    p = command("evaluate", "Score a predicted label volume against the truth.")
    _add(p, "evaluate", "--pred", "predicted label volume stem")
    _add(p, "evaluate", "--truth", "ground-truth label volume stem")
    _add(p, "evaluate", "--scores", "score volume stem prefix (<prefix><c>) for ROC/AUC")
    _add(p, "evaluate", "--roc-out", "directory for per-class ROC CSVs")
    _add(p, "evaluate", "--out", "metrics CSV path")

    p = command("bench", "Time shared-table inference against per-pole table rebuilds.")
    _add(p, "bench", "--volume", "input volume stem; random i16 volume when omitted")
    _add(p, "bench", "--model", "model JSON; random weights when omitted")
    _add(p, "bench", "--dims", "S,M,N of the random volume")
    _add(p, "bench", "--seed", "seed for the random volume and model", type=int)
    _add(p, "bench", "--ds", "slice step", type=int)
    _add(p, "bench", "--slices", "number of sampled slices (odd)", type=int)
    _add(p, "bench", "--stride", "in-slice pole stride", type=int)
    _add(p, "bench", "--stride-z", "slice pole stride", type=int)
    _add(p, "bench", "--threads", "worker threads", type=int)
    _add(p, "bench", "--rebuild-limit", "time the rebuild path on this many poles only",
         type=int)
    _add(p, "bench", "--out", "benchmark JSON path")
    return parser


def resolve(args: argparse.Namespace) -> dict:
    """Merge flags over the config file over defaults."""
    cmd = args.command
    cfg = dict(DEFAULTS[cmd])
    if args.config:
        try:
            doc = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise CliError(f"cannot read config {args.config}: {exc}") from None
        if not isinstance(doc, dict):
            raise CliError(f"config {args.config} must hold a JSON object")
        unknown = sorted(set(doc) - set(cfg))
        if unknown:
            raise CliError(f"unknown keys in {args.config}: {', '.join(unknown)}")
        cfg.update(doc)
        if cfg.get("pole") is not None and not isinstance(cfg["pole"], Pole):
            cfg["pole"] = Pole(*cfg["pole"]) if isinstance(cfg["pole"], list) \
                else Pole.parse(str(cfg["pole"]))
        if cfg.get("roi") is not None:
            cfg["roi"] = tuple(int(x) for x in cfg["roi"])
    for key in cfg:
        if key in vars(args):
            cfg[key] = getattr(args, key)
    if "threads" in cfg and cfg["threads"] is None:
        cfg["threads"] = _env_threads()
    if cfg.get("threads") is not None and cfg["threads"] < 1:
        raise CliError("--threads must be >= 1")
    missing = [k for k in REQUIRED[cmd] if cfg.get(k) in (None, [])]
    if missing:
        raise CliError("missing required option(s): "
                       + ", ".join("--" + k.replace("_", "-") for k in missing))
    return cfg


def _record(out: Path, cmd: str, cfg: dict, extra: Optional[dict] = None) -> None:
    doc = {"command": cmd, "version": __version__, "options": _jsonable(cfg)}
    if extra:
        doc.update(_jsonable(extra))
    path = out.with_name(out.name + ".run.json")
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def _stem(path: str) -> Path:
    p = Path(path)
    return p.with_suffix("") if p.suffix in (".json", ".raw") else p


def cmd_synth(cfg: dict) -> None:
    if cfg["spec"]:
        spec = load_spec(cfg["spec"])
        if cfg["seed"] is not None:
            spec = dataclasses.replace(spec, seed=cfg["seed"])
    else:
        cfg["seed"] = 0 if cfg["seed"] is None else cfg["seed"]
        spec = two_circles_spec(cfg["seed"])
    cfg["seed"] = spec.seed
    out = _stem(cfg["out"])
    labels_out = _stem(cfg["labels_out"]) if cfg["labels_out"] else \
        out.with_name(out.name + "_labels")
    cfg["labels_out"] = str(labels_out)
    vol, labels = make_phantom(spec)
    save_volume(vol, out)
    save_volume(labels, labels_out)
    _record(out, "synth", cfg, {"phantom": spec.to_json()})


def cmd_transform(cfg: dict) -> None:
    vol = load_volume(cfg["volume"])
    tcfg = TransformConfig(cfg["ds"], cfg["slices"])
    img = cylindrical_transform(vol, cfg["pole"], tcfg)
    out = Path(cfg["out"])
    if cfg["format"] == "pgm":
        target = out if out.suffix == ".pgm" else out.with_name(out.name + ".pgm")
        target.parent.mkdir(parents=True, exist_ok=True)
        save_pgm(img, target)
    else:
        save_raw(img, out)
    _record(out, "transform", cfg, {"image_shape": list(img.shape)})


def cmd_sample(cfg: dict) -> None:
    vol = load_volume(cfg["volume"])
    labels = load_labels(cfg["labels"])
    tcfg = TransformConfig(cfg["ds"], cfg["slices"])
    samples = sample_poles(labels, cfg["per_class"], cfg["seed"])
    out = Path(cfg["out"])
    pool = build_pool(vol, labels, tcfg, samples, out, store=cfg["store"],
                      volume_id=os.path.relpath(_stem(cfg["volume"]), out), seed=cfg["seed"],
                      threads=cfg["threads"])
    counts = np.bincount(pool.labels, minlength=labels.n_classes) if len(pool) else []
    _record(out / "pool", "sample", cfg, {"samples_per_class": list(counts)})


def cmd_train(cfg: dict) -> None:
    pools = [load_pool(p) for p in cfg["pool"]]
    if cfg["val"]:
        train_pools, val_pools = pools, [load_pool(p) for p in cfg["val"]]
    else:
        train_pools, val_pools = [], []
        for pool in pools:
            folds = split(pool, cfg["folds"], cfg["seed"])
            val_pools.append(folds[0])
            train_pools.extend(folds[1:])
    tcfg = TrainConfig(lr_base=cfg["lr"], epochs=cfg["epochs"], batch=cfg["batch"],
                       l2=cfg["l2"], early_stop_window=cfg["early_stop"], seed=cfg["seed"],
                       gamma=cfg["gamma"])
    fcfg = FeatureConfig(cfg["pool_rows"], cfg["pool_cols"])
    shapes = {p.image_shape for p in concat(train_pools) + concat(val_pools)}
    if len(shapes) != 1:
        raise CliError(f"pools disagree on image shape: {sorted(shapes)}")
    model, history = train(train_pools, val_pools, tcfg, fcfg, threads=cfg["threads"])
    out = Path(cfg["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    save_model(model, out)
    history.to_csv(out.with_name(out.name + ".history.csv"))
    _record(out, "train", cfg, {"train_config": tcfg.__dict__, "history": history.meta})


def _model_transform(model: Model, cfg: dict) -> TransformConfig:
    stored = model.transform or {}
    ds = cfg["ds"] if cfg["ds"] is not None else stored.get("delta_s")
    slices = cfg["slices"] if cfg["slices"] is not None else stored.get("n_slices")
    if ds is None or slices is None:
        raise CliError("model records no transform settings; pass --ds and --slices")
    cfg["ds"], cfg["slices"] = ds, slices
    return TransformConfig(ds, slices)


def cmd_segment(cfg: dict) -> None:
    vol = load_volume(cfg["volume"])
    model = load_model(cfg["model"])
    tcfg = _model_transform(model, cfg)
    icfg = InferenceConfig(cfg["stride"], cfg["stride_z"], cfg["roi"], cfg["scores"])
    seg = segment_volume(vol, model, tcfg, icfg, threads=cfg["threads"])
    out = _stem(cfg["out"])
    save_volume(seg.labels, out)
    if seg.scores is not None:
        for c, vol_c in enumerate(seg.scores):
            save_volume(vol_c, out.with_name(f"{out.name}_score{c}"))
    _record(out, "segment", cfg, {"poles_visited": seg.n_visited})


def cmd_evaluate(cfg: dict) -> None:
    pred = load_labels(cfg["pred"])
    truth = load_labels(cfg["truth"])
    C = max(pred.n_classes, truth.n_classes)
    scores = None
    if cfg["scores"]:
        prefix = str(cfg["scores"])
        scores = [load_volume(f"{prefix}{c}") for c in range(C)]
    report = evaluate(pred, truth, scores, n_classes=C)
    out = Path(cfg["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    report.to_csv(out)
    if cfg["roc_out"]:
        roc_dir = Path(cfg["roc_out"])
        roc_dir.mkdir(parents=True, exist_ok=True)
        for c in sorted(report.roc):
            report.roc_to_csv(roc_dir / f"roc_class{c}.csv", c)
    _record(out, "evaluate", cfg, {"mean_dsc": report.mean_dsc, "accuracy": report.accuracy})


def cmd_bench(cfg: dict) -> None:
    rng = np.random.default_rng(cfg["seed"])
    if cfg["volume"]:
        vol = load_volume(cfg["volume"])
    else:
        try:
            dims = tuple(int(x) for x in str(cfg["dims"]).split(","))
        except ValueError:
            raise CliError(f"--dims must be S,M,N; got {cfg['dims']!r}") from None
        if len(dims) != 3:
            raise CliError(f"--dims must be S,M,N; got {cfg['dims']!r}")
        vol = Volume(rng.integers(0, 1000, dims).astype(np.int16))
    tcfg = TransformConfig(cfg["ds"], cfg["slices"])
    if cfg["model"]:
        model = load_model(cfg["model"])
    else:
        model = Model.zeros(3, FeatureConfig())
        model.weights[:] = rng.normal(size=model.weights.shape) * 1e-2
    icfg = InferenceConfig(cfg["stride"], cfg["stride_z"])
    report = throughput_report(vol, model, tcfg, icfg, threads=cfg["threads"],
                               rebuild_limit=cfg["rebuild_limit"])
    out = Path(cfg["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(report, indent=1) + "\n")
    _record(out, "bench", cfg, {"backend": kernels.NAME})


COMMANDS = {
    "synth": cmd_synth,
    "transform": cmd_transform,
    "sample": cmd_sample,
    "train": cmd_train,
    "segment": cmd_segment,
    "evaluate": cmd_evaluate,
    "bench": cmd_bench,
}

EXPECTED = (CliError, ConfigError, VolumeError, TrainingError, ModelFormatError, OSError,
            ValueError)


def run(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s")
    try:
        cfg = resolve(args)
        COMMANDS[args.command](cfg)
    except EXPECTED as exc:
        print(f"cylseg {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


def main(argv: Optional[List[str]] = None) -> None:
    sys.exit(run(argv))


if __name__ == "__main__":
    main()
