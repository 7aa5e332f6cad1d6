"""Cylindrical-transform sampling of 3D volumes for per-voxel segmentation."""

__version__ = "0.1.0"

from ._backend import kernels
from .classifier import (
    FeatureConfig,
    Model,
    TrainConfig,
    load_model,
    predict,
    save_model,
    train,
    volume_features,
)
from .dataset import Pool, PoleSample, build_pool, load_pool, sample_poles, split
from .metrics import confusion, dsc, evaluate, precision_recall_f1, roc_auc
from .segmenter import InferenceConfig, Segmentation, segment_volume, throughput_report
from .synth import Primitive, PhantomSpec, make_phantom, two_circles_spec
from .transform import (
    OffsetTable,
    TransformConfig,
    TransformImage,
    build_offset_table,
    cylindrical_transform,
    radial_transform,
    slice_set,
)
from .volume import LabelVolume, Pole, Volume, VolumeError, load_labels, load_volume, save_volume

BACKEND = kernels.NAME

__all__ = [
    "build_offset_table",
    "build_pool",
    "confusion",
    "cylindrical_transform",
    "dsc",
    "evaluate",
    "FeatureConfig",
    "InferenceConfig",
    "LabelVolume",
    "load_labels",
    "load_model",
    "load_pool",
    "load_volume",
    "make_phantom",
    "Model",
    "OffsetTable",
    "PhantomSpec",
    "Pole",
    "PoleSample",
    "Pool",
    "precision_recall_f1",
    "predict",
    "Primitive",
    "radial_transform",
    "roc_auc",
    "sample_poles",
    "save_model",
    "save_volume",
    "segment_volume",
    "Segmentation",
    "slice_set",
    "split",
    "throughput_report",
    "train",
    "TrainConfig",
    "TransformConfig",
    "TransformImage",
    "two_circles_spec",
    "Volume",
    "volume_features",
    "VolumeError",
    "BACKEND",
    "__version__",
]
