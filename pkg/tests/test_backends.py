"""The numpy fallback and the compiled kernels must agree."""

import os
import subprocess
import sys

import numpy as np
import pytest

from cylseg import _backend, _fallback
from cylseg.classifier import FeatureConfig
from cylseg.transform import build_offset_table

kern = pytest.importorskip("cylseg._kernels")


def poles_for(rng, dims, n):
    S, M, N = dims
    return np.stack([rng.integers(0, M, n), rng.integers(0, N, n), rng.integers(0, S, n)],
                    axis=1).astype(np.int64)


@pytest.mark.parametrize("z,ds,ns,S", [(0, 3, 5, 18), (7, 3, 5, 18), (17, 2, 3, 18), (0, 1, 1, 1)])
def test_slot_slices(z, ds, ns, S):
    assert np.array_equal(kern.slot_slices(z, ds, ns, S), _fallback.slot_slices(z, ds, ns, S))


@pytest.mark.parametrize("dtype", [np.uint8, np.int16, np.float32])
@pytest.mark.parametrize("prefix", [False, True])
def test_transform_into(rng, dtype, prefix):
    dims = (6, 11, 9)
    data = (rng.normal(size=dims) * 80).astype(dtype)
    t = build_offset_table(11, 9)
    for u, v, z in poles_for(rng, dims, 25):
        slots = _fallback.slot_slices(int(z), 2, 5, 6)
        a = np.empty((55, 9), dtype)
        b = np.empty((55, 9), dtype)
        kern.transform_into(data, int(u), int(v), slots, t.dx, t.dy, a, prefix)
        _fallback.transform_into(data, int(u), int(v), slots, t.dx, t.dy, b, prefix)
        assert np.array_equal(a, b)


@pytest.mark.parametrize("dtype", [np.uint8, np.int16, np.float32])
def test_features_batch(rng, dtype):
    dims = (7, 16, 12)
    data = (rng.normal(size=dims) * 80 + 100).astype(dtype)
    t = build_offset_table(16, 12)
    fcfg = FeatureConfig(7, 5)
    rw, cw, counts = fcfg.windows(3 * 16, 12)
    poles = poles_for(rng, dims, 60)
    a = np.empty((60, fcfg.dim))
    b = np.empty((60, fcfg.dim))
    kern.features_batch(data, poles, 3, 3, t.dx, t.dy, rw, cw, counts, a, True)
    _fallback.features_batch(data, poles, 3, 3, t.dx, t.dy, rw, cw, counts, b, True)
    if dtype == np.float32:
        # summation order differs between backends
        assert np.allclose(a, b, rtol=1e-12, atol=1e-9)
    else:
        assert np.array_equal(a, b)
    c = np.empty_like(a)
    kern.features_batch(data, poles, 3, 3, t.dx, t.dy, rw, cw, counts, c, False)
    assert np.array_equal(a, c)


def test_linear_kernels(rng):
    X = rng.normal(size=(40, 13))
    W = rng.normal(size=(3, 13))
    b = rng.normal(size=3)
    mean, std = rng.normal(size=13), rng.uniform(0.5, 2, 13)
    out = {}
    for mod in (kern, _fallback):
        o1 = np.empty((40, 3))
        o2 = np.empty((40, 3))
        mod.linear_into(X, W, b, o1)
        assert mod.standard_linear_into(X, mean, std, W, b, o2)
        out[mod.NAME] = (o1, o2)
    assert np.allclose(out["cython"][0], X @ W.T + b, rtol=1e-12)
    assert np.allclose(out["cython"][0], out["python"][0], rtol=1e-12)
    assert np.allclose(out["cython"][1], out["python"][1], rtol=1e-12)
    X[3, 4] = np.nan
    assert not kern.standard_linear_into(X, mean, std, W, b, np.empty((40, 3)))


def test_backend_selection():
    assert _backend.load("python") is _fallback
    assert _backend.load("cython") is kern
    code = "import cylseg; print(cylseg.BACKEND)"
    env = dict(os.environ, CYLSEG_BACKEND="python")
    res = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True)
    assert res.stdout.strip() == "python"


def test_fallback_pipeline_in_subprocess():
    # the public API end to end on the numpy backend
    code = """
import numpy as np
from cylseg import BACKEND, Volume, Pole, TransformConfig, cylindrical_transform
from cylseg.classifier import FeatureConfig, Model
from cylseg.segmenter import segment_volume
assert BACKEND == "python", BACKEND
v = Volume(np.arange(3 * 8 * 8, dtype=np.int16).reshape(3, 8, 8))
img = cylindrical_transform(v, Pole(2, 3, 1), TransformConfig(1, 3))
m = Model.zeros(2, FeatureConfig(4, 4))
m.bias[:] = [0, 1]
seg = segment_volume(v, m, TransformConfig(1, 3))
print(img.shape, int(seg.labels.data.sum()))
"""
    env = dict(os.environ, CYLSEG_BACKEND="python")
    res = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True)
    assert res.returncode == 0, res.stderr
    assert res.stdout.strip() == "(24, 8) 192"
