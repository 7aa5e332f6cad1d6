"""Compare the compiled kernels with the numpy fallback.

Times the single-pole transform, fused feature extraction over a pole batch,
and whole-volume inference with a shared offset table versus one rebuilt per
pole. Prints a JSON record; ``--out`` also writes it to a file.

    python3 benchmarks/bench_backends.py --dims 9,64,64 --poles 2000
"""

import argparse
import json
import platform
import time

import numpy as np

from cylseg import _fallback
from cylseg.classifier import CHUNK, FeatureConfig, Model
from cylseg.segmenter import throughput_report
from cylseg.transform import TransformConfig, shared_offset_table
from cylseg.volume import Volume

try:
    from cylseg import _kernels
except ImportError:  # extension not built
    _kernels = None


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def bench_backend(mod, vol, poles, tcfg, fcfg, repeat):
    S, M, N = vol.dims
    table = shared_offset_table(M, N)
    row_win, col_win, counts = fcfg.windows(tcfg.n_slices * M, N)
    img = np.empty((tcfg.n_slices * M, N), dtype=vol.data.dtype)
    u, v, z = (int(x) for x in poles[len(poles) // 2])
    slots = np.asarray(mod.slot_slices(z, tcfg.delta_s, tcfg.n_slices, S), dtype=np.int64)

    def one_transform():
        mod.transform_into(vol.data, u, v, slots, table.dx, table.dy, img, table.monotone)

    out = np.empty((len(poles), fcfg.dim))

    def features():
        for s in range(0, len(poles), CHUNK):
            mod.features_batch(vol.data, poles[s:s + CHUNK], tcfg.delta_s, tcfg.n_slices,
                               table.dx, table.dy, row_win, col_win, counts,
                               out[s:s + CHUNK], table.monotone)

    t_img = best_of(one_transform, repeat * 10)
    t_feat = best_of(features, repeat)
    return {
        "transform_us": t_img * 1e6,
        "features_poles_per_s": len(poles) / t_feat,
        "features": out.copy(),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0],
                                 formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    ap.add_argument("--dims", default="9,64,64", help="S,M,N of the random i16 volume")
    ap.add_argument("--poles", type=int, default=2000, help="poles timed per backend")
    ap.add_argument("--ds", type=int, default=3)
    ap.add_argument("--slices", type=int, default=5)
    ap.add_argument("--repeat", type=int, default=3, help="best-of repeats")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default=None, help="also write the JSON record here")
    args = ap.parse_args()

    rng = np.random.default_rng(args.seed)
    dims = tuple(int(x) for x in args.dims.split(","))
    vol = Volume(rng.integers(0, 1000, dims).astype(np.int16))
    S, M, N = dims
    poles = np.stack([rng.integers(0, M, args.poles), rng.integers(0, N, args.poles),
                      rng.integers(0, S, args.poles)], axis=1).astype(np.int64)
    tcfg = TransformConfig(args.ds, args.slices)
    fcfg = FeatureConfig(min(40, tcfg.n_slices * M), min(16, N))

    record = {"python": platform.python_version(), "dims": list(dims), "poles": args.poles,
              "transform": tcfg.to_json(), "backends": {}}
    results = {}
    for mod in filter(None, (_kernels, _fallback)):
        res = bench_backend(mod, vol, poles, tcfg, fcfg, args.repeat)
        results[mod.NAME] = res.pop("features")
        record["backends"][mod.NAME] = res
    if _kernels is not None:
        c, p = record["backends"]["cython"], record["backends"]["python"]
        record["compiled_speedup"] = {
            "transform": p["transform_us"] / c["transform_us"],
            "features": c["features_poles_per_s"] / p["features_poles_per_s"],
        }
        record["features_agree"] = bool(np.allclose(results["cython"], results["python"],
                                                    rtol=1e-12, atol=0))

    model = Model.zeros(3, fcfg)
    model.weights[:] = rng.normal(size=model.weights.shape) * 1e-2
    rep = throughput_report(vol, model, tcfg)
    record["inference"] = {k: rep[k] for k in ("backend", "poles", "poles_per_s",
                                               "rebuild_poles_per_s", "speedup",
                                               "labels_agree")}
    text = json.dumps(record, indent=1)
    print(text)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text + "\n")


if __name__ == "__main__":
    main()
