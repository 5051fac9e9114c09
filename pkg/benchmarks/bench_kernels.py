"""Compare the compiled kernels with their numpy twins.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--csv out.csv]

Each case runs under both backends; outputs are checked for bitwise equality
before timing. The compiled column is blank when the extension is not built.
"""

import argparse
import csv
import sys
import timeit

import numpy as np

from icnet import kernels
from icnet.data import SceneSpec, gen_synthetic_scene
from icnet.model import IcnetConfig, build_model


def _cases(rng):
    w = rng.standard_normal((64, 64 * 9)).astype(np.float32)
    cols = rng.standard_normal((64 * 9, 24 * 24)).astype(np.float32)

    def conv():
        out = np.zeros((64, cols.shape[1]), np.float32)
        kernels.conv_accumulate(w, cols, out)
        return out

    dcols = rng.standard_normal((32, 3, 3, 2, 24, 24))

    def col2im():
        xpad = np.zeros((2, 32, 26, 26))
        kernels.col2im_add(dcols, xpad, 1, 1)
        return xpad

    _, label = gen_synthetic_scene(SceneSpec(height=192, width=192, seed=3))
    lab = label.astype(np.int64)

    def components():
        return kernels.label_components(lab, 255, 4)[1]

    model = build_model(IcnetConfig())
    image = rng.random((1, 3, 96, 96)).astype(np.float32)

    def forward():
        return model.forward_heads(image)[4]

    return {
        "conv_accumulate 64x576x576": conv,
        "col2im_add 32ch 3x3 24x24 n=2": col2im,
        "label_components 192x192": components,
        "icnet forward 96x96": forward,
    }


def _run(fn, backend, repeat):
    kernels.use_backend(backend)
    result = np.asarray(fn())
    t = min(timeit.repeat(fn, number=1, repeat=repeat))
    return result, t


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--csv", metavar="PATH")
    args = ap.parse_args(argv)

    prev = kernels.backend_name()
    rows = []
    try:
        for name, fn in _cases(np.random.default_rng(0)).items():
            py, t_py = _run(fn, "python", args.repeat)
            row = {"case": name, "python_ms": 1e3 * t_py, "compiled_ms": None, "speedup": None, "bitwise": None}
            if kernels.compiled_available():
                c, t_c = _run(fn, "compiled", args.repeat)
                row.update(compiled_ms=1e3 * t_c, speedup=t_py / t_c, bitwise=bool(np.array_equal(py, c)))
            rows.append(row)
    finally:
        kernels.use_backend(prev)

    print(f"{'case':34s} {'python ms':>10s} {'compiled ms':>12s} {'speedup':>8s}  bitwise")
    for r in rows:
        c = "" if r["compiled_ms"] is None else f"{r['compiled_ms']:.2f}"
        s = "" if r["speedup"] is None else f"{r['speedup']:.1f}x"
        print(f"{r['case']:34s} {r['python_ms']:10.2f} {c:>12s} {s:>8s}  {r['bitwise']}")
    if args.csv:
        with open(args.csv, "w", newline="") as f:
            wr = csv.DictWriter(f, fieldnames=list(rows[0]))
            wr.writeheader()
            wr.writerows(rows)
    return 0 if all(r["bitwise"] in (True, None) for r in rows) else 1


if __name__ == "__main__":
    sys.exit(main())
