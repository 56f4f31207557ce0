"""Time the compiled kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 20]
"""
import argparse
import timeit

import numpy as np

from memloc.kernels import _pykernels

try:
    from memloc.kernels import _ckernels
except ImportError:
    _ckernels = None


def cases(rng):
    x = rng.standard_normal((128, 32, 14, 14))
    cols = _pykernels.im2col(x, 3, 3, 1, 1)
    y = rng.standard_normal((128, 32, 28, 28))
    out, idx = _pykernels.maxpool2x2(y)
    g = rng.standard_normal(out.shape)
    return {
        "im2col": lambda m: m.im2col(x, 3, 3, 1, 1),
        "col2im": lambda m: m.col2im(cols, x.shape, 3, 3, 1, 1),
        "maxpool2x2": lambda m: m.maxpool2x2(y),
        "maxpool2x2_backward": lambda m: m.maxpool2x2_backward(g, idx, y.shape),
    }


def main(argv=None):
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args(argv)
    rng = np.random.default_rng(0)
    backends = {"python": _pykernels}
    if _ckernels is not None:
        backends["cython"] = _ckernels
    print(f"{'kernel':<22}" + "".join(f"{b:>12}" for b in backends) + ("     speedup" if len(backends) > 1 else ""))
    for name, fn in cases(rng).items():
        ms = {b: min(timeit.repeat(lambda: fn(m), number=1, repeat=args.repeat)) * 1e3 for b, m in backends.items()}
        row = f"{name:<22}" + "".join(f"{v:>10.2f}ms" for v in ms.values())
        if len(ms) > 1:
            row += f"{ms['python'] / ms['cython']:>11.1f}x"
        print(row)


if __name__ == "__main__":
    main()
