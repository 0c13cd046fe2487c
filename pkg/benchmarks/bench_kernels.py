"""Compiled kernels vs the numpy/Python fallback.

Run with ``python benchmarks/bench_kernels.py``. Each kernel is timed on the
same inputs in both backends and the outputs are compared.
"""

from __future__ import annotations

import argparse
import timeit

import numpy as np

from predcode import _pykernels as py

try:
    from predcode import _ckernels as cy
except ImportError:  # extension not built
    cy = None


def cases(rng):
    x = rng.random((64, 11, 11, 8), dtype=np.float32)
    cols = py.im2col3x3(x)
    rows = rng.normal(size=(64 * 121, 8)).astype(np.float32)
    gamma = np.ones(8, np.float32)
    beta = np.zeros(8, np.float32)
    _, xhat, _, _, inv = py.bn_train_forward(rows, gamma, beta, 1e-5)
    flat = rows.ravel().copy()
    img = rng.integers(0, 256, (256, 256), dtype=np.uint8).cumsum(axis=1).astype(np.uint8)
    res = img.astype(np.int16) - np.clip(np.floor(py.gap_predict_image(img) + 0.5), 0, 255).astype(np.int16)
    symbols = (res.ravel().astype(np.int32) + 255)[:20000]
    payload = py.encode_symbols(symbols, 511, 24, 1 << 16)
    blob = rng.integers(0, 256, 1 << 16, dtype=np.uint8).tobytes()
    return {
        "im2col3x3 64x11x11x8": (lambda k: k.im2col3x3(x)),
        "col2im3x3 64x11x11x8": (lambda k: k.col2im3x3(cols, 64, 11, 11, 8)),
        "bn_train_forward 7744x8": (lambda k: k.bn_train_forward(rows, gamma, beta, 1e-5)),
        "bn_train_backward 7744x8": (lambda k: k.bn_train_backward(rows, xhat, gamma, inv)),
        "leaky_relu_forward 62k": (lambda k: k.leaky_relu_forward(flat, 0.2)),
        "gap_predict_image 256x256": (lambda k: k.gap_predict_image(img)),
        "gap_reconstruct 256x256": (lambda k: k.gap_reconstruct(res.astype(np.int32))),
        "encode_symbols 20k": (lambda k: k.encode_symbols(symbols, 511, 24, 1 << 16)),
        "decode_symbols 20k": (lambda k: k.decode_symbols(payload, len(symbols), 511, 24, 1 << 16)),
        "fnv1a64 64KiB": (lambda k: k.fnv1a64(blob)),
    }


def same(a, b) -> bool:
    if isinstance(a, tuple):
        return all(same(x, y) for x, y in zip(a, b))
    if isinstance(a, (bytes, int)):
        return a == b
    a, b = np.asarray(a), np.asarray(b)
    return a.shape == b.shape and np.allclose(a, b, rtol=1e-5, atol=1e-5)


def best_time(fn, repeat: int) -> float:
    number = 1
    while timeit.timeit(fn, number=number) < 0.05 and number < 1 << 16:
        number *= 4
    return min(timeit.repeat(fn, number=number, repeat=repeat)) / number


def main() -> None:
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()
    if cy is None:
        raise SystemExit("compiled extension not available; build with `pip install -e . --no-build-isolation`")
    rng = np.random.default_rng(0)
    print(f"{'kernel':28s} {'python ms':>10s} {'cython ms':>10s} {'speedup':>8s}  match")
    for name, fn in cases(rng).items():
        tp = best_time(lambda: fn(py), args.repeat)
        tc = best_time(lambda: fn(cy), args.repeat)
        print(f"{name:28s} {tp * 1e3:10.3f} {tc * 1e3:10.3f} {tp / tc:8.1f}x  {same(fn(py), fn(cy))}")


if __name__ == "__main__":
    main()
