"""Pure Python / numpy implementations of the hot kernels.

Same signatures and bit-identical results as the compiled ``_ckernels``.
"""

from __future__ import annotations

import math

import numpy as np

from . import entropy
from .gap import gap_predict_planes, predict_pixel


def im2col3x3(x: np.ndarray) -> np.ndarray:
    """Zero-padded 3x3 patches of an NHWC array as rows [B*H*W, 9*C].

    Columns are ordered (ky, kx, c).
    """
    b, h, w, c = x.shape
    xp = np.zeros((b, h + 2, w + 2, c), dtype=x.dtype)
    xp[:, 1:-1, 1:-1, :] = x
    cols = np.empty((b, h, w, 9, c), dtype=x.dtype)
    for ky in range(3):
        for kx in range(3):
            cols[:, :, :, ky * 3 + kx, :] = xp[:, ky:ky + h, kx:kx + w, :]
    return cols.reshape(b * h * w, 9 * c)


def col2im3x3(dcols: np.ndarray, b: int, h: int, w: int, c: int) -> np.ndarray:
    """Adjoint of :func:`im2col3x3`: scatter-add rows back to [B, H, W, C]."""
    d = dcols.reshape(b, h, w, 9, c)
    dxp = np.zeros((b, h + 2, w + 2, c), dtype=dcols.dtype)
    for ky in range(3):
        for kx in range(3):
            dxp[:, ky:ky + h, kx:kx + w, :] += d[:, :, :, ky * 3 + kx, :]
    return np.ascontiguousarray(dxp[:, 1:-1, 1:-1, :])


def encode_symbols(symbols, alphabet, increment, limit) -> bytes:
    return entropy.encode_symbols(symbols, alphabet, increment, limit)


def decode_symbols(data, count, alphabet, increment, limit):
    return entropy.decode_symbols(data, count, alphabet, increment, limit)


def gap_predict_image(img: np.ndarray) -> np.ndarray:
    return gap_predict_planes(np.ascontiguousarray(img, dtype=np.uint8))


def gap_reconstruct(residuals: np.ndarray) -> np.ndarray:
    """Invert ``r = x - clamp(round_half_up(gap(x)))`` in raster order."""
    h, w = residuals.shape
    res = residuals.tolist()
    img = [[0] * w for _ in range(h)]
    for y in range(h):
        row = img[y]
        rrow = res[y]
        for x in range(w):
            p = math.floor(predict_pixel(img, x, y) + 0.5)
            p = 0 if p < 0 else (255 if p > 255 else p)
            v = rrow[x] + p
            if v < 0 or v > 255:
                raise ValueError(f"reconstructed sample {v} out of range at ({x}, {y})")
            row[x] = v
    return np.array(img, dtype=np.uint8).reshape(h, w)


def fnv1a64(data: bytes) -> int:
    h = 0xCBF29CE484222325
    for byte in data:
        h ^= byte
        h = (h * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    return h


def bn_train_forward(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, eps: float):
    """Batch statistics over the rows of [N, C]; returns out, xhat, mean, var, inv."""
    mean = x.sum(axis=0, dtype=np.float64) / x.shape[0]
    centered = x - mean.astype(x.dtype)
    var = (centered.astype(np.float64) ** 2).sum(axis=0) / x.shape[0]
    inv = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = centered * inv
    return gamma * xhat + beta, xhat, mean, var, inv


def bn_train_backward(g: np.ndarray, xhat: np.ndarray, gamma: np.ndarray, inv: np.ndarray):
    n = g.shape[0]
    dbeta = g.sum(axis=0, dtype=np.float64)
    dgamma = (g * xhat).sum(axis=0, dtype=np.float64)
    s1 = dbeta.astype(g.dtype)
    s2 = dgamma.astype(g.dtype)
    dx = (gamma * inv / n) * (n * g - s1 - xhat * s2)
    return dx, dgamma.astype(g.dtype), dbeta.astype(g.dtype)


def leaky_relu_forward(x: np.ndarray, slope: float) -> np.ndarray:
    return np.where(x >= 0, x, x * x.dtype.type(slope))


def leaky_relu_backward(g: np.ndarray, x: np.ndarray, slope: float) -> np.ndarray:
    return np.where(x >= 0, g, g * g.dtype.type(slope))


def column_sums(a: np.ndarray) -> np.ndarray:
    return a.sum(axis=0, dtype=np.float64).astype(a.dtype)
