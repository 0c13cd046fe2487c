"""Whole-image causal prediction with the classical and learned predictors.

Every predictor maps an 8-bit image to a :class:`PredictionMap`. Baselines
predict in 8-bit units, the networks in normalized units; ``quantized()``
turns either into the integer prediction the residuals are taken against.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterator, Optional

import numpy as np

from . import _backend
from . import autodiff as ad
from . import weights_io
from .model import PredNetWeights, RefineNetWeights, gather_contexts, pad_image, predict_windows, refine_batch

LEFT_FIRST_COLUMN = 128


class PredictionError(ArithmeticError):
    """A predictor produced a value that cannot be quantized."""


def round_half_up(v: np.ndarray) -> np.ndarray:
    return np.floor(np.asarray(v, dtype=np.float64) + 0.5)


def quantize(values: np.ndarray, normalized: bool) -> np.ndarray:
    """clamp(round_half_up(v), 0, 255) with v scaled by 255 for network outputs."""
    v = np.asarray(values, dtype=np.float64)
    if normalized:
        v = v * 255.0
    bad = ~np.isfinite(v)
    if bad.any():
        y, x = np.argwhere(bad)[0] if v.ndim == 2 else (0, int(np.argmax(bad)))
        raise PredictionError(f"non-finite prediction at pixel ({x}, {y})")
    return np.clip(round_half_up(v), 0, 255).astype(np.int16)


@dataclass
class PredictionMap:
    values: np.ndarray  # float64 [H, W]
    predictor: str
    normalized: bool

    @property
    def shape(self) -> tuple:
        return self.values.shape

    def quantized(self) -> np.ndarray:
        return quantize(self.values, self.normalized)


class Predictor:
    name = ""
    pid = -1
    normalized = False

    def predict_image(self, image: np.ndarray) -> PredictionMap:
        raise NotImplementedError

    def checksum(self) -> int:
        return 0


class LeftPredictor(Predictor):
    """Copy of the west neighbor; column 0 is predicted as 128."""

    name = "left"
    pid = 0

    def predict_image(self, image):
        img = _as_image(image)
        p = np.empty(img.shape, dtype=np.float64)
        p[:, 0] = LEFT_FIRST_COLUMN
        p[:, 1:] = img[:, :-1]
        return PredictionMap(p, self.name, False)


class GapPredictor(Predictor):
    name = "gap"
    pid = 1

    def predict_image(self, image):
        img = _as_image(image)
        return PredictionMap(np.asarray(_backend.gap_predict_image(img), dtype=np.float64), self.name, False)


class PredNetPredictor(Predictor):
    name = "prednet"
    pid = 2
    normalized = True

    def __init__(self, weights: PredNetWeights, batch: int = 4096):
        self.weights = weights
        self.batch = batch

    @property
    def context_size(self) -> int:
        return self.weights.config.context_size

    def predict_windows(self, windows: np.ndarray) -> np.ndarray:
        return predict_windows(self.weights, windows, batch=self.batch)

    def predict_image(self, image):
        img = _as_image(image)
        h, w = img.shape
        k = self.context_size
        padded = pad_image(img, k)
        out = np.empty(h * w, dtype=np.float64)
        ys, xs = np.divmod(np.arange(h * w), w)
        for start in range(0, h * w, self.batch):
            sl = slice(start, start + self.batch)
            out[sl] = self.predict_windows(gather_contexts(padded, xs[sl], ys[sl], k))
        return PredictionMap(out.reshape(h, w), self.name, True)

    def checksum(self) -> int:
        return weights_io.checksum(self.weights)


class RefinedPredictor(PredNetPredictor):
    """Three stage-one networks fused by the refinement network."""

    name = "prednet-r"
    pid = 3

    def __init__(self, nets: tuple, refine: RefineNetWeights, batch: int = 4096):
        if len(nets) != 3:
            raise ValueError("the refined predictor needs exactly three stage-one networks")
        sizes = {n.config.context_size for n in nets}
        if len(sizes) != 1:
            raise ValueError("stage-one networks must share one context size")
        self.nets = tuple(nets)
        self.refine = refine
        self.batch = batch
        self.weights = nets[0]

    def triples(self, windows: np.ndarray) -> np.ndarray:
        return np.stack([predict_windows(n, windows, batch=self.batch) for n in self.nets], axis=1)

    def predict_windows(self, windows):
        return refine_batch(self.refine, self.triples(windows)).data[:, 0]

    def checksum(self) -> int:
        payload = b"".join(weights_io.payload_bytes(n) for n in self.nets)
        return weights_io.fnv1a64(payload + weights_io.payload_bytes(self.refine))


PREDICTOR_IDS = {"left": 0, "gap": 1, "prednet": 2, "prednet-r": 3}


def make_predictor(name: str, weights=None, refine: Optional[RefineNetWeights] = None) -> Predictor:
    """Build a predictor by name; ``prednet_r``/``prednet-r`` are synonyms."""
    key = name.replace("_", "-")
    if key == "left":
        return LeftPredictor()
    if key == "gap":
        return GapPredictor()
    if key == "prednet":
        if weights is None:
            raise ValueError("the prednet predictor needs weights")
        if isinstance(weights, (list, tuple)):
            weights = weights[0]
        return PredNetPredictor(weights)
    if key == "prednet-r":
        if weights is None or refine is None:
            raise ValueError("the prednet-r predictor needs three networks and refinement weights")
        return RefinedPredictor(tuple(weights), refine)
    raise ValueError(f"unknown predictor {name!r}")


def predict_image(image: np.ndarray, predictor) -> PredictionMap:
    if isinstance(predictor, str):
        predictor = make_predictor(predictor)
    return predictor.predict_image(image)


def _as_image(image) -> np.ndarray:
    img = np.asarray(image)
    if img.ndim != 2 or img.size == 0:
        raise ValueError(f"expected a non-empty 2-d image, got shape {img.shape}")
    if img.dtype != np.uint8:
        if img.min() < 0 or img.max() > 255:
            raise ValueError("image samples must lie in [0, 255]")
        img = img.astype(np.uint8)
    return np.ascontiguousarray(img)


# ---------------------------------------------------------------------------
# wavefront schedule for sequential network prediction


def wavefront(height: int, width: int, radius: int) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Groups of pixels that can be predicted together, in dependency order.

    Pixel (x, y) goes to wave ``x + (radius + 1) * y``: every causal sample in
    its window (row y left of x, or rows above up to column x + radius) lies in
    an earlier wave.
    """
    step = radius + 1
    last = (width - 1) + step * (height - 1)
    for t in range(last + 1):
        y_hi = min(height - 1, t // step)
        y_lo = max(0, math.ceil((t - (width - 1)) / step))
        if y_lo > y_hi:
            continue
        ys = np.arange(y_lo, y_hi + 1)
        yield t - step * ys, ys


def sequential_predictions(
    predictor: PredNetPredictor,
    height: int,
    width: int,
    image: Optional[np.ndarray] = None,
    residuals: Optional[np.ndarray] = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Quantized network predictions computed wave by wave.

    With ``image`` given, every wave reads the finished image (encoder side).
    With ``residuals`` given, each wave's pixels are reconstructed before the
    next wave runs (decoder side). Both paths feed identical batches to the
    network, so the predictions agree bit for bit. Returns (predictions, image).
    """
    k = predictor.context_size
    r = k // 2
    if image is not None:
        img = _as_image(image)
        padded = pad_image(img, k)
    else:
        if residuals is None:
            raise ValueError("need either an image or a residual map")
        img = np.zeros((height, width), dtype=np.uint8)
        padded = pad_image(img, k)
    preds = np.empty((height, width), dtype=np.int16)
    scale = ad.DTYPE(255.0)
    for xs, ys in wavefront(height, width, r):
        p = quantize(predictor.predict_windows(gather_contexts(padded, xs, ys, k)), True)
        preds[ys, xs] = p
        if image is None:
            v = residuals[ys, xs].astype(np.int32) + p
            if v.min() < 0 or v.max() > 255:
                i = int(np.argmax((v < 0) | (v > 255)))
                raise ValueError(f"reconstructed sample {int(v[i])} out of range at ({xs[i]}, {ys[i]})")
            img[ys, xs] = v
            padded[ys + r, xs + r] = v.astype(ad.DTYPE) / scale
    return preds, img
