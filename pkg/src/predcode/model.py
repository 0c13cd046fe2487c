"""Prediction network, refinement network and causal context extraction."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import autodiff as ad
from .autodiff import BatchNormState, Tensor

FILL_VALUE = 0.5  # out-of-image samples, normalized units


@dataclass(frozen=True)
class PredNetConfig:
    context_size: int = 21
    channels: int = 32
    num_residual_units: int = 16
    leak_slope: float = 0.2
    objective: str = "l1"

    def __post_init__(self):
        if self.context_size < 3 or self.context_size % 2 == 0:
            raise ValueError(f"context_size must be odd and >= 3, got {self.context_size}")
        if self.channels < 1 or self.num_residual_units < 1:
            raise ValueError("channels and num_residual_units must be >= 1")
        if self.objective not in ad.OBJECTIVES:
            raise ValueError(f"objective must be one of {ad.OBJECTIVES}, got {self.objective!r}")

    @classmethod
    def desk(cls, **kw) -> "PredNetConfig":
        """Reduced configuration used for CPU-scale experiments."""
        base = dict(context_size=11, channels=8, num_residual_units=4)
        base.update(kw)
        return cls(**base)

    @property
    def radius(self) -> int:
        return self.context_size // 2

    @property
    def causal_count(self) -> int:
        """Number of window positions strictly before the center in raster order."""
        return self.radius * self.context_size + self.radius


# ---------------------------------------------------------------------------
# causal context


def causal_mask(context_size: int) -> np.ndarray:
    """1 at raster positions before the window center, 0 at the center and after."""
    flat = np.zeros(context_size * context_size, dtype=ad.DTYPE)
    flat[: (context_size // 2) * context_size + context_size // 2] = 1
    return flat.reshape(context_size, context_size)


@dataclass
class CausalContext:
    window: np.ndarray  # [1, 1, k, k]
    origin: tuple[int, int]  # (x, y)


def pad_image(image: np.ndarray, context_size: int) -> np.ndarray:
    """Normalize to [0, 1] and pad by the context radius with the fill value."""
    r = context_size // 2
    norm = image.astype(ad.DTYPE) / ad.DTYPE(255.0)
    return np.pad(norm, r, mode="constant", constant_values=FILL_VALUE)


def extract_context(image: np.ndarray, x: int, y: int, config: PredNetConfig) -> CausalContext:
    h, w = image.shape
    if not (0 <= x < w and 0 <= y < h):
        raise IndexError(f"pixel ({x}, {y}) outside a {w}x{h} image")
    k = config.context_size
    padded = pad_image(image, k)
    window = padded[y:y + k, x:x + k] * causal_mask(k)
    return CausalContext(window=window.reshape(1, 1, k, k), origin=(x, y))


def gather_contexts(padded: np.ndarray, xs: np.ndarray, ys: np.ndarray, context_size: int) -> np.ndarray:
    """Masked windows [B, 1, k, k] for many centers of one padded image."""
    k = context_size
    windows = sliding_window_view(padded, (k, k))[ys, xs]
    return (windows * causal_mask(k))[:, None, :, :]


# ---------------------------------------------------------------------------
# weights


@dataclass
class ResidualUnit:
    conv1_k: Tensor
    conv1_b: Tensor
    bn1: BatchNormState
    conv2_k: Tensor
    conv2_b: Tensor
    bn2: BatchNormState


@dataclass
class PredNetWeights:
    config: PredNetConfig
    stem_k: Tensor
    stem_b: Tensor
    units: list[ResidualUnit]
    head_w: Tensor  # regression-layer weights w_r, [1, k * k * C] in (row, col, channel) order
    head_b: Tensor

    def parameters(self) -> dict[str, Tensor]:
        """Trainable tensors by name."""
        out = {"stem.k": self.stem_k, "stem.b": self.stem_b}
        for i, u in enumerate(self.units):
            out[f"unit{i}.conv1.k"] = u.conv1_k
            out[f"unit{i}.conv1.b"] = u.conv1_b
            out[f"unit{i}.bn1.gamma"] = u.bn1.gamma
            out[f"unit{i}.bn1.beta"] = u.bn1.beta
            out[f"unit{i}.conv2.k"] = u.conv2_k
            out[f"unit{i}.conv2.b"] = u.conv2_b
            out[f"unit{i}.bn2.gamma"] = u.bn2.gamma
            out[f"unit{i}.bn2.beta"] = u.bn2.beta
        out["head.w"] = self.head_w
        out["head.b"] = self.head_b
        return out

    def arrays(self) -> Iterator[tuple[str, np.ndarray]]:
        """Every stored array, running statistics included, in serialization order."""
        yield "stem.k", self.stem_k.data
        yield "stem.b", self.stem_b.data
        for i, u in enumerate(self.units):
            for tag, conv_k, conv_b, bn in (("1", u.conv1_k, u.conv1_b, u.bn1), ("2", u.conv2_k, u.conv2_b, u.bn2)):
                yield f"unit{i}.conv{tag}.k", conv_k.data
                yield f"unit{i}.conv{tag}.b", conv_b.data
                yield f"unit{i}.bn{tag}.gamma", bn.gamma.data
                yield f"unit{i}.bn{tag}.beta", bn.beta.data
                yield f"unit{i}.bn{tag}.running_mean", bn.running_mean
                yield f"unit{i}.bn{tag}.running_var", bn.running_var
        yield "head.w", self.head_w.data
        yield "head.b", self.head_b.data

    def batchnorms(self) -> list[BatchNormState]:
        return [bn for u in self.units for bn in (u.bn1, u.bn2)]

    def set_mode(self, mode: str) -> "PredNetWeights":
        for bn in self.batchnorms():
            bn.mode = mode
        return self

    def copy(self) -> "PredNetWeights":
        from .weights_io import weights_from_arrays

        return weights_from_arrays(self.config, [a.copy() for _, a in self.arrays()])


def _he(rng: np.random.Generator, shape: tuple, fan_in: int) -> Tensor:
    std = np.sqrt(2.0 / fan_in)
    return Tensor(rng.normal(0.0, std, size=shape).astype(ad.DTYPE), requires_grad=True)


def _zeros(*shape: int) -> Tensor:
    return Tensor(np.zeros(shape, dtype=ad.DTYPE), requires_grad=True)


def init_weights(config: PredNetConfig, seed: int) -> PredNetWeights:
    """He fan-in initialization, zero biases, BN gamma=1 beta=0."""
    rng = np.random.default_rng(seed)
    c, k = config.channels, config.context_size
    units = []
    for _ in range(config.num_residual_units):
        units.append(
            ResidualUnit(
                conv1_k=_he(rng, (c, c, 3, 3), c * 9),
                conv1_b=_zeros(c),
                bn1=BatchNormState.create(c),
                conv2_k=_he(rng, (c, c, 3, 3), c * 9),
                conv2_b=_zeros(c),
                bn2=BatchNormState.create(c),
            )
        )
    return PredNetWeights(
        config=config,
        stem_k=_he(rng, (c, 1, 3, 3), 9),
        stem_b=_zeros(c),
        units=units,
        head_w=_he(rng, (1, c * k * k), c * k * k),
        head_b=_zeros(1),
    )


# ---------------------------------------------------------------------------
# forward passes


def forward(weights: PredNetWeights, contexts) -> Tensor:
    """Prediction per context, shape [B, 1], in normalized units.

    ``contexts`` is a [B, 1, k, k] array/Tensor or a sequence of CausalContext.
    BN layers run in whatever mode ``weights`` is set to.
    """
    if isinstance(contexts, Tensor):
        x = contexts
    elif isinstance(contexts, np.ndarray):
        x = Tensor(contexts)
    else:
        x = Tensor(np.concatenate([c.window for c in contexts], axis=0))
    k = weights.config.context_size
    if x.data.ndim != 4 or x.shape[1:] != (1, k, k):
        raise ad.ShapeError(f"contexts must have shape [B, 1, {k}, {k}], got {x.shape}")

    slope = weights.config.leak_slope
    # channels-last internally; the flattened feature order is (row, col, channel)
    h = ad.conv2d_nhwc(ad.reshape(x, (x.shape[0], k, k, 1)), weights.stem_k, weights.stem_b)
    for u in weights.units:
        y = ad.batchnorm(ad.conv2d_nhwc(h, u.conv1_k, u.conv1_b), u.bn1, channels_last=True)
        y = ad.leaky_relu(y, slope)
        y = ad.batchnorm(ad.conv2d_nhwc(y, u.conv2_k, u.conv2_b), u.bn2, channels_last=True)
        y = ad.leaky_relu(y, slope)
        h = ad.add(h, y)
    return ad.linear(ad.flatten(h), weights.head_w, weights.head_b)


def predict_windows(weights: PredNetWeights, windows: np.ndarray, batch: int = 2048) -> np.ndarray:
    """Eval-mode predictions for a stack of context windows, as float32 [B]."""
    previous = [bn.mode for bn in weights.batchnorms()]
    weights.set_mode("eval")
    try:
        out = np.empty(len(windows), dtype=ad.DTYPE)
        for start in range(0, len(windows), batch):
            chunk = windows[start:start + batch]
            out[start:start + len(chunk)] = forward(weights, chunk).data[:, 0]
        return out
    finally:
        for bn, mode in zip(weights.batchnorms(), previous):
            bn.mode = mode


# ---------------------------------------------------------------------------
# refinement network


@dataclass
class RefineNetWeights:
    """3 -> 16 -> 16 -> 1 perceptron; hidden layers use leaky ReLU."""

    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    w3: Tensor
    b3: Tensor
    leak_slope: float = 0.2

    def parameters(self) -> dict[str, Tensor]:
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2, "w3": self.w3, "b3": self.b3}

    def arrays(self) -> Iterator[tuple[str, np.ndarray]]:
        for name, t in self.parameters().items():
            yield name, t.data

    @property
    def hidden(self) -> int:
        return self.w1.shape[0]

    @classmethod
    def from_arrays(cls, arrays: Sequence[np.ndarray], leak_slope: float = 0.2) -> "RefineNetWeights":
        w1, b1, w2, b2, w3, b3 = (Tensor(np.asarray(a, dtype=ad.DTYPE), requires_grad=True) for a in arrays)
        if w1.shape[1] != 3 or w3.shape[0] != 1:
            raise ad.ShapeError("refinement network must map 3 inputs to 1 output")
        return cls(w1, b1, w2, b2, w3, b3, leak_slope)


def init_refine_weights(seed: int, hidden: int = 16, noise: float = 1e-3) -> RefineNetWeights:
    """Start from the network that returns its first input unchanged.

    Units 0/1 carry +p1 and -p1 through both hidden layers; after two leaky
    ReLUs their difference is ``(1 + slope**2) * p1``. All other weights get small
    random values and can pick up the other two predictions during training.
    """
    rng = np.random.default_rng(seed)
    slope = 0.2
    w1 = rng.normal(0, noise, (hidden, 3))
    w2 = rng.normal(0, noise, (hidden, hidden))
    w3 = rng.normal(0, noise, (1, hidden))
    w1[0, :] = (1, 0, 0)
    w1[1, :] = (-1, 0, 0)
    w2[0, :] = 0
    w2[1, :] = 0
    w2[0, 0] = w2[1, 1] = 1.0
    w3[0, 0] = 1 / (1 + slope**2)
    w3[0, 1] = -1 / (1 + slope**2)
    arrays = [w1, np.zeros(hidden), w2, np.zeros(hidden), w3, np.zeros(1)]
    return RefineNetWeights.from_arrays(arrays, slope)


def refine_batch(weights: RefineNetWeights, triples) -> Tensor:
    x = triples if isinstance(triples, Tensor) else Tensor(np.asarray(triples, dtype=ad.DTYPE))
    s = weights.leak_slope
    h = ad.leaky_relu(ad.linear(x, weights.w1, weights.b1), s)
    h = ad.leaky_relu(ad.linear(h, weights.w2, weights.b2), s)
    return ad.linear(h, weights.w3, weights.b3)


def refine_forward(weights: RefineNetWeights, p1: float, p2: float, pinf: float) -> float:
    return refine_batch(weights, [[p1, p2, pinf]]).item()
