"""Finite-difference verification of every differentiable operation.

Each case builds a scalar ``sum(op(inputs) * R)`` with a fixed random
projection ``R`` and compares the reverse-mode gradient of every input with
central differences. Cases run in float64 and draw inputs away from kinks
(0 for leaky ReLU / absolute values, ties for the max inside lp8).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import BatchNormState, Tensor
from .model import (
    PredNetConfig,
    RefineNetWeights,
    causal_mask,
    forward,
    init_weights,
    refine_batch,
)

STEP = 1e-3
TOLERANCE = 1e-3


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max |a - n| / max(max|a|, max|n|), with a floor that keeps 0/0 at 0."""
    scale = max(float(np.abs(analytic).max(initial=0)), float(np.abs(numeric).max(initial=0)), 1e-10)
    return float(np.abs(analytic - numeric).max(initial=0)) / scale


def numeric_grad(f: Callable[[], float], arr: np.ndarray, h: float = STEP) -> np.ndarray:
    g = np.zeros_like(arr)
    flat = arr.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = f()
        flat[i] = old - h
        down = f()
        flat[i] = old
        gflat[i] = (up - down) / (2 * h)
    return g


def check(build: Callable[[Sequence[Tensor]], Tensor], inputs: Sequence[np.ndarray], rng, h: float = STEP) -> float:
    """Largest relative error over all inputs of ``build``."""
    arrays = [np.array(a, dtype=np.float64) for a in inputs]
    probe = build([Tensor(a) for a in arrays])
    proj = rng.normal(size=probe.shape)

    def value() -> float:
        return float((build([Tensor(a) for a in arrays]).data * proj).sum())

    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    out = build(tensors)
    out.backward(proj.astype(out.data.dtype))
    analytic = [t.grad if t.grad is not None else np.zeros_like(a) for t, a in zip(tensors, arrays)]
    numeric = [numeric_grad(value, a, h) for a in arrays]
    # one scale for all inputs: an input whose true gradient is 0 is judged
    # against the size of the other gradients, not against rounding noise
    return relative_error(np.concatenate([g.ravel() for g in analytic]), np.concatenate([g.ravel() for g in numeric]))


KINK_CLEARANCE = 0.01


def kink_distance(build, inputs) -> float:
    """Smallest |x| fed to any leaky ReLU while evaluating ``build``."""
    seen = [np.inf]
    original = ad.leaky_relu

    def spy(x, slope=0.2):
        seen[0] = min(seen[0], float(np.abs(x.data).min(initial=np.inf)))
        return original(x, slope)

    ad.leaky_relu = spy
    try:
        build([Tensor(np.array(a, dtype=np.float64)) for a in inputs])
    finally:
        ad.leaky_relu = original
    return seen[0]


def check_smooth(build, draw, rng, tries: int = 200) -> float:
    """``check`` on the first draw whose activations all clear the kink by a margin."""
    for _ in range(tries):
        inputs = draw()
        if kink_distance(build, inputs) > KINK_CLEARANCE:
            return check(build, inputs, rng)
    raise RuntimeError("could not draw inputs away from the leaky ReLU kink")


def _away_from_zero(rng, shape, margin=0.05):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * (margin + np.abs(x)), x)


def _bn(channels: int, mode: str, rng) -> Callable[[Sequence[Tensor]], Tensor]:
    def build(ts):
        x, gamma, beta = ts
        st = BatchNormState(gamma, beta, rng_mean.copy(), rng_var.copy(), mode=mode)
        return ad.batchnorm(x, st)

    rng_mean = rng.normal(size=channels)
    rng_var = rng.uniform(0.5, 2.0, size=channels)
    return build


def case_conv2d(rng):
    return check(lambda t: ad.conv2d(*t), [rng.normal(size=(2, 2, 5, 5)), rng.normal(size=(3, 2, 3, 3)), rng.normal(size=3)], rng)


def case_batchnorm_train(rng):
    c = 3
    return check(_bn(c, "train", rng), [rng.normal(size=(2, c, 4, 4)), rng.normal(size=c), rng.normal(size=c)], rng)


def case_batchnorm_eval(rng):
    c = 3
    return check(_bn(c, "eval", rng), [rng.normal(size=(2, c, 4, 4)), rng.normal(size=c), rng.normal(size=c)], rng)


def case_leaky_relu(rng):
    return check(lambda t: ad.leaky_relu(t[0], 0.2), [_away_from_zero(rng, (4, 7))], rng)


def case_linear(rng):
    return check(lambda t: ad.linear(*t), [rng.normal(size=(4, 6)), rng.normal(size=(1, 6)), rng.normal(size=1)], rng)


def _loss_case(objective):
    def case(rng):
        r = _away_from_zero(rng, (6, 1), 0.05)
        if objective == "lp8":
            # keep a clear maximum so the max-factoring stays smooth within h
            i = int(np.argmax(np.abs(r)))
            r[i, 0] = np.sign(r[i, 0]) * (np.abs(r).max() + 0.1)
        return check(lambda t: ad.loss(t[0], objective), [r], rng)

    return case


def case_l1_penalty(rng):
    return check(lambda t: ad.l1_penalty(t[0]), [_away_from_zero(rng, (1, 9))], rng)


def case_elementwise(rng):
    def build(t):
        a, b = t
        return ad.flatten(ad.reshape(ad.scale(ad.sub(ad.add(a, b), b), -1.7), (2, 3, 2)))

    return check(build, [rng.normal(size=(3, 4)), rng.normal(size=(3, 4))], rng)


def case_prednet(rng):
    """Whole stage-one network in train mode, gradient w.r.t. input and head."""
    cfg = PredNetConfig(context_size=5, channels=2, num_residual_units=1)
    w = init_weights(cfg, int(rng.integers(1 << 31)))
    base = {n: np.array(p.data, dtype=np.float64) for n, p in w.parameters().items()}

    def build(t):
        xs, head_w, k1 = t
        for n, p in w.parameters().items():
            p.data = base[n]
        w.head_w, w.units[0].conv1_k = head_w, k1
        return forward(w, xs)

    def draw():
        x = rng.uniform(size=(2, 1, 5, 5)) * causal_mask(5)
        return [x, base["head.w"], rng.normal(size=base["unit0.conv1.k"].shape) * 0.5]

    return check_smooth(build, draw, rng)


def case_refine(rng):
    shapes = [(16, 3), (16,), (16, 16), (16,), (1, 16), (1,)]

    def build(t):
        x, *params = t
        return refine_batch(RefineNetWeights(*params), x)

    def draw():
        return [rng.uniform(size=(3, 3))] + [rng.normal(size=s) * 0.5 for s in shapes]

    return check_smooth(build, draw, rng)


CASES: dict[str, Callable] = {
    "conv2d": case_conv2d,
    "batchnorm_train": case_batchnorm_train,
    "batchnorm_eval": case_batchnorm_eval,
    "leaky_relu": case_leaky_relu,
    "linear": case_linear,
    "loss_l1": _loss_case("l1"),
    "loss_l2": _loss_case("l2"),
    "loss_rms": _loss_case("rms"),
    "loss_lp8": _loss_case("lp8"),
    "l1_penalty": case_l1_penalty,
    "add_sub_scale_reshape": case_elementwise,
    "prednet_forward": case_prednet,
    "refine_forward": case_refine,
}


@dataclass
class GradcheckReport:
    max_error: dict  # op -> worst relative error over seeds
    seeds: int
    tolerance: float

    @property
    def passed(self) -> bool:
        return all(e <= self.tolerance for e in self.max_error.values())

    def lines(self) -> list[str]:
        out = []
        for op, err in self.max_error.items():
            flag = "ok" if err <= self.tolerance else "FAIL"
            out.append(f"{op:24s} max_rel_err={err:.3e} {flag}")
        return out


def run(seed: int = 0, seeds: int = 100, cases: dict = None, tolerance: float = TOLERANCE) -> GradcheckReport:
    cases = CASES if cases is None else cases
    worst = {name: 0.0 for name in cases}
    for s in range(seeds):
        for name, case in cases.items():
            rng = np.random.default_rng([seed, s, sum(map(ord, name))])
            err = case(rng)
            worst[name] = max(worst[name], err if np.isfinite(err) else np.inf)
    return GradcheckReport(worst, seeds, tolerance)
