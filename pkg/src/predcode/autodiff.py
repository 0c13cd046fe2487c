"""Small reverse-mode autodiff engine over numpy arrays.

Only the operators the prediction networks need are provided: 3x3 "same"
convolution, batch normalization, leaky ReLU, affine layers, elementwise
add, flatten, the residual loss family and the l1 weight penalty. Arrays are
float32 unless the caller passes float64 (gradient checks do).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import _backend

DTYPE = np.float32

OBJECTIVES = ("l1", "l2", "lp8")


class ShapeError(ValueError):
    """Operand shapes are incompatible with the operator."""


class Tensor:
    """Dense array node in a computation graph.

    ``data`` holds the values, ``grad`` is filled by :meth:`backward` for every
    node that requires a gradient.
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        name: Optional[str] = None,
        parents: Sequence["Tensor"] = (),
        backward: Optional[Callable[[np.ndarray], None]] = None,
    ):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DTYPE)
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents = tuple(parents)
        self._backward = backward

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, dtype={self.data.dtype})"

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        """Propagate gradients from this node to every ancestor."""
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        if grad is None:
            grad = np.ones_like(self.data)
        self._accumulate(grad)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


def _needs_grad(*tensors: Tensor) -> bool:
    return any(t.requires_grad for t in tensors)


def _result(data, parents, backward) -> Tensor:
    if _needs_grad(*parents):
        return Tensor(data, requires_grad=True, parents=parents, backward=backward)
    return Tensor(data)


# ---------------------------------------------------------------------------
# layers


def _check_conv(x_shape, kernel: Tensor, bias: Tensor, cin: int) -> int:
    cout, kcin, kh, kw = kernel.shape
    if (kh, kw) != (3, 3):
        raise ShapeError(f"conv2d kernel must be 3x3, got {kh}x{kw}")
    if kcin != cin:
        raise ShapeError(f"conv2d input has {cin} channels but kernel expects {kcin}")
    if bias.shape != (cout,):
        raise ShapeError(f"conv2d bias shape {bias.shape} does not match {cout} output channels")
    return cout


def conv2d_nhwc(x: Tensor, kernel: Tensor, bias: Tensor) -> Tensor:
    """3x3 "same" convolution on channels-last data.

    ``x`` is [B, H, W, Cin]; ``kernel`` keeps the [Cout, Cin, 3, 3] layout.
    """
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and kernel, got {x.shape} and {kernel.shape}")
    b, h, w, cin = x.shape
    if h < 1 or w < 1:
        raise ShapeError("conv2d spatial dims must be >= 1")
    cout = _check_conv(x.shape, kernel, bias, cin)

    cols = _backend.im2col3x3(np.ascontiguousarray(x.data))
    kmat = np.ascontiguousarray(kernel.data.transpose(0, 2, 3, 1).reshape(cout, 9 * cin))
    out = cols @ kmat.T
    out += bias.data

    def backward(g: np.ndarray) -> None:
        g2 = g.reshape(b * h * w, cout)
        if kernel.requires_grad:
            kernel._accumulate((g2.T @ cols).reshape(cout, 3, 3, cin).transpose(0, 3, 1, 2))
        if bias.requires_grad:
            bias._accumulate(_backend.column_sums(np.ascontiguousarray(g2)))
        if x.requires_grad:
            x._accumulate(_backend.col2im3x3(np.ascontiguousarray(g2 @ kmat), b, h, w, cin))

    return _result(out.reshape(b, h, w, cout), (x, kernel, bias), backward)


def to_nhwc(x: Tensor) -> Tensor:
    def backward(g: np.ndarray) -> None:
        x._accumulate(g.transpose(0, 3, 1, 2))

    return _result(np.ascontiguousarray(x.data.transpose(0, 2, 3, 1)), (x,), backward)


def to_nchw(x: Tensor) -> Tensor:
    def backward(g: np.ndarray) -> None:
        x._accumulate(g.transpose(0, 2, 3, 1))

    return _result(np.ascontiguousarray(x.data.transpose(0, 3, 1, 2)), (x,), backward)


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor) -> Tensor:
    """3x3 cross-correlation on [B, Cin, H, W], stride 1, zero padding 1."""
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and kernel, got {x.shape} and {kernel.shape}")
    _check_conv(x.shape, kernel, bias, x.shape[1])
    return to_nchw(conv2d_nhwc(to_nhwc(x), kernel, bias))


@dataclass
class BatchNormState:
    """Learned affine parameters plus running statistics of one BN layer."""

    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.9
    eps: float = 1e-5
    mode: str = "train"

    @classmethod
    def create(cls, channels: int, dtype=DTYPE, **kw) -> "BatchNormState":
        return cls(
            gamma=Tensor(np.ones(channels, dtype=dtype), requires_grad=True),
            beta=Tensor(np.zeros(channels, dtype=dtype), requires_grad=True),
            running_mean=np.zeros(channels, dtype=dtype),
            running_var=np.ones(channels, dtype=dtype),
            **kw,
        )


def batchnorm(x: Tensor, state: BatchNormState, channels_last: bool = False) -> Tensor:
    """Per-channel normalization of an NCHW (or NHWC) tensor.

    Train mode uses batch statistics (biased variance) and folds them into the
    running averages as ``running = momentum * running + (1 - momentum) * batch``.
    Eval mode uses the running statistics only.
    """
    if x.data.ndim != 4:
        raise ShapeError(f"batchnorm expects a 4-d input, got {x.shape}")
    if channels_last:
        c = x.shape[3]
        axes, bshape = (0, 1, 2), (1, 1, 1, c)
    else:
        c = x.shape[1]
        axes, bshape = (0, 2, 3), (1, c, 1, 1)
    if state.gamma.shape != (c,):
        raise ShapeError(f"batchnorm state has {state.gamma.shape[0]} channels, input has {c}")
    dt = x.data.dtype
    gamma = state.gamma.data.reshape(bshape)
    beta = state.beta.data.reshape(bshape)

    if state.mode == "eval":
        inv = (1.0 / np.sqrt(state.running_var + state.eps)).astype(dt).reshape(bshape)
        xhat = (x.data - state.running_mean.astype(dt).reshape(bshape)) * inv
        out = gamma * xhat + beta

        def backward_eval(g: np.ndarray) -> None:
            if x.requires_grad:
                x._accumulate(g * (gamma * inv))
            if state.gamma.requires_grad:
                state.gamma._accumulate((g * xhat).sum(axis=axes))
            if state.beta.requires_grad:
                state.beta._accumulate(g.sum(axis=axes))

        return _result(out, (x, state.gamma, state.beta), backward_eval)

    if state.mode != "train":
        raise ValueError(f"unknown batchnorm mode {state.mode!r}")
    n = x.size // c
    if n < 2:
        raise ValueError("batchnorm in train mode needs at least 2 values per channel")
    # batch statistics are computed on a channels-last [N, C] view
    rows = x.data.reshape(n, c) if channels_last else np.ascontiguousarray(np.moveaxis(x.data, 1, -1)).reshape(n, c)
    out, xhat, mean, var, inv = _backend.bn_train_forward(
        np.ascontiguousarray(rows), state.gamma.data.astype(dt), state.beta.data.astype(dt), float(state.eps)
    )
    m = state.momentum
    state.running_mean = (m * state.running_mean + (1 - m) * mean).astype(state.running_mean.dtype)
    state.running_var = (m * state.running_var + (1 - m) * var).astype(state.running_var.dtype)

    def to_layout(a: np.ndarray) -> np.ndarray:
        if channels_last:
            return a.reshape(x.shape)
        b_, _, h_, w_ = x.shape
        return np.ascontiguousarray(a.reshape(b_, h_, w_, c).transpose(0, 3, 1, 2))

    def backward(g: np.ndarray) -> None:
        g_rows = g.reshape(n, c) if channels_last else np.moveaxis(g, 1, -1).reshape(n, c)
        dx, dgamma, dbeta = _backend.bn_train_backward(
            np.ascontiguousarray(g_rows), xhat, state.gamma.data.astype(dt), inv
        )
        if state.gamma.requires_grad:
            state.gamma._accumulate(dgamma)
        if state.beta.requires_grad:
            state.beta._accumulate(dbeta)
        if x.requires_grad:
            x._accumulate(to_layout(dx))

    return _result(to_layout(out), (x, state.gamma, state.beta), backward)


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    """x if x >= 0 else slope * x; the derivative at exactly 0 is taken as 1."""
    data = np.ascontiguousarray(x.data)
    out = _backend.leaky_relu_forward(data.reshape(-1), float(slope)).reshape(x.shape)

    def backward(g: np.ndarray) -> None:
        gx = _backend.leaky_relu_backward(np.ascontiguousarray(g).reshape(-1), data.reshape(-1), float(slope))
        x._accumulate(gx.reshape(x.shape))

    return _result(out, (x,), backward)


def linear(x: Tensor, weights: Tensor, bias: Tensor) -> Tensor:
    """Affine map ``x @ weights.T + bias`` for x of shape [B, N], weights [M, N]."""
    if x.data.ndim != 2 or weights.data.ndim != 2:
        raise ShapeError(f"linear expects 2-d input and weights, got {x.shape} and {weights.shape}")
    if x.shape[1] != weights.shape[1]:
        raise ShapeError(f"linear input width {x.shape[1]} does not match weight width {weights.shape[1]}")
    if bias.shape != (weights.shape[0],):
        raise ShapeError(f"linear bias shape {bias.shape} does not match {weights.shape[0]} outputs")
    out = x.data @ weights.data.T + bias.data

    def backward(g: np.ndarray) -> None:
        if x.requires_grad:
            x._accumulate(g @ weights.data)
        if weights.requires_grad:
            weights._accumulate(g.T @ x.data)
        if bias.requires_grad:
            bias._accumulate(g.sum(axis=0))

    return _result(out, (x, weights, bias), backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add operands differ in shape: {a.shape} vs {b.shape}")

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            a._accumulate(g)
        if b.requires_grad:
            b._accumulate(g)

    return _result(a.data + b.data, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"sub operands differ in shape: {a.shape} vs {b.shape}")

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            a._accumulate(g)
        if b.requires_grad:
            b._accumulate(-g)

    return _result(a.data - b.data, (a, b), backward)


def scale(a: Tensor, factor: float) -> Tensor:
    def backward(g: np.ndarray) -> None:
        a._accumulate(g * factor)

    return _result(a.data * a.data.dtype.type(factor), (a,), backward)


def reshape(x: Tensor, shape: tuple) -> Tensor:
    old = x.shape

    def backward(g: np.ndarray) -> None:
        x._accumulate(g.reshape(old))

    return _result(x.data.reshape(shape), (x,), backward)


def flatten(x: Tensor) -> Tensor:
    shape = x.shape

    def backward(g: np.ndarray) -> None:
        x._accumulate(g.reshape(shape))

    return _result(x.data.reshape(shape[0], -1), (x,), backward)


# ---------------------------------------------------------------------------
# objectives


def loss(residuals: Tensor, objective: str) -> Tensor:
    """Batch loss of a residual column.

    ``l1`` is mean |r|, ``l2`` mean r**2, ``rms`` sqrt(mean r**2) and ``lp8`` is
    (mean |r|**8)**(1/8), evaluated as max|r| * (mean (|r|/max|r|)**8)**(1/8)
    so the eighth power cannot overflow.
    """
    r = residuals.data
    n = r.size
    if n < 1:
        raise ShapeError("loss needs at least one residual")
    r64 = r.astype(np.float64)

    if objective == "l1":
        value = np.abs(r64).mean()
        local = np.sign(r) / n
    elif objective == "l2":
        value = (r64 * r64).mean()
        local = (2.0 / n) * r
    elif objective == "rms":
        value = np.sqrt((r64 * r64).mean())
        local = r / (n * value) if value > 0 else np.zeros_like(r)
    elif objective == "lp8":
        peak = np.abs(r64).max()
        if peak == 0:
            value = 0.0
            local = np.zeros_like(r)
        else:
            value = peak * (((np.abs(r64) / peak) ** 8).mean()) ** 0.125
            local = np.sign(r64) * (np.abs(r64) / value) ** 7 / n
    else:
        raise ValueError(f"unknown objective {objective!r}")

    local = np.asarray(local, dtype=r.dtype)

    def backward(g: np.ndarray) -> None:
        residuals._accumulate(local * g.reshape(()))

    return _result(np.asarray(value, dtype=r.dtype), (residuals,), backward)


def l1_penalty(weights: Tensor) -> Tensor:
    """Sum of absolute values; subgradient sign(w) with 0 at 0."""
    value = np.abs(weights.data.astype(np.float64)).sum()
    sign = np.sign(weights.data)

    def backward(g: np.ndarray) -> None:
        weights._accumulate(sign * g.reshape(()))

    return _result(np.asarray(value, dtype=weights.data.dtype), (weights,), backward)


# ---------------------------------------------------------------------------
# optimizer


class NonFiniteGradient(FloatingPointError):
    pass


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-8
    lr: float = 1e-4

    @classmethod
    def for_params(cls, params: np.ndarray, **kw) -> "AdamState":
        return cls(m=np.zeros_like(params), v=np.zeros_like(params), **kw)


def adam_step(params: np.ndarray, grads: np.ndarray, state: AdamState, name: str = "params") -> np.ndarray:
    """Bias-corrected Adam update, applied in place and returned.

    A block whose gradient is identically zero is left untouched (moments
    included); only the step counter advances.
    """
    if params.shape != state.m.shape or grads.shape != params.shape:
        raise ShapeError(f"adam state/gradient shape mismatch for {name}")
    if not np.all(np.isfinite(grads)):
        raise NonFiniteGradient(f"non-finite gradient in parameter block {name!r}")
    state.t += 1
    if not grads.any():
        return params
    b1, b2 = state.beta1, state.beta2
    state.m *= b1
    state.m += (1 - b1) * grads
    state.v *= b2
    state.v += (1 - b2) * grads * grads
    mhat = state.m / (1 - b1 ** state.t)
    vhat = state.v / (1 - b2 ** state.t)
    params -= (state.lr * mhat / (np.sqrt(vhat) + state.eps)).astype(params.dtype)
    return params


@dataclass
class Adam:
    """Adam over a named set of parameter tensors."""

    params: dict
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-8
    states: dict = field(default_factory=dict)

    def __post_init__(self):
        for name, p in self.params.items():
            self.states[name] = AdamState.for_params(
                p.data, beta1=self.beta1, beta2=self.beta2, eps=self.eps, lr=self.lr
            )

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            adam_step(p.data, g, self.states[name], name=name)
