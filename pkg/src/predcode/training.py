"""Patch sampling and the two training stages."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import autodiff as ad
from . import weights_io
from .model import (
    PredNetConfig,
    PredNetWeights,
    RefineNetWeights,
    forward,
    gather_contexts,
    init_refine_weights,
    init_weights,
    pad_image,
    predict_windows,
    refine_batch,
)

TAG_S = "S"
TAG_S_PRIME = "S_prime"


class TrainingAborted(RuntimeError):
    def __init__(self, step: int, message: str):
        super().__init__(f"training aborted at step {step}: {message}")
        self.step = step


class DatasetTagError(ValueError):
    pass


# ---------------------------------------------------------------------------
# data


@dataclass
class PatchDataset:
    """Causal windows with their normalized target pixels.

    ``origins`` rows are (source id, x, y); ``source_ids`` lists the ids of
    every image the samples were drawn from.
    """

    windows: np.ndarray  # float32 [N, 1, k, k]
    targets: np.ndarray  # float32 [N]
    origins: np.ndarray  # int64 [N, 3]
    source_tag: str
    seed: int
    source_ids: tuple = ()

    def __len__(self) -> int:
        return len(self.targets)

    @property
    def context_size(self) -> int:
        return self.windows.shape[-1]


def sample_centers(shapes: Sequence[tuple], count: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform draws over every pixel of every image: rows (image index, x, y)."""
    sizes = np.array([h * w for h, w in shapes], dtype=np.int64)
    if count <= 0:
        raise ValueError(f"patch count must be positive, got {count}")
    if len(sizes) == 0 or sizes.sum() == 0:
        raise ValueError("no pixels to sample from")
    flat = rng.integers(0, sizes.sum(), size=count)
    img = np.searchsorted(np.cumsum(sizes), flat, side="right")
    offset = flat - np.concatenate(([0], np.cumsum(sizes)))[img]
    widths = np.array([w for _, w in shapes], dtype=np.int64)[img]
    ys, xs = np.divmod(offset, widths)
    return np.stack([img, xs, ys], axis=1)


def sample_patches(
    images: Sequence[np.ndarray],
    count: int,
    config: PredNetConfig,
    seed: int,
    tag: str = TAG_S,
    source_ids: Optional[Sequence[int]] = None,
) -> PatchDataset:
    if tag not in (TAG_S, TAG_S_PRIME):
        raise DatasetTagError(f"unknown dataset tag {tag!r}")
    if not images:
        raise ValueError("no images to sample from")
    ids = tuple(range(len(images))) if source_ids is None else tuple(int(i) for i in source_ids)
    if len(ids) != len(images):
        raise ValueError("source_ids must match the number of images")
    rng = np.random.default_rng(seed)
    centers = sample_centers([im.shape for im in images], count, rng)
    k = config.context_size
    windows = np.empty((count, 1, k, k), dtype=ad.DTYPE)
    targets = np.empty(count, dtype=ad.DTYPE)
    for i, im in enumerate(images):
        sel = np.flatnonzero(centers[:, 0] == i)
        if sel.size == 0:
            continue
        xs, ys = centers[sel, 1], centers[sel, 2]
        windows[sel] = gather_contexts(pad_image(im, k), xs, ys, k)
        targets[sel] = im[ys, xs].astype(ad.DTYPE) / ad.DTYPE(255.0)
    origins = centers.copy()
    origins[:, 0] = np.asarray(ids, dtype=np.int64)[centers[:, 0]]
    return PatchDataset(windows, targets, origins, tag, seed, ids)


def check_disjoint(a: PatchDataset, b: PatchDataset) -> None:
    shared = set(a.source_ids) & set(b.source_ids)
    if shared:
        raise DatasetTagError(f"datasets share source images {sorted(shared)}")


# ---------------------------------------------------------------------------
# configuration and traces


@dataclass
class TrainConfig:
    lr: float = 1e-4
    lam: float = 0.2
    batch_size: int = 64
    steps: int = 20000
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-8
    checkpoint_every: int = 0
    checkpoint_dir: Optional[str] = None
    l2_loss: str = "mse"  # training form of the l2 objective: "mse" or "rms"

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if not self.lam >= 0:
            raise ValueError("lambda must be non-negative")
        if self.batch_size < 1 or self.steps < 1:
            raise ValueError("batch_size and steps must be positive")
        if self.checkpoint_every < 0:
            raise ValueError("checkpoint_every must be >= 0")
        if self.l2_loss not in ("rms", "mse"):
            raise ValueError(f"l2_loss must be 'rms' or 'mse', got {self.l2_loss!r}")

    def loss_name(self, objective: str) -> str:
        return self.l2_loss.replace("mse", "l2") if objective == "l2" else objective


@dataclass
class LossTrace:
    rows: list = field(default_factory=list)  # (step, loss, penalty)

    def append(self, step: int, loss: float, penalty: float) -> None:
        self.rows.append((step, loss, penalty))

    def losses(self) -> np.ndarray:
        return np.array([r[1] for r in self.rows], dtype=np.float64)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(("step", "loss", "penalty"))
            for s, l, p in self.rows:
                wr.writerow((s, repr(l), repr(p)))

    @classmethod
    def from_csv(cls, path) -> "LossTrace":
        with open(path, newline="") as fh:
            rd = csv.DictReader(fh)
            return cls([(int(r["step"]), float(r["loss"]), float(r["penalty"])) for r in rd])


def write_checkpoint(weights, path, meta: dict) -> None:
    """PNW1 weights plus a ``.json`` sidecar next to them."""
    path = Path(path)
    weights_io.save_weights(weights, path)
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(meta, indent=2, sort_keys=True))


# ---------------------------------------------------------------------------
# stage 1


def _batches(n: int, config: TrainConfig):
    rng = np.random.default_rng(config.seed + 1)
    while True:
        yield rng.integers(0, n, size=config.batch_size)


def train_stage1(
    dataset: PatchDataset,
    objective: str,
    config: TrainConfig,
    net_config: Optional[PredNetConfig] = None,
    trace: Optional[LossTrace] = None,
    init: Optional[PredNetWeights] = None,
    on_step: Optional[Callable[[int, float], None]] = None,
) -> PredNetWeights:
    """Minimize batch loss + lam * sum|head weights| with Adam.

    ``objective`` is one of l1, l2, lp8 (``linf`` is accepted for lp8).
    """
    if dataset.source_tag != TAG_S:
        raise DatasetTagError(f"stage one trains on an {TAG_S!r} dataset, got {dataset.source_tag!r}")
    if objective == "linf":
        objective = "lp8"
    if objective not in ad.OBJECTIVES:
        raise ValueError(f"unknown objective {objective!r}")
    if net_config is None:
        net_config = init.config if init is not None else PredNetConfig.desk()
    net_config = replace(net_config, objective=objective)
    if net_config.context_size != dataset.context_size:
        raise ad.ShapeError(
            f"dataset windows are {dataset.context_size}x{dataset.context_size}, "
            f"network expects {net_config.context_size}"
        )
    weights = init.copy() if init is not None else init_weights(net_config, config.seed)
    weights.config = net_config
    weights.set_mode("train")
    params = weights.parameters()
    opt = ad.Adam(params, lr=config.lr, beta1=config.beta1, beta2=config.beta2, eps=config.eps)
    loss_name = config.loss_name(objective)
    batches = _batches(len(dataset), config)

    for step in range(1, config.steps + 1):
        idx = next(batches)
        opt.zero_grad()
        pred = forward(weights, dataset.windows[idx])
        resid = ad.sub(pred, ad.Tensor(dataset.targets[idx, None]))
        data_loss = ad.loss(resid, loss_name)
        total = data_loss
        pen_value = 0.0
        if config.lam > 0:
            pen = ad.l1_penalty(weights.head_w)
            pen_value = pen.item()
            total = ad.add(data_loss, ad.scale(pen, config.lam))
        value = data_loss.item()
        if not (math.isfinite(value) and math.isfinite(pen_value)):
            raise TrainingAborted(step, f"non-finite loss {value}")
        total.backward()
        try:
            opt.step()
        except ad.NonFiniteGradient as exc:
            raise TrainingAborted(step, str(exc)) from exc
        if trace is not None:
            trace.append(step, value, pen_value)
        if on_step is not None:
            on_step(step, value)
        if config.checkpoint_every and step % config.checkpoint_every == 0 and config.checkpoint_dir:
            d = Path(config.checkpoint_dir)
            d.mkdir(parents=True, exist_ok=True)
            trace_path = None
            if trace is not None:
                trace_path = d / f"{objective}_trace.csv"
                trace.to_csv(trace_path)
            ck = weights.copy()
            ck.set_mode("eval")
            write_checkpoint(ck, d / f"{objective}_step{step:07d}.pnw", {
                "step": step,
                "objective": objective,
                "dataset_seed": dataset.seed,
                "loss_trace": str(trace_path) if trace_path else None,
            })

    weights.set_mode("eval")
    return weights


@dataclass
class StageOneResult:
    weights_l1: PredNetWeights
    weights_l2: PredNetWeights
    weights_linf: PredNetWeights
    traces: dict = field(default_factory=dict)

    def __post_init__(self):
        cfgs = {replace(w.config, objective="l1") for w in self.nets}
        if len(cfgs) != 1:
            raise ValueError("stage-one networks must share one configuration")

    @property
    def nets(self) -> tuple:
        return (self.weights_l1, self.weights_l2, self.weights_linf)


def train_all_stage1(dataset: PatchDataset, config: TrainConfig, net_config: Optional[PredNetConfig] = None) -> StageOneResult:
    nets, traces = {}, {}
    for obj in ("l1", "l2", "lp8"):
        traces[obj] = LossTrace()
        nets[obj] = train_stage1(dataset, obj, config, net_config, trace=traces[obj])
    return StageOneResult(nets["l1"], nets["l2"], nets["lp8"], traces)


# ---------------------------------------------------------------------------
# stage 2


@dataclass
class RefineDataset:
    triples: np.ndarray  # float32 [N, 3]
    targets: np.ndarray  # float32 [N]

    def __len__(self) -> int:
        return len(self.targets)

    def __iter__(self):
        for t, y in zip(self.triples, self.targets):
            yield (tuple(float(v) for v in t), float(y))


def build_refine_dataset(stage1: StageOneResult, dataset_s_prime: PatchDataset) -> RefineDataset:
    if dataset_s_prime.source_tag != TAG_S_PRIME:
        raise DatasetTagError(
            f"refinement data must be tagged {TAG_S_PRIME!r}, got {dataset_s_prime.source_tag!r}"
        )
    cols = [predict_windows(w, dataset_s_prime.windows) for w in stage1.nets]
    return RefineDataset(np.stack(cols, axis=1).astype(ad.DTYPE), dataset_s_prime.targets.copy())


def train_stage2(
    refine_dataset: RefineDataset,
    config: TrainConfig,
    trace: Optional[LossTrace] = None,
    init: Optional[RefineNetWeights] = None,
) -> RefineNetWeights:
    """Adam on the mean absolute error of the refinement output; no penalty."""
    if len(refine_dataset) == 0:
        raise ValueError("empty refinement dataset")
    weights = init if init is not None else init_refine_weights(config.seed)
    opt = ad.Adam(weights.parameters(), lr=config.lr, beta1=config.beta1, beta2=config.beta2, eps=config.eps)
    batches = _batches(len(refine_dataset), config)
    for step in range(1, config.steps + 1):
        idx = next(batches)
        opt.zero_grad()
        out = refine_batch(weights, refine_dataset.triples[idx])
        loss = ad.loss(ad.sub(out, ad.Tensor(refine_dataset.targets[idx, None])), "l1")
        value = loss.item()
        if not math.isfinite(value):
            raise TrainingAborted(step, f"non-finite loss {value}")
        loss.backward()
        try:
            opt.step()
        except ad.NonFiniteGradient as exc:
            raise TrainingAborted(step, str(exc)) from exc
        if trace is not None:
            trace.append(step, value, 0.0)
    return weights


def config_dict(config) -> dict:
    return asdict(config)
