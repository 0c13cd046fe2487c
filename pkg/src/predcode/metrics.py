"""Residual maps and the measures reported for each predictor."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .imageio import write_pgm
from .predictors import PredictionMap

PATCH = 16
STRIDE = 8
CSV_COLUMNS = ("image", "predictor", "l1", "l2", "linf", "entropy", "rho_max")


def residuals(image: np.ndarray, prediction: PredictionMap) -> np.ndarray:
    """x - clamp(round_half_up(prediction)) as int16, same shape as the image."""
    img = np.asarray(image)
    if img.shape != prediction.shape:
        raise ValueError(f"image shape {img.shape} does not match prediction shape {prediction.shape}")
    return img.astype(np.int16) - prediction.quantized()


def entropy(residual_map: np.ndarray) -> float:
    """Zeroth-order empirical entropy in bits per sample."""
    r = np.asarray(residual_map).ravel()
    if r.size == 0:
        raise ValueError("entropy of an empty map")
    counts = np.bincount(r.astype(np.int64) + 255)
    counts = counts[counts > 0]
    if counts.size == 1:
        return 0.0
    p = counts / r.size
    return float(-(p * np.log2(p)).sum())


def histogram(residual_map: np.ndarray) -> dict[int, int]:
    values, counts = np.unique(np.asarray(residual_map).ravel(), return_counts=True)
    return {int(v): int(c) for v, c in zip(values, counts)}


def rho_max(image: np.ndarray, residual_map: np.ndarray, patch: int = PATCH, stride: int = STRIDE) -> float:
    """Largest absolute Pearson correlation between co-located image and residual patches.

    Windows where either patch has zero variance are skipped; 0.0 if all are.
    """
    img = np.asarray(image, dtype=np.float64)
    res = np.asarray(residual_map, dtype=np.float64)
    if img.shape != res.shape:
        raise ValueError("image and residual map differ in shape")
    h, w = img.shape
    if h < patch or w < patch:
        raise ValueError(f"image {w}x{h} is smaller than one {patch}x{patch} patch")
    view = np.lib.stride_tricks.sliding_window_view
    a = view(img, (patch, patch))[::stride, ::stride].reshape(-1, patch * patch)
    b = view(res, (patch, patch))[::stride, ::stride].reshape(-1, patch * patch)
    a = a - a.mean(axis=1, keepdims=True)
    b = b - b.mean(axis=1, keepdims=True)
    saa = (a * a).sum(axis=1)
    sbb = (b * b).sum(axis=1)
    ok = (saa > 1e-12 * patch * patch) & (sbb > 1e-12 * patch * patch)
    if not ok.any():
        return 0.0
    rho = np.abs((a[ok] * b[ok]).sum(axis=1)) / np.sqrt(saa[ok] * sbb[ok])
    return float(min(1.0, rho.max()))


@dataclass
class ResidualStats:
    l1: float
    l2: float
    linf: float
    entropy: float
    rho_max: float


def stats(residual_map: np.ndarray, image: np.ndarray) -> ResidualStats:
    r = np.asarray(residual_map, dtype=np.float64)
    if r.size == 0:
        raise ValueError("stats of an empty residual map")
    a = np.abs(r)
    try:
        rho = rho_max(image, residual_map)
    except ValueError:
        rho = float("nan")  # image smaller than one patch
    return ResidualStats(
        l1=float(a.mean()),
        l2=float(math.sqrt((r * r).mean())),
        linf=float(a.max()),
        entropy=entropy(residual_map),
        rho_max=rho,
    )


def export_residual_pgm(residual_map: np.ndarray, path) -> None:
    """Residuals as a viewable graymap: clamp(r + 128, 0, 255)."""
    r = np.asarray(residual_map, dtype=np.int32)
    write_pgm(np.clip(r + 128, 0, 255).astype(np.uint8), path)


@dataclass
class ReportRow:
    image: str
    predictor: str
    stats: ResidualStats


def mean_stats(rows: Sequence[ReportRow]) -> ResidualStats:
    """Per-image values averaged over the set (NaN rho entries ignored)."""
    if not rows:
        raise ValueError("empty report")
    fields = {}
    for name in ("l1", "l2", "linf", "entropy", "rho_max"):
        vals = np.array([getattr(r.stats, name) for r in rows], dtype=np.float64)
        finite = vals[np.isfinite(vals)]
        fields[name] = float(math.fsum(finite) / finite.size) if finite.size else float("nan")
    return ResidualStats(**fields)


def aggregate_report(rows: Sequence[ReportRow], fmt: str = "csv", residual_maps: Sequence[np.ndarray] = ()) -> str:
    """CSV (per-image rows plus a ``mean`` row) or JSON with pooled extras.

    For JSON, ``residual_maps`` (aligned with ``rows``) supplies the pooled
    entropy and the residual histogram.
    """
    rows = list(rows)
    mean = mean_stats(rows)
    predictor = rows[0].predictor if len({r.predictor for r in rows}) == 1 else "mixed"
    if fmt == "csv":
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(CSV_COLUMNS)
        for r in rows + [ReportRow("mean", predictor, mean)]:
            s = r.stats
            wr.writerow([r.image, r.predictor] + [repr(float(v)) for v in (s.l1, s.l2, s.linf, s.entropy, s.rho_max)])
        return buf.getvalue()
    if fmt == "json":
        doc = {
            "columns": list(CSV_COLUMNS),
            "rows": [{"image": r.image, "predictor": r.predictor, **asdict(r.stats)} for r in rows],
            "mean": {"image": "mean", "predictor": predictor, **asdict(mean)},
        }
        if residual_maps:
            pooled = np.concatenate([np.asarray(m).ravel() for m in residual_maps])
            doc["pooled_entropy"] = entropy(pooled)
            doc["histogram"] = {str(k): v for k, v in histogram(pooled).items()}
        return json.dumps(doc, indent=2, allow_nan=True)
    raise ValueError(f"unknown report format {fmt!r}")


def write_report(text: str, path) -> None:
    Path(path).write_text(text)
