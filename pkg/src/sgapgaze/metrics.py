"""Training losses and the evaluation analyses (summary, cumulative accuracy, spatial bins, density)."""
from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

DEFAULT_THRESHOLDS = (50, 100, 105, 125, 150, 200, 500)
HD_BIN_EDGES = (0, 183, 366, 549, 732, 915, 1098, 1280)


class ContractViolation(ValueError):
    pass


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 0.7
    lambda2: float = 0.3
    beta: float = 0.02

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("loss weights must be non-negative")
        if self.beta <= 0:
            raise ValueError("beta must be positive")


def _check_unit(x: np.ndarray, what: str) -> None:
    n = np.linalg.norm(x, axis=-1)
    if np.any(np.abs(n - 1.0) > 1e-6):
        raise ContractViolation(f"{what} must be unit vectors (norms {n})")


def direction_loss(g_hat, g, w: LossWeights = LossWeights()) -> Tensor:
    """``lambda1 * (1 - g_hat.g) + lambda2 * |g_hat - g|``, one value per vector.

    For unit vectors ``1 - a.b == |a - b|^2 / 2``; the second form is used because it is
    exactly 0 for identical inputs.
    """
    g_hat = ad.as_tensor(g_hat)
    g = ad.as_tensor(g, dtype=g_hat.dtype)
    _check_unit(g_hat.data, "g_hat")
    _check_unit(g.data, "g")
    d = ad.sub(g_hat, g)
    one_minus_cos = ad.scale(ad.sum_(ad.mul(d, d), axis=-1), 0.5)
    return ad.add(ad.scale(one_minus_cos, w.lambda1), ad.scale(ad.norm(d), w.lambda2))


def pog_loss(p_hat, p, beta: float = 0.02, mode: str = "norm") -> Tensor:
    """Smooth-L1 PoG loss, one value per point.

    ``mode='norm'``: quadratic ``|d|_2^2 / (2 beta)`` when ``|d|_2 < beta``, else ``|d|_1 - beta/2``.
    ``mode='per_coordinate'``: the usual Huber-style loss applied per axis and summed.
    """
    if beta <= 0:
        raise ValueError("beta must be positive")
    p_hat = ad.as_tensor(p_hat)
    d = ad.sub(p_hat, ad.as_tensor(p, dtype=p_hat.dtype))
    if mode == "norm":
        sq = ad.sum_(ad.mul(d, d), axis=-1)
        quad = ad.scale(sq, 1.0 / (2 * beta))
        lin = ad.add(ad.sum_(ad.abs_(d), axis=-1), Tensor(np.full(sq.shape, -beta / 2, dtype=sq.dtype)))
        return ad.where(np.sqrt(sq.data) < beta, quad, lin)
    if mode == "per_coordinate":
        quad = ad.scale(ad.mul(d, d), 1.0 / (2 * beta))
        lin = ad.add(ad.abs_(d), Tensor(np.full(d.shape, -beta / 2, dtype=d.dtype)))
        return ad.sum_(ad.where(np.abs(d.data) < beta, quad, lin), axis=-1)
    raise ValueError(f"unknown smooth_l1 mode {mode!r}")


def angular_error_deg(g_hat, g) -> np.ndarray | float:
    """Angle via atan2(|a x b|, a.b): exact at 0/90/180 and never NaN from rounding."""
    a = np.asarray(g_hat, dtype=np.float64)
    b = np.asarray(g, dtype=np.float64)
    dot = np.sum(a * b, axis=-1)
    out = np.degrees(np.arctan2(np.linalg.norm(np.cross(a, b), axis=-1), dot))
    return float(out) if np.ndim(out) == 0 else out


def pixel_error(p_hat, p, W_img, H_img) -> np.ndarray | float:
    """Euclidean distance in pixels between normalized points."""
    d = np.asarray(p_hat, dtype=np.float64) - np.asarray(p, dtype=np.float64)
    scale = np.stack(np.broadcast_arrays(np.asarray(W_img, float), np.asarray(H_img, float)), axis=-1)
    out = np.linalg.norm(d * scale, axis=-1)
    return float(out) if np.ndim(out) == 0 else out


def normalized_error_pct(mpe: float, W_img: float, H_img: float) -> float:
    return 100.0 * mpe / math.hypot(W_img, H_img)


@dataclass
class CumulativeRow:
    threshold: float
    count: int
    accuracy: float


def cumulative_accuracy(errors: Sequence[float], thresholds: Sequence[float] = DEFAULT_THRESHOLDS) -> list[CumulativeRow]:
    """Share of errors strictly below each threshold, in percent."""
    e = np.asarray(errors, dtype=np.float64)
    if e.size == 0:
        raise ContractViolation("cumulative accuracy of an empty error list")
    return [CumulativeRow(float(t), int(np.sum(e < t)), 100.0 * np.sum(e < t) / e.size) for t in sorted(thresholds)]


def accuracy_from_counts(counts: Sequence[int], n: int) -> list[float]:
    return [100.0 * c / n for c in counts]


@dataclass
class SpatialBin:
    lo: float
    hi: float
    mpe: float | None
    sd: float | None
    count: int
    share: float


def bin_edges(width: float, n_bins: int = 7) -> tuple[float, ...]:
    """Equal x-ranges; the 1280-px case uses fixed rounded integers."""
    if n_bins == 7 and width == 1280:
        return HD_BIN_EDGES
    return tuple(np.linspace(0.0, width, n_bins + 1))


def spatial_bin_errors(gt_x: Sequence[float], errors: Sequence[float], edges: Sequence[float] = HD_BIN_EDGES) -> list[SpatialBin]:
    """Per x-range mean, population SD, count and share; the last bin includes its upper edge."""
    x = np.asarray(gt_x, dtype=np.float64)
    e = np.asarray(errors, dtype=np.float64)
    n = x.size
    rows = []
    for i in range(len(edges) - 1):
        lo, hi = edges[i], edges[i + 1]
        last = i == len(edges) - 2
        m = (x >= lo) & ((x <= hi) if last else (x < hi))
        sel = e[m]
        c = int(sel.size)
        rows.append(
            SpatialBin(
                float(lo), float(hi),
                float(sel.mean()) if c else None,
                float(sel.std()) if c else None,
                c,
                100.0 * c / n if n else 0.0,
            )
        )
    return rows


def gaze_density_heatmap(points, W_img: int, H_img: int, cell: int = 5) -> np.ndarray:
    """Counts per ``cell x cell`` pixel region; border points land in the last row/column."""
    if cell < 1:
        raise ValueError("cell must be >= 1")
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    ny, nx = math.ceil(H_img / cell), math.ceil(W_img / cell)
    inb = (pts[:, 0] >= 0) & (pts[:, 0] <= W_img) & (pts[:, 1] >= 0) & (pts[:, 1] <= H_img)
    pts = pts[inb]
    cx = np.minimum((pts[:, 0] // cell).astype(int), nx - 1)
    cy = np.minimum((pts[:, 1] // cell).astype(int), ny - 1)
    grid = np.zeros((ny, nx), dtype=np.int64)
    np.add.at(grid, (cy, cx), 1)
    return grid


@dataclass
class EvalReport:
    mpe: float
    sd: float
    median: float
    mae_deg: float | None
    normalized_error_pct: float
    mean_norm_error: float
    cumulative: list[CumulativeRow]
    spatial_bins: list[SpatialBin]
    sample_size: int
    image_size: tuple[float, float]
    extras: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def write(self, out_dir: str | os.PathLike) -> list[Path]:
        """summary.csv, cumulative.csv, spatial_bins.csv and report.json."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = [out / "summary.csv", out / "cumulative.csv", out / "spatial_bins.csv", out / "report.json"]
        with open(paths[0], "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["mpe", "sd", "median", "mae_deg", "normalized_error_pct", "mean_norm_error", "sample_size"])
            w.writerow([_fmt(self.mpe), _fmt(self.sd), _fmt(self.median), _fmt(self.mae_deg),
                        _fmt(self.normalized_error_pct), _fmt(self.mean_norm_error), self.sample_size])
        with open(paths[1], "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["threshold", "count", "accuracy"])
            for r in self.cumulative:
                w.writerow([_fmt(r.threshold), r.count, f"{r.accuracy:.2f}"])
        with open(paths[2], "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["range_lo", "range_hi", "mpe", "sd", "count", "share"])
            for b in self.spatial_bins:
                w.writerow([_fmt(b.lo), _fmt(b.hi), _fmt(b.mpe), _fmt(b.sd), b.count, f"{b.share:.2f}"])
        paths[3].write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))
        return paths


def _fmt(v) -> str:
    if v is None:
        return ""
    return repr(float(v))


def summarize(
    pred: np.ndarray,
    gt: np.ndarray,
    image_size: tuple[float, float],
    g_hat: np.ndarray | None = None,
    g: np.ndarray | None = None,
    thresholds: Sequence[float] = DEFAULT_THRESHOLDS,
) -> EvalReport:
    """Aggregate normalized PoG predictions (and optional directions) into a report."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape[0] == 0:
        raise ContractViolation("cannot summarize an empty prediction set")
    W, H = image_size
    err = pixel_error(pred, gt, W, H)
    err = np.atleast_1d(err)
    mpe = float(np.mean(err))
    mae = None if g_hat is None or g is None else float(np.mean(angular_error_deg(g_hat, g)))
    return EvalReport(
        mpe=mpe,
        sd=float(np.std(err)),
        median=float(np.median(err)),
        mae_deg=mae,
        normalized_error_pct=normalized_error_pct(mpe, W, H),
        mean_norm_error=float(np.mean(np.linalg.norm(pred - gt, axis=-1))),
        cumulative=cumulative_accuracy(err, thresholds),
        spatial_bins=spatial_bin_errors(gt[:, 0] * W, err, bin_edges(W)),
        sample_size=int(err.size),
        image_size=(float(W), float(H)),
    )
