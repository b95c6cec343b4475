"""Objective terms over rolled-out predictions, and evaluation metrics.

Every L1 term is a per-element mean (rather than a raw sum) so the scale
weights and the TV weight keep their meaning across resolutions. The
ordering-invariant term pairs frame i with frame N-1-i; for odd N the
central frame contributes a single plain L1 term.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .models import PredictionSet, VideoSequence
from .warp import FlowField

MODES = ("reconstruction", "order_invariant")


@dataclass
class LossConfig:
    mu: float = 0.02
    lams: tuple[float, float, float, float] = (0.1, 0.2, 0.4, 1.0)
    mode: str = "reconstruction"

    def __post_init__(self):
        if self.mu < 0:
            raise ValueError(f"mu must be >= 0, got {self.mu}")
        if len(self.lams) != 4 or any(l < 0 for l in self.lams):
            raise ValueError(f"need 4 non-negative scale weights, got {self.lams}")
        if not any(self.lams):
            raise ValueError("at least one scale weight must be positive")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")


def frame_pyramid(frame) -> list[Tensor]:
    """Four-level pyramid (coarse to fine) by successive 2x downsampling."""
    t = frame if isinstance(frame, Tensor) else Tensor(frame)
    levels = [t]
    for _ in range(3):
        levels.append(ad.resize_bilinear(levels[-1], 0.5))
    return levels[::-1]


def _gt_pyramids(gt: VideoSequence) -> list[list[Tensor]]:
    return [frame_pyramid(f) for f in gt.frames]


def _l1(a: Tensor, b: Tensor) -> Tensor:
    return ad.reduce_mean(ad.absolute(ad.subtract(a, b)))


def _check_counts(pred: PredictionSet, gt: VideoSequence) -> None:
    if len(pred.frames) != len(gt.frames):
        raise ValueError(
            f"prediction has {len(pred.frames)} steps, ground truth has "
            f"{len(gt.frames)} frames")


def data_loss_l1(pred: PredictionSet, gt: VideoSequence) -> list[Tensor]:
    """Per-scale reconstruction terms: sum over time of mean |pred - gt|."""
    _check_counts(pred, gt)
    pyrs = _gt_pyramids(gt)
    out = []
    for j in range(4):
        terms = [_l1(pred.frames[n][j], pyrs[n][j])
                 for n in range(len(gt.frames))]
        acc = terms[0]
        for t in terms[1:]:
            acc = ad.add(acc, t)
        out.append(acc)
    return out


def tv_loss(flow) -> Tensor:
    """Anisotropic total variation of a flow field, mean per element."""
    values = flow.values if isinstance(flow, FlowField) else flow
    if not isinstance(values, Tensor):
        values = Tensor(values)
    dx = ad.absolute(ad.spatial_diff(values, "x"))
    dy = ad.absolute(ad.spatial_diff(values, "y"))
    return ad.scale(ad.add(ad.reduce_sum(dx), ad.reduce_sum(dy)),
                    1.0 / values.size)


def order_invariant_loss(pred: PredictionSet, gt: VideoSequence,
                         scale: int) -> Tensor:
    """Pairwise sum/difference L1 term at one scale, blind to temporal
    reversal of the prediction."""
    _check_counts(pred, gt)
    if not 0 <= scale < 4:
        raise ValueError(f"scale index must be in [0,4), got {scale}")
    pyrs = _gt_pyramids(gt)
    n = len(gt.frames)
    terms = []
    for i in range(n // 2):
        k = n - 1 - i
        ps, gs = pred.frames, pyrs
        sum_pred = ad.absolute(ad.add(ps[i][scale], ps[k][scale]))
        sum_gt = ad.absolute(ad.add(gs[i][scale], gs[k][scale]))
        diff_pred = ad.absolute(ad.subtract(ps[i][scale], ps[k][scale]))
        diff_gt = ad.absolute(ad.subtract(gs[i][scale], gs[k][scale]))
        terms.append(_l1(sum_pred, sum_gt))
        terms.append(_l1(diff_pred, diff_gt))
    if n % 2:
        c = n // 2
        terms.append(_l1(pred.frames[c][scale], pyrs[c][scale]))
    acc = terms[0]
    for t in terms[1:]:
        acc = ad.add(acc, t)
    return acc


def total_loss(pred: PredictionSet, gt: VideoSequence,
               cfg: LossConfig) -> tuple[Tensor, dict[str, float]]:
    """Weighted multi-scale objective: data terms plus mu-weighted TV of
    every rolled-out flow. Returns the scalar and detached components."""
    if cfg.mode == "reconstruction":
        data_terms = data_loss_l1(pred, gt)
    else:
        data_terms = [order_invariant_loss(pred, gt, j) for j in range(4)]
    total = None
    data_val = 0.0
    tv_val = 0.0
    for j, lam in enumerate(cfg.lams):
        if lam == 0.0:
            continue
        term = data_terms[j]
        data_val += lam * float(term.data)
        if cfg.mu > 0:
            for pyr in pred.flows:
                t = tv_loss(pyr.levels[j])
                tv_val += lam * cfg.mu * float(t.data)
                term = ad.add(term, ad.scale(t, cfg.mu))
        term = ad.scale(term, lam)
        total = term if total is None else ad.add(total, term)
    return total, {"data": data_val, "tv": tv_val}


def psnr(a, b) -> float:
    """10*log10(1/MSE) for [0,1] images; +inf for identical inputs."""
    ad_ = a.data if isinstance(a, Tensor) else np.asarray(a)
    bd = b.data if isinstance(b, Tensor) else np.asarray(b)
    if ad_.shape != bd.shape:
        raise ValueError(f"psnr: shape mismatch {ad_.shape} vs {bd.shape}")
    mse = float(np.mean((ad_.astype(np.float64) - bd.astype(np.float64)) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)
