"""Photometric, depth, patch DSSIM and patch depth-smoothness losses.

Each loss returns ``(value, adjoint)`` where the adjoint is dLoss/dprediction
with the same shape as the prediction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import EmptyBatch, NonFiniteLoss, PatchTooSmall

SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


@dataclass(frozen=True)
class LossWeights:
    lambda_c: float = 1.0
    lambda_d: float = 20.0
    lambda_ssim: float = 0.1
    lambda_ds: float = 0.0001

    def __post_init__(self):
        for name in ("lambda_c", "lambda_d", "lambda_ssim", "lambda_ds"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")

    def as_dict(self):
        return {"c": self.lambda_c, "d": self.lambda_d, "ssim": self.lambda_ssim, "ds": self.lambda_ds}


@dataclass(frozen=True)
class PatchSpec:
    size: int = 8
    per_frame: float = 4.0  # expected patches per camera frame per epoch

    def __post_init__(self):
        if self.size < 2:
            raise PatchTooSmall("patch size must be at least 2")


def color_loss(pred, gt):
    pred = np.asarray(pred, dtype=float).reshape(-1, 3)
    gt = np.asarray(gt, dtype=float).reshape(-1, 3)
    n = len(pred)
    if n == 0:
        raise EmptyBatch("no color rays")
    r = pred - gt
    return float((r * r).sum() / n), 2.0 * r / n


def depth_loss(pred, gt, mask=None):
    pred = np.asarray(pred, dtype=float)
    gt = np.asarray(gt, dtype=float)
    mask = np.ones(pred.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    n = int(mask.sum())
    if n == 0:
        raise EmptyBatch("no valid depth returns")
    r = np.where(mask, pred - np.where(mask, gt, 0.0), 0.0)
    return float((r * r).sum() / n), 2.0 * r / n


def _as_patches(p):
    """Normalize to ``(P, h, w, C)``; accepts ``(h, w)``, ``(h, w, C)`` or batched."""
    p = np.asarray(p, dtype=float)
    if p.ndim == 2:
        return p[None, :, :, None]
    if p.ndim == 3:
        return p[None]
    return p


def dssim_loss(pred_patch, gt_patch):
    """``(1 - SSIM) / 2`` with one uniform window spanning each patch.

    SSIM is averaged over channels and, for batched input, over patches.
    """
    shape = np.shape(pred_patch)
    x = _as_patches(pred_patch)
    y = _as_patches(gt_patch)
    if x.shape != y.shape:
        raise ValueError("patch shapes differ")
    if x.shape[1] < 2 or x.shape[2] < 2:
        raise PatchTooSmall("DSSIM needs at least 2x2 patches")
    P, h, w, C = x.shape
    n = h * w
    mx = x.mean(axis=(1, 2), keepdims=True)
    my = y.mean(axis=(1, 2), keepdims=True)
    dx = x - mx
    dy = y - my
    vx = (dx * dx).mean(axis=(1, 2), keepdims=True)
    vy = (dy * dy).mean(axis=(1, 2), keepdims=True)
    cov = (dx * dy).mean(axis=(1, 2), keepdims=True)
    a1 = 2 * mx * my + SSIM_C1
    a2 = 2 * cov + SSIM_C2
    b1 = mx * mx + my * my + SSIM_C1
    b2 = vx + vy + SSIM_C2
    ssim = a1 * a2 / (b1 * b2)
    value = float((1.0 - ssim.mean()) / 2.0)
    d_ssim = ssim * (2 * my / (n * a1) + 2 * dy / (n * a2) - 2 * mx / (n * b1) - 2 * dx / (n * b2))
    grad = -d_ssim / (2.0 * P * C)
    return value, grad.reshape(shape)


def depth_smoothness_loss(depth_patch):
    """Sum of squared horizontal and vertical neighbor differences.

    Batched ``(P, h, w)`` input averages the per-patch sums.
    """
    d = np.asarray(depth_patch, dtype=float)
    batched = d.ndim == 3
    p = d if batched else d[None]
    if p.shape[1] < 2 or p.shape[2] < 2:
        raise PatchTooSmall("depth smoothness needs at least 2x2 patches")
    dh = p[:, :, 1:] - p[:, :, :-1]
    dv = p[:, 1:, :] - p[:, :-1, :]
    scale = 1.0 / len(p)
    value = float(((dh * dh).sum() + (dv * dv).sum()) * scale)
    g = np.zeros_like(p)
    g[:, :, 1:] += 2 * dh
    g[:, :, :-1] -= 2 * dh
    g[:, 1:, :] += 2 * dv
    g[:, :-1, :] -= 2 * dv
    g *= scale
    return value, g if batched else g[0]


def total_loss(parts, weights: LossWeights):
    """Weighted sum of the named parts ``c``, ``d``, ``ssim``, ``ds``."""
    lam = weights.as_dict()
    total = 0.0
    for name, value in parts.items():
        if not math.isfinite(value):
            raise NonFiniteLoss(f"loss term {name!r} is not finite", {"parts": dict(parts)})
        total += lam[name] * value
    if not math.isfinite(total):
        raise NonFiniteLoss("total loss is not finite", {"parts": dict(parts)})
    return total
