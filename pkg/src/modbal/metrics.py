"""Pose errors in millimetres: MPJPE (differentiable) and PA-MPJPE."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

RANK_TOL = 1e-9


def mpjpe_loss(pred: Tensor, gt) -> Tensor:
    """Mean Euclidean joint error, averaged over joints then over the batch."""
    gt = ad.as_tensor(gt)
    if pred.shape != gt.shape:
        raise ad.ShapeError("mpjpe_loss", pred.shape, gt.shape)
    return ad.l2norm_lastdim(pred - gt).mean()


def mpjpe(pred, gt) -> float:
    pred = np.asarray(pred.data if isinstance(pred, Tensor) else pred, dtype=np.float64)
    gt = np.asarray(gt.data if isinstance(gt, Tensor) else gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"mpjpe: shape mismatch {pred.shape} vs {gt.shape}")
    return float(np.linalg.norm(pred - gt, axis=-1).mean())


def procrustes_align(pred: np.ndarray, gt: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Similarity-align each ``pred[i]`` (joints, 3) onto ``gt[i]``.

    Least-squares rotation (proper, det +1), isotropic scale and translation.
    Samples whose predicted joint cloud has rank < 2 fall back to translation
    only; their positions are flagged in the returned boolean array.
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape or pred.ndim != 3 or pred.shape[-1] != 3:
        raise ValueError(f"procrustes_align expects matching (batch, joints, 3) arrays, got {pred.shape}, {gt.shape}")

    mu_p = pred.mean(axis=1, keepdims=True)
    mu_g = gt.mean(axis=1, keepdims=True)
    p0 = pred - mu_p
    g0 = gt - mu_g

    sv = np.linalg.svd(p0, compute_uv=False)
    degenerate = sv[:, 1] <= RANK_TOL * np.maximum(sv[:, 0], 1e-300)

    cov = np.swapaxes(g0, 1, 2) @ p0  # (batch, 3, 3), gt^T pred
    u, d, vt = np.linalg.svd(cov)
    sign = np.sign(np.linalg.det(u @ vt))
    sign[sign == 0] = 1.0
    flip = np.ones_like(d)
    flip[:, -1] = sign
    rot = (u * flip[:, None, :]) @ vt
    var_p = (p0 * p0).sum(axis=(1, 2))
    scale = (d * flip).sum(axis=1) / np.where(var_p > 0, var_p, 1.0)

    aligned = scale[:, None, None] * (p0 @ np.swapaxes(rot, 1, 2)) + mu_g
    fallback = p0 + mu_g
    aligned = np.where(degenerate[:, None, None], fallback, aligned)
    return aligned, degenerate


def pa_mpjpe(pred, gt, return_flags: bool = False):
    """MPJPE after per-sample Procrustes alignment, averaged over the batch."""
    pred = np.asarray(pred.data if isinstance(pred, Tensor) else pred, dtype=np.float64)
    gt = np.asarray(gt.data if isinstance(gt, Tensor) else gt, dtype=np.float64)
    aligned, flags = procrustes_align(pred, gt)
    value = float(np.linalg.norm(aligned - gt, axis=-1).mean())
    return (value, flags) if return_flags else value
