"""Image-space L1 losses.

The two losses are deliberately asymmetric in how they treat the foreground
mask: the plain render loss masks both sides (background contributes nothing),
while the super-resolution loss compares the *unmasked* prediction against the
masked ground truth, so the prediction is pushed toward a clean black
background on its own.
"""

from __future__ import annotations

import numpy as np

from ..errors import ValidationError


def _as_mask(mask: np.ndarray, shape) -> np.ndarray:
    m = np.asarray(mask, dtype=np.float64)
    if m.ndim == 2:
        m = m[..., None]
    if m.shape[:2] != shape[:2] or (m.shape[2] not in (1, shape[2])):
        raise ValidationError(f"mask shape {m.shape} does not match image {shape}")
    return m


def loss_ren(i_mesh: np.ndarray, i_gt: np.ndarray, mask: np.ndarray) -> tuple[float, np.ndarray]:
    """Masked L1: sum over pixels/channels of |mask * (pred - gt)|.

    Returns (loss, gradient wrt i_mesh); the subgradient at exact zeros is 0.
    """
    pred = np.asarray(i_mesh, dtype=np.float64)
    gt = np.asarray(i_gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValidationError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    m = _as_mask(mask, pred.shape)
    diff = m * (pred - gt)
    return float(np.abs(diff).sum()), np.sign(diff) * m


def loss_sr(i_sr: np.ndarray, i_gt_high: np.ndarray, mask_high: np.ndarray) -> tuple[float, np.ndarray]:
    """L1 between the unmasked prediction and the masked ground truth."""
    pred = np.asarray(i_sr, dtype=np.float64)
    gt = np.asarray(i_gt_high, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValidationError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    m = _as_mask(mask_high, pred.shape)
    diff = pred - m * gt
    return float(np.abs(diff).sum()), np.sign(diff)


def masked_l1_mean(pred: np.ndarray, gt: np.ndarray, mask: np.ndarray) -> float:
    """Mean absolute masked error per foreground pixel and channel.

    Scale-free convergence metric for overfit experiments (the training losses
    above are sums, so their magnitude depends on the image size).
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    m = _as_mask(mask, pred.shape)
    denom = float(m.sum()) * (pred.shape[2] if m.shape[2] == 1 else 1)
    if denom == 0:
        return 0.0
    return float(np.abs(m * (pred - gt)).sum() / denom)
