"""Segmentation losses shared by training, difficulty scoring, and Fisher.

Both losses operate on raw logits. Layout does not matter: they reduce over
all pixels, so callers may pass (32, 32) grids or flattened patch layouts as
long as logits and mask agree elementwise.
"""

import numpy as np

from .tensorcore import Tensor

DICE_EPS = 1.0


def seg_loss(logits, mask):
    """Mean per-pixel binary cross-entropy of sigmoid(logits) against mask."""
    mask = mask if isinstance(mask, Tensor) else Tensor(mask)
    if logits.shape != mask.shape:
        raise ValueError(f"logits {logits.shape} vs mask {mask.shape}")
    p = logits.sigmoid()
    ce = mask * p.log() + (1.0 - mask) * (1.0 - p).log()
    return -ce.mean()


def dice_loss(logits, mask):
    """Soft Dice loss 1 - (2*sum(p*g) + eps) / (sum(p) + sum(g) + eps)."""
    mask = mask if isinstance(mask, Tensor) else Tensor(mask)
    if logits.shape != mask.shape:
        raise ValueError(f"logits {logits.shape} vs mask {mask.shape}")
    p = logits.sigmoid()
    inter = (p * mask).sum()
    total = p.sum() + mask.sum()
    return 1.0 - (2.0 * inter + DICE_EPS) / (total + DICE_EPS)


def sample_loss(logits, mask):
    """Per-sample training objective: cross-entropy plus soft Dice."""
    return seg_loss(logits, mask) + dice_loss(logits, mask)


def batched_losses(logits, masks):
    """Segmentation and Dice losses averaged over a stacked batch.

    logits: Tensor of shape (n * 1024 / k, k) or anything reshapeable to
    (n, 1024); masks: float array of shape (n, 1024). The cross-entropy term
    equals the mean of per-sample means (all samples have 1024 pixels); the
    Dice term is computed per sample, then averaged.
    """
    n = masks.shape[0]
    z = logits.reshape((n, masks.shape[1]))
    g = Tensor(masks)
    p = z.sigmoid()
    ce = -(g * p.log() + (1.0 - g) * (1.0 - p).log()).mean()
    inter = (p * g).sum(axis=1)
    psum = p.sum(axis=1)
    gsum = Tensor(masks.sum(axis=1))
    dice_vec = 1.0 - (2.0 * inter + DICE_EPS) / (psum + gsum + DICE_EPS)
    return ce, dice_vec.mean()


def bce_np(logits, mask):
    """Plain-array mean binary cross-entropy, same floor as the graph op."""
    logits = np.asarray(logits, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    p = np.where(logits >= 0, 1.0 / (1.0 + np.exp(-logits)),
                 np.exp(np.minimum(logits, 0)) /
                 (1.0 + np.exp(np.minimum(logits, 0))))
    p_lo = np.maximum(p, 1e-12)
    q_lo = np.maximum(1.0 - p, 1e-12)
    return float(-(mask * np.log(p_lo) + (1.0 - mask) * np.log(q_lo)).mean())
