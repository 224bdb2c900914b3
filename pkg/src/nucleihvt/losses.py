"""Training objective: weighted cross-entropy plus soft Dice."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import functional as F
from .tensor import Tensor


@dataclass(frozen=True)
class LossWeights:
    ce: float = 1.0
    dice: float = 3.0

    def __post_init__(self):
        if self.ce < 0 or self.dice < 0 or self.ce + self.dice <= 0:
            raise ValueError(f"loss weights must be non-negative with a positive sum, got {self}")


def _check_target(target: np.ndarray, num_classes: int) -> np.ndarray:
    target = np.asarray(target)
    if target.size and (target.min() < 0 or target.max() >= num_classes):
        bad = target[(target < 0) | (target >= num_classes)][0]
        raise ValueError(f"target class {bad} outside [0, {num_classes})")
    return target.astype(np.int64, copy=False)


def one_hot(target: np.ndarray, num_classes: int, dtype=np.float32) -> np.ndarray:
    """(N, H, W) class indices -> (N, K, H, W) indicator array."""
    target = _check_target(target, num_classes)
    return np.moveaxis(np.eye(num_classes, dtype=dtype)[target], -1, 1)


def cross_entropy(logits: Tensor, target: np.ndarray) -> Tensor:
    """Mean over pixels of -log softmax(logits)[target]; probabilities floored at 1e-12."""
    target = _check_target(target, logits.shape[1])
    if target.shape != logits.shape[:1] + logits.shape[2:]:
        raise ValueError(f"target shape {target.shape} does not match logits {logits.shape}")
    return F.cross_entropy_from_logits(logits, target, axis=1)


def soft_dice_loss(probs: Tensor, target_onehot, smooth: float = 1.0) -> Tensor:
    """1 - (2*sum(p*y) + s) / (sum(p) + sum(y) + s) per class, averaged over classes."""
    y = target_onehot.data if isinstance(target_onehot, Tensor) else np.asarray(target_onehot, dtype=probs.dtype)
    if y.shape != probs.shape:
        raise ValueError(f"one-hot target {y.shape} does not match probabilities {probs.shape}")
    yt = Tensor(y.astype(probs.dtype, copy=False))
    axes = (0, 2, 3)
    inter = (probs * yt).sum(axis=axes)
    denom = probs.sum(axis=axes) + yt.sum(axis=axes)
    dice = (inter * 2.0 + smooth) / (denom + smooth)
    return 1.0 - dice.mean()


def combined_loss(logits: Tensor, target: np.ndarray, weights: LossWeights = LossWeights()) -> Tensor:
    """weights.ce * cross-entropy + weights.dice * soft Dice loss."""
    k = logits.shape[1]
    total = None
    if weights.ce:
        total = cross_entropy(logits, target) * weights.ce
    if weights.dice:
        d = soft_dice_loss(F.softmax(logits, axis=1), one_hot(target, k, logits.dtype)) * weights.dice
        total = d if total is None else total + d
    return total
