"""Training losses: overlap + cross-entropy for the binary-mask stage,
asymmetric focal loss for the heatmap stages.

All losses are built from differentiable tensor ops, so gradients flow
to the model without extra backward rules. Cross-entropy terms use the
softplus identities  -log s(x) = softplus(-x)  and
-log(1 - s(x)) = softplus(x)  to stay finite at extreme logits.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError
from .tensor import Tensor


@dataclass(frozen=True)
class LossConfig:
    lambda_dice: float = 0.5
    lambda_bce: float = 1.0
    focal_pos_weight: float = 0.9
    focal_neg_weight: float = 0.1
    focal_gamma: float = 2.0
    dice_smooth: float = 1.0

    def validate(self) -> "LossConfig":
        for field in ("lambda_dice", "lambda_bce", "focal_pos_weight",
                      "focal_neg_weight", "focal_gamma", "dice_smooth"):
            if getattr(self, field) < 0:
                raise ConfigError(f"loss config: {field} must be >= 0")
        return self


def _pair(pred: Tensor, target) -> tuple[Tensor, Tensor]:
    t = target if isinstance(target, Tensor) else Tensor(target)
    if pred.shape != t.shape:
        raise DimensionError(f"loss: prediction {pred.shape} vs target {t.shape}")
    return pred, t


def dice_loss(pred: Tensor, target, smooth: float = 1.0) -> Tensor:
    """1 - (2*sum(p*t) + s) / (sum(p) + sum(t) + s), per map, averaged
    over any leading batch axis. pred holds probabilities in [0, 1]."""
    pred, t = _pair(pred, target)
    axes = (-2, -1)
    num = T.add(T.mul(T.tsum(T.mul(pred, t), axis=axes), 2.0), smooth)
    den = T.add(T.add(T.tsum(pred, axis=axes), T.tsum(t, axis=axes)), smooth)
    ratio = T.mul(num, T.pow_const(den, -1.0))  # den >= smooth > 0
    return T.tmean(T.add(T.neg(ratio), 1.0))


def bce_loss(logits: Tensor, target) -> Tensor:
    """Mean binary cross-entropy from raw logits; targets may be soft."""
    logits, t = _pair(logits, target)
    pos = T.mul(t, T.softplus(T.neg(logits)))
    neg = T.mul(T.add(T.neg(t), 1.0), T.softplus(logits))
    return T.tmean(T.add(pos, neg))


def combined_mask_loss(logits: Tensor, target, cfg: LossConfig) -> Tensor:
    """Stage-1 objective: lambda_dice * dice(sigmoid(logits)) +
    lambda_bce * bce(logits)."""
    d = dice_loss(T.sigmoid(logits), target, smooth=cfg.dice_smooth)
    b = bce_loss(logits, target)
    return T.add(T.mul(d, cfg.lambda_dice), T.mul(b, cfg.lambda_bce))


def weighted_focal_loss(logits: Tensor, target, cfg: LossConfig) -> Tensor:
    """Binary focal loss with asymmetric positive/negative weights.

    Per pixel, with p = sigmoid(x) and soft label t in [0, 1]:
        w = pos_w * t + neg_w * (1 - t)
        loss = w * [ t * (1-p)^gamma * softplus(-x) + (1-t) * p^gamma * softplus(x) ]
    averaged over all pixels.
    """
    logits, t = _pair(logits, target)
    p = T.sigmoid(logits)
    one_minus_t = T.add(T.neg(t), 1.0)
    w = T.add(T.mul(t, cfg.focal_pos_weight), T.mul(one_minus_t, cfg.focal_neg_weight))
    pos = T.mul(T.mul(t, T.pow_const(T.add(T.neg(p), 1.0), cfg.focal_gamma)),
                T.softplus(T.neg(logits)))
    neg = T.mul(T.mul(one_minus_t, T.pow_const(p, cfg.focal_gamma)),
                T.softplus(logits))
    return T.tmean(T.mul(w, T.add(pos, neg)))


def loss_for_kind(kind: str):
    """Maps a stage's configured loss name to its function."""
    if kind == "combined_mask":
        return combined_mask_loss
    if kind == "weighted_focal":
        return weighted_focal_loss
    raise ConfigError(f"unknown loss kind: {kind!r}")


def sigmoid_map(logits: np.ndarray) -> np.ndarray:
    """Plain-numpy logistic for inference outputs."""
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(logits, dtype=np.float64)))
