"""Exponential-logarithmic segmentation loss with a missing-label-robust soft Dice.

The classic soft Dice adds a small epsilon to numerator and denominator. For
an image where a label has no ground-truth pixels, that epsilon makes the
Dice of the label approach 1 as its predicted mass goes to 0, so the
optimizer is rewarded for suppressing the label everywhere. The robust form
drops epsilon and instead floors the predictions, so an absent label has
Dice exactly 0 and contributes no gradient.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch

from echoseg.dataset import ValidationError

EPSILON_DICE = "epsilon_dice"
ROBUST_DICE = "robust_dice"
INCLUDE_MISSING = "include_missing"
EXCLUDE_MISSING = "exclude_missing"
# keeps (-ln p)^gamma differentiable at p == 1 without shifting its value
_NLL_FLOOR = 1e-30


@dataclass(frozen=True)
class LossConfig:
    dice_exponent: float = 0.3
    ce_exponent: float = 0.3
    w_dice: float = 0.8
    w_ce: float = 0.2
    pred_floor: float = 1e-7
    dice_floor: float = 1e-7
    legacy_epsilon: float = 1e-7
    mode: str = ROBUST_DICE
    presence_policy: str = INCLUDE_MISSING

    def __post_init__(self):
        if self.dice_exponent <= 0 or self.ce_exponent <= 0:
            raise ValidationError("loss exponents must be > 0")
        for name in ("pred_floor", "dice_floor"):
            if not 0.0 < getattr(self, name) < 1.0:
                raise ValidationError(f"{name} must lie in (0, 1)")
        if self.legacy_epsilon <= 0:
            raise ValidationError("legacy_epsilon must be > 0")
        if self.w_dice < 0 or self.w_ce < 0 or self.w_dice + self.w_ce == 0:
            raise ValidationError("loss weights must be >= 0 and not both zero")
        if self.mode not in (EPSILON_DICE, ROBUST_DICE):
            raise ValidationError(f"unknown loss mode {self.mode!r}")
        if self.presence_policy not in (INCLUDE_MISSING, EXCLUDE_MISSING):
            raise ValidationError(f"unknown presence policy {self.presence_policy!r}")


@dataclass
class LossBreakdown:
    total: torch.Tensor
    dice_term: torch.Tensor
    ce_term: torch.Tensor
    per_label_dice: torch.Tensor  # batch mean of the main output's soft Dice, foreground labels 1..C-1


def softmax_clamped(logits, floor: float = 1e-7):
    """Class softmax over dim 1, then every score raised to at least ``floor``."""
    if not torch.isfinite(logits).all():
        raise FloatingPointError("non-finite logits")
    return torch.clamp(torch.softmax(logits, dim=1), min=floor)


def one_hot(label_map, n_classes: int, dtype=torch.float32):
    """B x H x W integer map -> B x C x H x W one-hot tensor."""
    label_map = torch.as_tensor(label_map, dtype=torch.long)
    return torch.nn.functional.one_hot(label_map, n_classes).permute(0, 3, 1, 2).to(dtype)


def _check_one_hot(target):
    if not torch.all((target == 0) | (target == 1)) or not torch.all(target.sum(dim=1) == 1):
        raise ValidationError("target must be one-hot over the class dimension")


def soft_dice_per_label(pred, target_onehot, mode: str = ROBUST_DICE, epsilon: float = 1e-7, pred_floor: float = 1e-7):
    """Per-image soft Dice of every foreground class; returns B x (C-1).

    ``epsilon_dice``: (2 sum(p y) + eps) / (sum(p) + sum(y) + eps) on ``pred``
    as given. ``robust_dice``: 2 sum(p y) / (sum(p) + sum(y)) with ``pred``
    floored at ``pred_floor``; a label with no target pixels scores exactly 0.
    """
    if pred.shape != target_onehot.shape:
        raise ValidationError(f"prediction {tuple(pred.shape)} and target {tuple(target_onehot.shape)} differ")
    _check_one_hot(target_onehot)
    p = pred[:, 1:].flatten(2)
    y = target_onehot[:, 1:].flatten(2).to(pred.dtype)
    if mode == EPSILON_DICE:
        return (2.0 * (p * y).sum(-1) + epsilon) / (p.sum(-1) + y.sum(-1) + epsilon)
    if mode == ROBUST_DICE:
        p = torch.clamp(p, min=pred_floor)
        return 2.0 * (p * y).sum(-1) / (p.sum(-1) + y.sum(-1))
    raise ValidationError(f"unknown loss mode {mode!r}")


def exp_log_dice(dice, exponent: float = 0.3, floor: float = 1e-7, presence_policy: str = INCLUDE_MISSING, present=None):
    """Mean of ``(-ln Dice)^exponent`` with Dice clamped to ``[floor, 1 - floor]``.

    Under ``exclude_missing`` only entries where ``present`` is true enter the mean.
    """
    terms = torch.pow(-torch.log(torch.clamp(dice, floor, 1.0 - floor)), exponent)
    if presence_policy == INCLUDE_MISSING:
        return terms.mean()
    if presence_policy == EXCLUDE_MISSING:
        if present is None:
            raise ValidationError("exclude_missing needs a presence mask")
        present = torch.as_tensor(present, dtype=torch.bool)
        if not present.any():
            return terms.sum() * 0.0
        return terms[present].mean()
    raise ValidationError(f"unknown presence policy {presence_policy!r}")


def exp_log_cross_entropy(pred, target_onehot, exponent: float = 0.3, class_weights=None, floor: float = _NLL_FLOOR):
    """Pixel mean of ``w[y] * (-ln p_y)^exponent``.

    ``-ln p_y`` is floored at ``floor`` so the fractional power stays
    differentiable when a pixel is predicted with certainty.
    """
    if pred.shape != target_onehot.shape:
        raise ValidationError(f"prediction {tuple(pred.shape)} and target {tuple(target_onehot.shape)} differ")
    target_onehot = target_onehot.to(pred.dtype)
    p_true = (pred * target_onehot).sum(dim=1)
    terms = torch.pow(torch.clamp(-torch.log(p_true), min=floor), exponent)
    if class_weights is not None:
        w = torch.as_tensor(class_weights, dtype=pred.dtype)
        if w.shape != (pred.shape[1],) or (w < 0).any():
            raise ValidationError("class_weights must be a non-negative C-vector")
        terms = terms * torch.einsum("c,bc...->b...", w, target_onehot)
    return terms.mean()


def _label_index(labels, n_classes):
    if labels is None:
        return None
    idx = [int(l) - 1 for l in labels]
    if any(not 0 <= i < n_classes - 1 for i in idx):
        raise ValidationError(f"labels must lie in 1..{n_classes - 1}")
    return torch.tensor(idx, dtype=torch.long)


def combined_loss(logits, target_onehot, cfg: LossConfig, labels: Sequence[int] | None = None, class_weights=None):
    """``(w_dice * L_dice + w_ce * L_ce, L_dice, L_ce, per-image Dice)`` for one output."""
    pred = softmax_clamped(logits, cfg.pred_floor)
    if cfg.mode == EPSILON_DICE:
        # the epsilon formulation has no prediction floor of its own
        dice_pred = torch.softmax(logits, dim=1)
    else:
        dice_pred = pred
    dice = soft_dice_per_label(dice_pred, target_onehot, cfg.mode, cfg.legacy_epsilon, cfg.pred_floor)
    present = target_onehot[:, 1:].flatten(2).sum(-1) > 0
    idx = _label_index(labels, logits.shape[1])
    sel_dice, sel_present = (dice, present) if idx is None else (dice[:, idx], present[:, idx])
    l_dice = exp_log_dice(sel_dice, cfg.dice_exponent, cfg.dice_floor, cfg.presence_policy, sel_present)
    l_ce = exp_log_cross_entropy(pred, target_onehot, cfg.ce_exponent, class_weights)
    return cfg.w_dice * l_dice + cfg.w_ce * l_ce, l_dice, l_ce, dice


def total_loss(outputs, target_onehot, cfg: LossConfig, ds_weights=None, labels=None, class_weights=None) -> LossBreakdown:
    """Deep-supervision weighted loss over the main and auxiliary outputs.

    ``outputs`` is a ``NetworkOutput`` (or a bare logits tensor). ``labels``
    restricts the Dice mean to an active foreground label set.
    """
    logits_list = [outputs] if torch.is_tensor(outputs) else [outputs.main_logits, *outputs.aux_logits]
    if ds_weights is None:
        ds_weights = [1.0] * len(logits_list)
    ds_weights = [float(w) for w in ds_weights]
    if len(ds_weights) != len(logits_list):
        raise ValidationError(f"{len(ds_weights)} deep-supervision weights for {len(logits_list)} outputs")
    if any(w < 0 for w in ds_weights) or sum(ds_weights) <= 0:
        raise ValidationError("deep-supervision weights must be >= 0 with a positive sum")
    norm = sum(ds_weights)
    dice_term = ce_term = 0.0
    per_label = None
    for w, logits in zip(ds_weights, logits_list):
        if w == 0 and per_label is not None:
            continue
        _, l_dice, l_ce, dice = combined_loss(logits, target_onehot, cfg, labels, class_weights)
        if per_label is None:
            per_label = dice.detach().mean(dim=0)
        dice_term = dice_term + (w / norm) * l_dice
        ce_term = ce_term + (w / norm) * l_ce
    total = cfg.w_dice * dice_term + cfg.w_ce * ce_term
    return LossBreakdown(total, dice_term, ce_term, per_label)
