"""SGD with momentum and the warm-restart cosine learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping

from echoseg.dataset import ValidationError


@dataclass(frozen=True)
class ScheduleConfig:
    lr_min: float = 1e-4
    lr_max: float = 5e-3
    first_cycle_epochs: float = 50
    cycle_mult: float = 1.31
    total_epochs: int = 200

    def __post_init__(self):
        # lr_min == lr_max is allowed so a run can be frozen (both zero)
        if not 0 <= self.lr_min <= self.lr_max:
            raise ValidationError(f"need 0 <= lr_min <= lr_max, got {self.lr_min}, {self.lr_max}")
        if self.first_cycle_epochs < 1:
            raise ValidationError("first_cycle_epochs must be >= 1")
        if self.cycle_mult < 1:
            raise ValidationError("cycle_mult must be >= 1")
        if self.total_epochs < 0:
            raise ValidationError("total_epochs must be >= 0")


@dataclass(frozen=True)
class ScheduleState:
    cycle_index: int
    cycle_length: float
    epoch_in_cycle: float


def cycle_starts(cfg: ScheduleConfig, until: float | None = None) -> list[float]:
    """Epochs at which cycles begin, up to (excluding) ``until`` (default: total epochs)."""
    until = cfg.total_epochs if until is None else until
    starts = []
    start, length = 0.0, float(cfg.first_cycle_epochs)
    while start < until:
        starts.append(start)
        start += length
        length *= cfg.cycle_mult
    return starts


def cycle_boundaries(cfg: ScheduleConfig, n: int) -> list[float]:
    """The first ``n`` restart epochs (cycle ends), ignoring ``total_epochs``."""
    out, end, length = [], 0.0, float(cfg.first_cycle_epochs)
    for _ in range(n):
        end += length
        out.append(end)
        length *= cfg.cycle_mult
    return out


def schedule_state(epoch: float, cfg: ScheduleConfig) -> ScheduleState:
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    start, length, index = 0.0, float(cfg.first_cycle_epochs), 0
    while epoch >= start + length:
        start += length
        length *= cfg.cycle_mult
        index += 1
    return ScheduleState(index, length, epoch - start)


def lr_at(epoch: float, cfg: ScheduleConfig) -> float:
    """Learning rate at a (fractional) epoch.

    Cosine annealing from lr_max to lr_min inside each cycle; every restart
    returns to the same lr_max.
    """
    if epoch >= cfg.total_epochs:
        raise ValueError(f"epoch {epoch} is outside the schedule of {cfg.total_epochs} epochs")
    state = schedule_state(epoch, cfg)
    cosine = math.cos(math.pi * state.epoch_in_cycle / state.cycle_length)
    # convex-combination form keeps the midpoint and cycle starts exact in floating point
    return 0.5 * ((1.0 + cosine) * cfg.lr_max + (1.0 - cosine) * cfg.lr_min)


def sgd_step(params: Mapping, grads: Mapping, velocity: Mapping, lr: float, momentum: float = 0.9):
    """One classic momentum step on name -> array mappings.

    ``v' = momentum * v + g`` and ``p' = p - lr * v'``. Works for numpy arrays
    and torch tensors alike; returns new ``(params, velocity)`` dicts.
    """
    new_params, new_velocity = {}, {}
    for name, p in params.items():
        g = grads[name]
        if not _all_finite(g):
            raise FloatingPointError(f"non-finite gradient in {name!r}")
        v = momentum * velocity[name] + g
        new_velocity[name] = v
        new_params[name] = p - lr * v
    return new_params, new_velocity


def _all_finite(x) -> bool:
    if hasattr(x, "isfinite"):
        return bool(x.isfinite().all())
    import numpy as np

    return bool(np.isfinite(x).all())
