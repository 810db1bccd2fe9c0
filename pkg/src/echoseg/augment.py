"""Training-time affine augmentation and per-image intensity centering."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from echoseg.dataset import ValidationError


@dataclass(frozen=True)
class AugmentConfig:
    apply_probability: float = 0.8
    rotation_deg: float = 30.0
    shift_fraction: float = 0.2
    scale_range: tuple = (0.8, 1.2)
    hflip: bool = True
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.apply_probability <= 1.0:
            raise ValidationError(f"apply_probability must lie in [0, 1], got {self.apply_probability}")
        lo, hi = self.scale_range
        if not 0 < lo <= hi:
            raise ValidationError(f"invalid scale_range {self.scale_range}")
        if self.rotation_deg < 0 or self.shift_fraction < 0:
            raise ValidationError("rotation and shift bounds must be non-negative")
        object.__setattr__(self, "scale_range", (float(lo), float(hi)))


@dataclass(frozen=True)
class AffineParams:
    rotation_deg: float = 0.0
    shift: tuple = (0.0, 0.0)  # (rows, cols) as fractions of the image size
    scale: float = 1.0
    flip: bool = False


def sample_rng(seed: int, epoch: int, index: int) -> np.random.Generator:
    """Independent stream per (seed, epoch, sample) so workers can replay augmentation."""
    return np.random.default_rng([seed, epoch, index])


def sample_params(cfg: AugmentConfig, rng: np.random.Generator):
    """Draw one joint transform, or ``None`` when the gate does not fire."""
    if rng.random() >= cfg.apply_probability:
        return None
    rotation = rng.uniform(-cfg.rotation_deg, cfg.rotation_deg)
    shift = tuple(rng.uniform(-cfg.shift_fraction, cfg.shift_fraction, size=2))
    scale = rng.uniform(*cfg.scale_range)
    flip = bool(cfg.hflip and rng.random() < 0.5)
    return AffineParams(rotation, shift, scale, flip)


def _forward_matrix(params: AffineParams) -> np.ndarray:
    # (row, col) coordinates: flip, then scale, then rotate
    t = math.radians(params.rotation_deg)
    rot = np.array([[math.cos(t), -math.sin(t)], [math.sin(t), math.cos(t)]])
    flip = np.diag([1.0, -1.0 if params.flip else 1.0])
    return rot @ (params.scale * flip)


def warp(image, label_map, params: AffineParams):
    """Apply one affine transform about the image centre to an image/label pair.

    The image is interpolated bilinearly and the label map by nearest
    neighbour; pixels mapped from outside the frame become 0.
    """
    image = np.asarray(image)
    label_map = np.asarray(label_map)
    if image.shape != label_map.shape:
        raise ValidationError(f"shape mismatch {image.shape} vs {label_map.shape}")
    shape = np.array(image.shape, dtype=np.float64)
    centre = (shape - 1) / 2.0
    shift = np.array(params.shift) * shape
    inverse = np.linalg.inv(_forward_matrix(params))
    offset = centre - inverse @ (centre + shift)
    out_image = ndimage.affine_transform(
        image.astype(np.float64), inverse, offset, order=1, mode="constant", cval=0.0
    )
    out_labels = ndimage.affine_transform(label_map, inverse, offset, order=0, mode="constant", cval=0)
    return out_image.astype(image.dtype, copy=False), out_labels.astype(label_map.dtype, copy=False)


def augment_pair(image, label_map, cfg: AugmentConfig, rng: np.random.Generator):
    """Randomly transform an image and its label map; returns ``(image, label_map, rng)``."""
    image = np.asarray(image)
    label_map = np.asarray(label_map)
    if image.shape != label_map.shape:
        raise ValidationError(f"shape mismatch {image.shape} vs {label_map.shape}")
    params = sample_params(cfg, rng)
    if params is None:
        return image, label_map, rng
    image, label_map = warp(image, label_map, params)
    return image, label_map, rng


def center_intensity(image):
    image = np.asarray(image, dtype=np.float64)
    return image - image.mean()
