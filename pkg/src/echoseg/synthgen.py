"""Deterministic synthetic two-view phantoms with the label layout of the taxonomy.

Coordinates of the layouts are in pixels of a 128 x 128 canvas, relative to
the image centre (x to the right, y down); they are rescaled to the requested
image size. Blood pools share intensities across views, so a structure can
only be attributed to its label from context.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from echoseg.dataset import SampleRecord, ValidationError, write_image, write_label_map, write_manifest

REFERENCE_SIZE = 128
TISSUE = 0.45
OUTSIDE = 0.05
THORAX_RADII = (58.0, 54.0)


@dataclass(frozen=True)
class Structure:
    label: int
    kind: str  # "ellipse" or "rect"
    center: tuple
    half_axes: tuple
    angle_deg: float
    intensity: float


# Paint order matters: a pixel already claimed is never repainted.
LAYOUTS = {
    "4CHV": (
        Structure(2, "ellipse", (-21.0, -18.0), (17.0, 20.0), 0.0, 0.12),
        Structure(1, "ellipse", (21.0, -18.0), (17.0, 22.0), 0.0, 0.20),
        Structure(4, "ellipse", (-21.0, 22.0), (15.0, 13.0), 0.0, 0.28),
        Structure(3, "ellipse", (21.0, 22.0), (14.0, 12.0), 0.0, 0.16),
        Structure(11, "rect", (0.0, -18.0), (2.5, 18.0), 0.0, 0.80),
        Structure(12, "rect", (0.0, 22.0), (2.0, 10.0), 0.0, 0.70),
        Structure(13, "rect", (21.0, 6.5), (11.0, 1.6), 0.0, 0.75),
        Structure(14, "rect", (-21.0, 5.5), (11.0, 1.6), 0.0, 0.85),
        Structure(5, "ellipse", (14.0, 44.0), (4.0, 4.0), 0.0, 0.12),
        Structure(10, "ellipse", (-6.0, 53.0), (7.0, 7.0), 0.0, 0.95),
    ),
    "3VTV": (
        Structure(6, "ellipse", (-18.0, -10.0), (14.0, 8.0), 30.0, 0.12),
        Structure(7, "ellipse", (6.0, -4.0), (7.0, 7.0), 0.0, 0.20),
        Structure(8, "ellipse", (22.0, 2.0), (5.0, 5.0), 0.0, 0.28),
        Structure(9, "ellipse", (14.0, 16.0), (5.0, 5.0), 0.0, 0.16),
        Structure(10, "ellipse", (0.0, 40.0), (7.0, 7.0), 0.0, 0.95),
    ),
}


@dataclass(frozen=True)
class PhantomSpec:
    image_size: int = 128
    n_cases: int = 40
    abnormal_fraction: float = 1 / 3
    drop_probability: float = 0.5
    noise_level: float = 0.2
    seed: int = 0
    max_rotation_deg: float = 15.0
    max_translation: float = 6.0

    def __post_init__(self):
        if self.n_cases < 1:
            raise ValidationError("n_cases must be >= 1")
        if self.image_size < 8:
            raise ValidationError("image_size must be >= 8")
        for name in ("abnormal_fraction", "drop_probability"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValidationError(f"{name} must lie in [0, 1], got {value}")
        if self.noise_level < 0:
            raise ValidationError("noise_level must be >= 0")


def _inside(structure: Structure, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    cx, cy = structure.center
    a, b = structure.half_axes
    t = math.radians(structure.angle_deg)
    dx, dy = x - cx, y - cy
    u = dx * math.cos(t) + dy * math.sin(t)
    v = -dx * math.sin(t) + dy * math.cos(t)
    if structure.kind == "ellipse":
        return (u / a) ** 2 + (v / b) ** 2 <= 1.0
    return (np.abs(u) <= a) & (np.abs(v) <= b)


def render(view: str, size: int, rotation_deg: float = 0.0, translation=(0.0, 0.0), dropped=()):
    """Clean image and exact label map of one view under a rigid placement."""
    scale = size / REFERENCE_SIZE
    centre = (size - 1) / 2.0
    rows, cols = np.mgrid[0:size, 0:size].astype(np.float64)
    # pixel -> layout coordinates (inverse of rotate-then-translate)
    px = (cols - centre) / scale - translation[0]
    py = (rows - centre) / scale - translation[1]
    t = math.radians(rotation_deg)
    x = px * math.cos(t) + py * math.sin(t)
    y = -px * math.sin(t) + py * math.cos(t)

    image = np.full((size, size), OUTSIDE)
    thorax = (x / THORAX_RADII[0]) ** 2 + (y / THORAX_RADII[1]) ** 2 <= 1.0
    image[thorax] = TISSUE
    label_map = np.zeros((size, size), dtype=np.uint8)
    for s in LAYOUTS[view]:
        if s.label in dropped:
            continue
        mask = _inside(s, x, y) & (label_map == 0)
        label_map[mask] = s.label
        image[mask] = s.intensity
    return image, label_map


def speckle(image: np.ndarray, noise_level: float, rng: np.random.Generator) -> np.ndarray:
    """Multiplicative noise ``clean * (1 + noise_level * g)`` clipped to [0, 1]."""
    g = rng.standard_normal(image.shape)
    return np.clip(image * (1.0 + noise_level * g), 0.0, 1.0)


def generate_arrays(spec: PhantomSpec):
    """Yield ``(case_id, view, normality, image, label_map)`` for every case and view."""
    rng = np.random.default_rng(spec.seed)
    n_abnormal = int(round(spec.abnormal_fraction * spec.n_cases))
    abnormal = set(rng.choice(spec.n_cases, size=n_abnormal, replace=False).tolist())
    all_labels = sorted({s.label for layout in LAYOUTS.values() for s in layout})
    for i in range(spec.n_cases):
        case_id = f"case{i:04d}"
        normality = "abnormal" if i in abnormal else "normal"
        dropped = ()
        # draws happen unconditionally so normal cases keep the same stream
        drop_draw = rng.random()
        drop_label = int(rng.choice(all_labels))
        if normality == "abnormal" and drop_draw < spec.drop_probability:
            dropped = (drop_label,)
        for view in ("3VTV", "4CHV"):
            rot = rng.uniform(-spec.max_rotation_deg, spec.max_rotation_deg)
            shift = tuple(rng.uniform(-spec.max_translation, spec.max_translation, size=2))
            clean, label_map = render(view, spec.image_size, rot, shift, dropped)
            yield case_id, view, normality, speckle(clean, spec.noise_level, rng), label_map


def generate(spec: PhantomSpec, out_dir) -> Path:
    """Write PNGs for every case and view plus ``manifest.jsonl``; return the manifest path."""
    out_dir = Path(out_dir)
    try:
        (out_dir / "images").mkdir(parents=True, exist_ok=True)
        (out_dir / "labels").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out_dir}: {exc}") from exc
    records = []
    for case_id, view, normality, image, label_map in generate_arrays(spec):
        stem = f"{case_id}_{view}"
        image_path = out_dir / "images" / f"{stem}.png"
        label_path = out_dir / "labels" / f"{stem}.png"
        write_image(image, image_path)
        write_label_map(label_map, label_path)
        records.append(SampleRecord(case_id, view, normality, image_path, label_path))
    return write_manifest(records, out_dir / "manifest.jsonl")
