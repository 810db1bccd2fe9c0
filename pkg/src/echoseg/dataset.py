"""Label taxonomy, samples, manifest I/O, preprocessing and patient-level splits."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

VIEWS = ("3VTV", "4CHV")
NORMALITIES = ("normal", "abnormal")
BACKGROUND = 0
N_FOREGROUND = 14


class ValidationError(ValueError):
    """Raised when inputs violate a data contract."""


@dataclass(frozen=True)
class Label:
    id: int
    name: str
    views: frozenset


@dataclass(frozen=True)
class LabelTaxonomy:
    """Ordered foreground labels and the views each one appears in.

    Background is id 0 and belongs to no view.
    """

    labels: tuple

    def __post_init__(self):
        ids = [lab.id for lab in self.labels]
        if ids != list(range(1, len(ids) + 1)):
            raise ValidationError(f"label ids must be 1..{len(ids)} in order, got {ids}")
        for lab in self.labels:
            if not lab.views or not set(lab.views) <= set(VIEWS):
                raise ValidationError(f"label {lab.id} has invalid views {sorted(lab.views)}")

    @property
    def ids(self) -> list[int]:
        return [lab.id for lab in self.labels]

    def name(self, label_id: int) -> str:
        if label_id == BACKGROUND:
            return "background"
        return self.labels[label_id - 1].name

    def labels_for_view(self, view: str) -> list[int]:
        if view not in VIEWS:
            raise ValidationError(f"unknown view {view!r}")
        return [lab.id for lab in self.labels if view in lab.views]

    def active_labels(self, view_filter: str) -> list[int]:
        """Foreground labels trained/evaluated under a view filter."""
        key = view_filter.lower()
        if key == "combined":
            return self.ids
        for view in VIEWS:
            if key in (view.lower(), f"{view.lower()}_only"):
                return self.labels_for_view(view)
        raise ValidationError(f"unknown view filter {view_filter!r}")


def _label(i, name, *views):
    return Label(i, name, frozenset(views))


TAXONOMY = LabelTaxonomy(
    (
        _label(1, "left ventricle", "4CHV"),
        _label(2, "right ventricle", "4CHV"),
        _label(3, "left atrium", "4CHV"),
        _label(4, "right atrium", "4CHV"),
        _label(5, "descending aorta", "4CHV"),
        _label(6, "pulmonary artery", "3VTV"),
        _label(7, "aorta", "3VTV"),
        _label(8, "superior vena cava", "3VTV"),
        _label(9, "trachea", "3VTV"),
        _label(10, "spine", "3VTV", "4CHV"),
        _label(11, "interventricular septum", "4CHV"),
        _label(12, "interatrial septum", "4CHV"),
        _label(13, "mitral valve", "4CHV"),
        _label(14, "tricuspid valve", "4CHV"),
    )
)


@dataclass(frozen=True)
class SampleRecord:
    """Manifest entry; pixels are not loaded."""

    case_id: str
    view: str
    normality: str
    image_path: Path
    label_path: Path


@dataclass
class Sample:
    case_id: str
    view: str
    normality: str
    image: np.ndarray
    label_map: np.ndarray

    def __post_init__(self):
        if self.view not in VIEWS:
            raise ValidationError(f"unknown view {self.view!r}")
        if self.normality not in NORMALITIES:
            raise ValidationError(f"unknown normality {self.normality!r}")
        if self.image.shape != self.label_map.shape or self.image.ndim != 2:
            raise ValidationError(
                f"image {self.image.shape} and label map {self.label_map.shape} must be equal 2-D shapes"
            )
        allowed = set(TAXONOMY.labels_for_view(self.view))
        found = set(np.unique(self.label_map).tolist()) - {BACKGROUND}
        extra = found - allowed
        if extra:
            raise ValidationError(
                f"{self.case_id}/{self.view}: labels {sorted(extra)} do not belong to the view"
            )

    @property
    def presence(self) -> np.ndarray:
        return presence(self.label_map)


@dataclass(frozen=True)
class DatasetSplit:
    train: frozenset
    val: frozenset
    test: frozenset

    def __post_init__(self):
        if self.train & self.val or self.train & self.test or self.val & self.test:
            raise ValidationError("split portions overlap")

    def portion(self, name: str) -> frozenset:
        return {"train": self.train, "val": self.val, "test": self.test}[name]


# ---------------------------------------------------------------- manifest I/O

_MANIFEST_KEYS = ("case_id", "view", "normality", "image_path", "label_path")


def load_manifest(path) -> list[SampleRecord]:
    """Parse a JSON-lines manifest. Relative paths resolve against its directory."""
    path = Path(path)
    root = path.parent
    records = []
    seen = set()
    with open(path) as fh:
        for index, line in enumerate(fh):
            if not line.strip():
                continue
            try:
                raw = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValidationError(f"record {index}: invalid JSON ({exc})") from None
            missing = [k for k in _MANIFEST_KEYS if k not in raw]
            if missing:
                raise ValidationError(f"record {index}: missing keys {missing}")
            if raw["view"] not in VIEWS:
                raise ValidationError(f"record {index}: unknown view {raw['view']!r}")
            if raw["normality"] not in NORMALITIES:
                raise ValidationError(f"record {index}: unknown normality {raw['normality']!r}")
            key = (str(raw["case_id"]), raw["view"])
            if key in seen:
                raise ValidationError(f"record {index}: duplicate (case_id, view) {key}")
            seen.add(key)
            paths = []
            for k in ("image_path", "label_path"):
                p = Path(raw[k])
                p = p if p.is_absolute() else root / p
                if not p.is_file():
                    raise FileNotFoundError(f"record {index} ({key[0]}/{key[1]}): {k} not found: {p}")
                paths.append(p)
            records.append(SampleRecord(key[0], raw["view"], raw["normality"], *paths))
    return records


def write_manifest(records: Iterable[SampleRecord], path) -> Path:
    """Write records as JSON lines, storing paths relative to the manifest when possible."""
    path = Path(path)
    root = path.parent.resolve()
    lines = []
    for rec in records:
        entry = {"case_id": rec.case_id, "view": rec.view, "normality": rec.normality}
        for k in ("image_path", "label_path"):
            p = Path(getattr(rec, k)).resolve()
            try:
                p = p.relative_to(root)
            except ValueError:
                pass
            entry[k] = p.as_posix()
        lines.append(json.dumps(entry, sort_keys=True))
    path.write_text("\n".join(lines) + "\n")
    return path


def read_image(path) -> np.ndarray:
    """Read a single-channel 8- or 16-bit PNG as float64 intensities in [0, 1]."""
    with Image.open(path) as im:
        arr = np.array(im)
    if arr.ndim != 2:
        raise ValidationError(f"{path}: expected single-channel image, got shape {arr.shape}")
    scale = 65535.0 if arr.dtype == np.uint16 or arr.max(initial=0) > 255 else 255.0
    return arr.astype(np.float64) / scale


def write_image(image: np.ndarray, path) -> None:
    """Store intensities in [0, 1] as a 16-bit grayscale PNG."""
    arr = np.round(np.clip(image, 0.0, 1.0) * 65535.0).astype(np.uint16)
    Image.fromarray(arr).save(path)


def read_label_map(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.array(im)
    if arr.ndim != 2:
        raise ValidationError(f"{path}: label map must be single-channel")
    if arr.max(initial=0) > N_FOREGROUND:
        raise ValidationError(f"{path}: label values must lie in 0..{N_FOREGROUND}")
    return arr.astype(np.uint8)


def write_label_map(label_map: np.ndarray, path) -> None:
    Image.fromarray(np.asarray(label_map, dtype=np.uint8), mode="L").save(path)


# ---------------------------------------------------------------- preprocessing


def _pad_square(arr: np.ndarray) -> np.ndarray:
    h, w = arr.shape
    side = max(h, w)
    top = (side - h) // 2
    left = (side - w) // 2
    return np.pad(arr, ((top, side - h - top), (left, side - w - left)), constant_values=0)


def preprocess(image, label_map, target_size: int = 128):
    """Zero-pad the shorter side to a square, then resize to ``target_size``.

    Images are resampled bilinearly and label maps by nearest neighbour, so
    the resized map only contains values that were already present.
    """
    image = np.asarray(image, dtype=np.float64)
    label_map = np.asarray(label_map)
    if image.size == 0:
        raise ValidationError("empty image")
    if image.shape != label_map.shape or image.ndim != 2:
        raise ValidationError(f"image {image.shape} and label map {label_map.shape} differ")
    image = _pad_square(image)
    label_map = _pad_square(label_map)
    side = image.shape[0]
    if side != target_size:
        factor = target_size / side
        image = ndimage.zoom(image, factor, order=1, mode="nearest", grid_mode=True)
        label_map = ndimage.zoom(label_map, factor, order=0, mode="nearest", grid_mode=True)
    return image, label_map.astype(np.uint8)


def load_sample(record: SampleRecord, target_size: int = 128) -> Sample:
    image, label_map = preprocess(read_image(record.image_path), read_label_map(record.label_path), target_size)
    return Sample(record.case_id, record.view, record.normality, image, label_map)


def load_samples(records: Sequence[SampleRecord], target_size: int = 128) -> list[Sample]:
    return [load_sample(r, target_size) for r in records]


def presence(label_map, n_labels: int = N_FOREGROUND) -> np.ndarray:
    """Boolean vector; entry ``l - 1`` is True iff label ``l`` occupies at least one pixel."""
    label_map = np.asarray(label_map)
    if label_map.size and (label_map.min() < 0 or label_map.max() > n_labels):
        raise ValidationError(f"label values must lie in 0..{n_labels}")
    counts = np.bincount(label_map.ravel().astype(np.int64), minlength=n_labels + 1)
    return counts[1:] > 0


# ---------------------------------------------------------------- splitting


def _largest_remainder(n: int, ratios: Sequence[float]) -> list[int]:
    quotas = [round(n * r, 9) for r in ratios]
    counts = [math.floor(q) for q in quotas]
    order = sorted(range(len(ratios)), key=lambda i: (-(quotas[i] - counts[i]), i))
    for i in order[: n - sum(counts)]:
        counts[i] += 1
    return counts


def split_patients(cases, ratios=(0.7, 0.1, 0.2), seed: int = 0) -> DatasetSplit:
    """Stratified patient-level train/val/test split.

    ``cases`` is an iterable of ``(case_id, normality)``. Each normality
    stratum is shuffled under ``seed`` and cut with largest-remainder counts.
    """
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3:
        raise ValidationError("expected three ratios (train, val, test)")
    if any(r < 0 for r in ratios) or not math.isclose(sum(ratios), 1.0, abs_tol=1e-9):
        raise ValidationError(f"ratios must be non-negative and sum to 1, got {ratios}")
    by_case = {}
    for case_id, normality in cases:
        by_case.setdefault(str(case_id), normality)
    if len(by_case) < len(ratios):
        raise ValidationError(f"need at least {len(ratios)} cases, got {len(by_case)}")

    rng = np.random.default_rng(seed)
    portions = [set(), set(), set()]
    for normality in sorted(set(by_case.values())):
        ids = sorted(c for c, n in by_case.items() if n == normality)
        ids = [ids[i] for i in rng.permutation(len(ids))]
        start = 0
        for portion, count in zip(portions, _largest_remainder(len(ids), ratios)):
            portion.update(ids[start : start + count])
            start += count
    return DatasetSplit(*(frozenset(p) for p in portions))


def select(samples: Sequence, case_ids, views=None) -> list:
    """Samples (or records) whose case is in ``case_ids`` and view in ``views``."""
    case_ids = set(case_ids)
    return [s for s in samples if s.case_id in case_ids and (views is None or s.view in views)]
