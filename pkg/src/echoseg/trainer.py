"""Training loop, validation, curve logging, checkpointing and overlay prediction."""

from __future__ import annotations

import csv
import hashlib
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from PIL import Image

from echoseg import metrics
from echoseg.augment import AugmentConfig, augment_pair, center_intensity, sample_rng
from echoseg.dataset import N_FOREGROUND, TAXONOMY, VIEWS, ValidationError, write_label_map
from echoseg.losses import LossConfig, one_hot, total_loss
from echoseg.network import NetworkConfig, build, load_checkpoint, save_checkpoint
from echoseg.optimsched import ScheduleConfig, lr_at, sgd_step

log = logging.getLogger(__name__)

VIEW_FILTERS = ("3VTV_only", "4CHV_only", "combined")
CURVE_COLUMNS = ["epoch", "lr", "train_loss", "val_mean_dice"] + [
    f"val_dice_label_{l}" for l in range(1, N_FOREGROUND + 1)
]
STEP_COLUMNS = ["epoch", "step", "lr", "total", "dice_term", "ce_term"] + [
    f"dice_label_{l}" for l in range(1, N_FOREGROUND + 1)
]

# label id -> RGB; background (0) is never painted
PALETTE = (
    (0, 0, 0),
    (230, 25, 75),
    (60, 180, 75),
    (255, 225, 25),
    (0, 130, 200),
    (245, 130, 48),
    (145, 30, 180),
    (70, 240, 240),
    (240, 50, 230),
    (210, 245, 60),
    (250, 190, 212),
    (0, 128, 128),
    (220, 190, 255),
    (170, 110, 40),
    (128, 0, 0),
)
OVERLAY_ALPHA = 0.5


class NonFiniteLossError(FloatingPointError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 8
    epochs: int = 30
    seed: int = 0
    view_filter: str = "combined"
    momentum: float = 0.9
    ds_weights: tuple = (1.0, 0.5, 0.25)
    loss: LossConfig = field(default_factory=LossConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    workers: int = 1

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValidationError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValidationError("epochs must be >= 0")
        if normalize_view_filter(self.view_filter) != self.view_filter:
            object.__setattr__(self, "view_filter", normalize_view_filter(self.view_filter))
        object.__setattr__(self, "ds_weights", tuple(float(w) for w in self.ds_weights))
        if len(self.ds_weights) != 1 + self.network.deep_supervision_levels:
            raise ValidationError(
                f"ds_weights needs {1 + self.network.deep_supervision_levels} entries, got {len(self.ds_weights)}"
            )
        if self.epochs > self.schedule.total_epochs:
            raise ValidationError(f"epochs ({self.epochs}) exceed the schedule length ({self.schedule.total_epochs})")

    @property
    def active_labels(self) -> list[int]:
        return TAXONOMY.active_labels(self.view_filter)

    @property
    def views(self) -> tuple:
        if self.view_filter == "combined":
            return VIEWS
        return (self.view_filter.split("_")[0],)


def normalize_view_filter(value: str) -> str:
    key = str(value).lower()
    for vf in VIEW_FILTERS:
        if key in (vf.lower(), vf.split("_")[0].lower()):
            return vf
    raise ValidationError(f"unknown view filter {value!r}; expected one of 3vtv, 4chv, combined")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_mean_dice: float  # fraction in [0, 1]
    lr: float
    val_per_label: dict = field(default_factory=dict)  # label -> fraction, present labels only


@dataclass
class TrainResult:
    best_checkpoint: Path
    last_checkpoint: Path
    curves_csv: Path
    records: list


def parameter_digest(model: torch.nn.Module) -> str:
    h = hashlib.sha256()
    for name, tensor in sorted(model.state_dict().items()):
        h.update(name.encode())
        h.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def _worker_count(cfg: TrainConfig) -> int:
    env = os.environ.get("ECHOSEG_WORKERS")
    return max(1, int(env)) if env else max(1, cfg.workers)


def _augmented(sample, cfg: TrainConfig, epoch: int, index: int):
    rng = sample_rng(cfg.augment.seed + cfg.seed, epoch, index)
    image, label_map, _ = augment_pair(sample.image, sample.label_map, cfg.augment, rng)
    return center_intensity(image), label_map


def make_batch(samples: Sequence, indices, cfg: TrainConfig, epoch: int, pool=None):
    """Augmented, centred ``(images B x 1 x H x W, label maps B x H x W)`` tensors."""
    jobs = [(samples[i], cfg, epoch, int(i)) for i in indices]
    if pool is not None:
        pairs = list(pool.map(lambda a: _augmented(*a), jobs))
    else:
        pairs = [_augmented(*a) for a in jobs]
    images = torch.from_numpy(np.stack([p[0] for p in pairs]).astype(np.float32)).unsqueeze(1)
    labels = torch.from_numpy(np.stack([p[1] for p in pairs]).astype(np.int64))
    return images, labels


def predict_maps(model, images: Sequence[np.ndarray], batch_size: int = 8) -> list[np.ndarray]:
    """Argmax label maps of the main output for raw (uncentred) images, in eval mode."""
    was_training = model.training
    model.eval()
    out = []
    with torch.no_grad():
        for start in range(0, len(images), batch_size):
            chunk = [center_intensity(im) for im in images[start : start + batch_size]]
            x = torch.from_numpy(np.stack(chunk).astype(np.float32)).unsqueeze(1)
            logits = model(x).main_logits
            out.extend(logits.argmax(dim=1).numpy().astype(np.uint8))
    model.train(was_training)
    return out


def validate(model, val_set: Sequence, labels, batch_size: int = 8) -> metrics.MetricsReport:
    preds = predict_maps(model, [s.image for s in val_set], batch_size)
    return metrics.evaluate(preds, val_set, labels=labels)


def _fmt(x) -> str:
    return "" if x is None else repr(float(x))


def write_curves(records: Sequence[EpochRecord], path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CURVE_COLUMNS)
        for r in records:
            per = [_fmt(r.val_per_label.get(l)) for l in range(1, N_FOREGROUND + 1)]
            writer.writerow([r.epoch, _fmt(r.lr), _fmt(r.train_loss), _fmt(r.val_mean_dice), *per])
    return path


def read_curves(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def train(cfg: TrainConfig, train_set: Sequence, val_set: Sequence, out_dir, progress=None) -> TrainResult:
    """Train a model and return the paths of its checkpoints and curves.

    Samples outside ``cfg.view_filter`` are ignored. ``progress`` is called
    with each ``EpochRecord`` as it completes.
    """
    if cfg.epochs == 0:
        raise ValidationError("nothing trained: epochs is 0")
    train_set = [s for s in train_set if s.view in cfg.views]
    val_set = [s for s in val_set if s.view in cfg.views]
    if not train_set or not val_set:
        raise ValidationError("training and validation sets must be non-empty after view filtering")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    best_path, last_path = out_dir / "best.pt", out_dir / "last.pt"
    curves_path, steps_path = out_dir / "curves.csv", out_dir / "steps.csv"

    model = build(cfg.network, seed=cfg.seed)
    model.train()
    model.set_generator(torch.Generator().manual_seed(cfg.seed + 1))
    params = dict(model.named_parameters())
    velocity = {n: torch.zeros_like(p) for n, p in params.items()}
    labels = cfg.active_labels
    n_classes = cfg.network.n_classes
    n_batches = math.ceil(len(train_set) / cfg.batch_size)
    meta = {"view_filter": cfg.view_filter, "labels": labels, "image_size": int(train_set[0].image.shape[0])}

    records: list[EpochRecord] = []
    best = -math.inf
    workers = _worker_count(cfg)
    pool = ThreadPoolExecutor(workers) if workers > 1 else None
    steps_fh = open(steps_path, "w", newline="")
    steps = csv.writer(steps_fh, lineterminator="\n")
    steps.writerow(STEP_COLUMNS)
    try:
        for epoch in range(cfg.epochs):
            order = np.random.default_rng([cfg.seed, epoch]).permutation(len(train_set))
            loss_sum = 0.0
            for b in range(n_batches):
                idx = order[b * cfg.batch_size : (b + 1) * cfg.batch_size]
                x, y = make_batch(train_set, idx, cfg, epoch, pool)
                lr = lr_at(epoch + b / n_batches, cfg.schedule)
                out = model(x)
                breakdown = total_loss(out, one_hot(y, n_classes), cfg.loss, cfg.ds_weights, labels)
                loss = breakdown.total
                if not torch.isfinite(loss):
                    raise NonFiniteLossError(f"non-finite loss at epoch {epoch}, batch {b}; last good checkpoint: {last_path}")
                for p in params.values():
                    p.grad = None
                loss.backward()
                with torch.no_grad():
                    grads = {n: p.grad if p.grad is not None else torch.zeros_like(p) for n, p in params.items()}
                    new_p, velocity = sgd_step({n: p.detach() for n, p in params.items()}, grads, velocity, lr, cfg.momentum)
                    for n, p in params.items():
                        p.copy_(new_p[n])
                loss_sum += float(loss.detach()) * len(idx)
                per = breakdown.per_label_dice.tolist()
                steps.writerow([epoch, b, _fmt(lr), _fmt(loss.detach()), _fmt(breakdown.dice_term.detach()), _fmt(breakdown.ce_term.detach())]
                               + [_fmt(v) for v in per] + [""] * (N_FOREGROUND - len(per)))
            report = validate(model, val_set, labels, cfg.batch_size)
            record = EpochRecord(
                epoch=epoch + 1,
                train_loss=loss_sum / len(train_set),
                val_mean_dice=report.overall_mean / 100.0,
                lr=lr_at(epoch, cfg.schedule),
                val_per_label={l: s.mean / 100.0 for l, s in report.per_label.items()},
            )
            records.append(record)
            write_curves(records, curves_path)
            steps_fh.flush()
            save_checkpoint(model, last_path, {**meta, "epoch": record.epoch, "val_mean_dice": record.val_mean_dice})
            if record.val_mean_dice > best:
                best = record.val_mean_dice
                save_checkpoint(model, best_path, {**meta, "epoch": record.epoch, "val_mean_dice": best})
            log.info("epoch %d loss %.4f val dice %.4f lr %.2e", record.epoch, record.train_loss, record.val_mean_dice, record.lr)
            if progress is not None:
                progress(record)
    finally:
        steps_fh.close()
        if pool is not None:
            pool.shutdown()
    return TrainResult(best_path, last_path, curves_path, records)


# ---------------------------------------------------------------- prediction


def overlay(image: np.ndarray, label_map: np.ndarray, alpha: float = OVERLAY_ALPHA) -> np.ndarray:
    """RGB uint8 overlay: grayscale image with labelled pixels blended toward the palette."""
    gray = np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    rgb = np.repeat(gray[..., None], 3, axis=-1)
    mask = label_map > 0
    if mask.any():
        colours = np.asarray(PALETTE, dtype=np.float64)[label_map[mask]]
        blended = (1.0 - alpha) * rgb[mask].astype(np.float64) + alpha * colours
        rgb[mask] = np.round(blended).astype(np.uint8)
    return rgb


def predict(checkpoint, samples: Sequence, out_dir, batch_size: int = 8) -> list[Path]:
    """Write an overlay PNG and a raw label-map PNG per sample; return all paths."""
    model, cfg, _ = load_checkpoint(checkpoint)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for s in samples:
        h, w = s.image.shape
        if h % cfg.divisor or w % cfg.divisor:
            raise ValidationError(f"{s.case_id}/{s.view}: size {h}x{w} not divisible by {cfg.divisor}")
    maps = predict_maps(model, [s.image for s in samples], batch_size)
    paths = []
    for s, pred in zip(samples, maps):
        stem = f"{s.case_id}_{s.view}"
        ov = out_dir / f"{stem}_overlay.png"
        lm = out_dir / f"{stem}_labels.png"
        Image.fromarray(overlay(s.image, pred)).save(ov)
        write_label_map(pred, lm)
        paths.extend([ov, lm])
    return paths
