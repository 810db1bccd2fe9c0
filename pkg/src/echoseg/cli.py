"""Command-line entry point: synth, train, eval, predict, curves.

Exit codes: 0 success, 2 invalid input or configuration, 3 I/O failure,
4 training aborted on a non-finite loss.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from echoseg import __version__
from echoseg.augment import AugmentConfig
from echoseg.dataset import ValidationError, load_manifest, load_samples, select, split_patients
from echoseg.losses import EPSILON_DICE, ROBUST_DICE, LossConfig
from echoseg.network import ConfigurationError, NetworkConfig
from echoseg.optimsched import ScheduleConfig
from echoseg.synthgen import PhantomSpec

log = logging.getLogger("echoseg")

EXIT_OK, EXIT_INVALID, EXIT_IO, EXIT_NONFINITE = 0, 2, 3, 4
RESOLVED_CONFIG = "resolved_config.yaml"


@dataclass(frozen=True)
class DataConfig:
    manifest: str | None = None
    target_size: int = 128
    split_ratios: tuple = (0.7, 0.1, 0.2)
    split_seed: int = 0


@dataclass(frozen=True)
class RunConfig:
    batch_size: int = 8
    epochs: int = 30
    seed: int = 0
    view_filter: str = "combined"
    momentum: float = 0.9
    ds_weights: tuple = (1.0, 0.5, 0.25)
    workers: int = 1


SECTIONS = {
    "data": DataConfig,
    "phantom": PhantomSpec,
    "train": RunConfig,
    "loss": LossConfig,
    "schedule": ScheduleConfig,
    "network": NetworkConfig,
    "augment": AugmentConfig,
}


@dataclass(frozen=True)
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    phantom: PhantomSpec = field(default_factory=PhantomSpec)
    train: RunConfig = field(default_factory=RunConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def train_config(self):
        from echoseg.trainer import TrainConfig

        return TrainConfig(
            **dataclasses.asdict(self.train),
            loss=self.loss,
            schedule=self.schedule,
            network=self.network,
            augment=self.augment,
        )

    def to_dict(self) -> dict:
        return {name: _plain(dataclasses.asdict(getattr(self, name))) for name in SECTIONS}


def _plain(value):
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    return value


def _build_section(name: str, values) -> object:
    cls = SECTIONS[name]
    if values is None:
        values = {}
    if not isinstance(values, dict):
        raise ValidationError(f"section {name!r} must be a mapping")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - set(fields))
    if unknown:
        raise ValidationError(f"unknown key(s) in section {name!r}: {', '.join(unknown)}")
    kwargs = {}
    for key, value in values.items():
        default = fields[key].default
        kwargs[key] = tuple(value) if isinstance(default, tuple) and isinstance(value, list) else value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ValidationError(f"section {name!r}: {exc}") from None


def config_from_dict(raw) -> ExperimentConfig:
    raw = raw or {}
    if not isinstance(raw, dict):
        raise ValidationError("config file must contain a mapping of sections")
    unknown = sorted(set(raw) - set(SECTIONS) - {"version"})
    if unknown:
        raise ValidationError(f"unknown config section(s): {', '.join(unknown)}")
    return ExperimentConfig(**{name: _build_section(name, raw.get(name)) for name in SECTIONS})


def _apply_override(raw: dict, assignment: str) -> None:
    key, sep, value = assignment.partition("=")
    section, dot, name = key.strip().partition(".")
    if not sep or not dot or not name:
        raise ValidationError(f"override {assignment!r} must look like section.key=value")
    if section not in SECTIONS:
        raise ValidationError(f"unknown config section {section!r} in override {assignment!r}")
    raw.setdefault(section, {})
    if raw[section] is None:
        raw[section] = {}
    raw[section][name] = yaml.safe_load(value)


def load_config(path=None, overrides=()) -> ExperimentConfig:
    """Read a YAML config (or start from defaults) and apply ``section.key=value`` overrides."""
    raw = {}
    if path is not None:
        with open(path) as fh:  # missing file -> OSError -> exit 3
            raw = yaml.safe_load(fh) or {}
        if not isinstance(raw, dict):
            raise ValidationError(f"{path}: expected a mapping of sections")
    for assignment in overrides:
        _apply_override(raw, assignment)
    return config_from_dict(raw)


def dump_config(cfg: ExperimentConfig) -> str:
    doc = {"version": f"echoseg {__version__}", **cfg.to_dict()}
    return yaml.safe_dump(doc, sort_keys=True, default_flow_style=False)


def write_resolved(cfg: ExperimentConfig, out_dir) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / RESOLVED_CONFIG
    path.write_text(dump_config(cfg))
    return path


# ---------------------------------------------------------------- commands


def _config_from_args(args) -> ExperimentConfig:
    overrides = list(args.set or [])
    if getattr(args, "view", None):
        overrides.append(f"train.view_filter={args.view}")
    if getattr(args, "loss_mode", None):
        overrides.append(f"loss.mode={args.loss_mode}")
    if getattr(args, "epochs", None) is not None:
        overrides.append(f"train.epochs={args.epochs}")
    return load_config(args.config, overrides)


def cmd_synth(args) -> int:
    from echoseg.synthgen import generate

    cfg = _config_from_args(args)
    manifest = generate(cfg.phantom, args.out)
    write_resolved(cfg, args.out)
    print(manifest)
    return EXIT_OK


def _split_samples(cfg: ExperimentConfig, manifest):
    samples = load_samples(load_manifest(manifest), cfg.data.target_size)
    split = split_patients({(s.case_id, s.normality) for s in samples}, cfg.data.split_ratios, cfg.data.split_seed)
    return samples, split


def cmd_train(args) -> int:
    from echoseg.trainer import train

    cfg = _config_from_args(args)
    manifest = args.manifest or cfg.data.manifest
    if manifest is None:
        raise ValidationError("no manifest given (use --manifest or data.manifest in the config)")
    train_cfg = cfg.train_config()
    out = Path(args.out)
    samples, split = _split_samples(cfg, manifest)
    write_resolved(cfg, out)
    (out / "split.json").write_text(
        json.dumps({name: sorted(split.portion(name)) for name in ("train", "val", "test")}, indent=1) + "\n"
    )
    result = train(train_cfg, select(samples, split.train), select(samples, split.val), out)
    last = result.records[-1]
    print(f"best checkpoint: {result.best_checkpoint}")
    print(f"curves: {result.curves_csv}")
    print(f"final epoch {last.epoch}: train loss {last.train_loss:.4f}, val mean Dice {100 * last.val_mean_dice:.2f}%")
    return EXIT_OK


def _eval_samples(args, views):
    samples = load_samples(load_manifest(args.manifest), args.size)
    if args.split is not None:
        portion = json.loads(Path(args.split).read_text())
        if args.subset not in portion:
            raise ValidationError(f"split file has no {args.subset!r} portion")
        samples = select(samples, portion[args.subset])
    samples = [s for s in samples if s.view in views]
    if not samples:
        raise ValidationError("no samples to evaluate after filtering")
    return samples


def cmd_eval(args) -> int:
    from echoseg import metrics
    from echoseg.dataset import VIEWS, TAXONOMY
    from echoseg.network import load_checkpoint
    from echoseg.trainer import normalize_view_filter, predict_maps

    model, meta = None, {}
    if not args.debug_identity:
        if args.checkpoint is None:
            raise ValidationError("--checkpoint is required unless --debug-identity is given")
        model, _, meta = load_checkpoint(args.checkpoint)
    view_filter = normalize_view_filter(args.view or meta.get("view_filter", "combined"))
    args.size = args.size or meta.get("image_size", 128)
    views = VIEWS if view_filter == "combined" else (view_filter.split("_")[0],)
    samples = _eval_samples(args, views)
    if model is None:
        preds = [s.label_map for s in samples]
    else:
        preds = predict_maps(model, [s.image for s in samples])
    report = metrics.evaluate(preds, samples, labels=TAXONOMY.active_labels(view_filter))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    metrics.write_report_csv(report, out / "report.csv")
    table = metrics.format_table(report, title=f"{view_filter} model")
    (out / "report.txt").write_text(table + "\n")
    print(table)
    return EXIT_OK


def cmd_predict(args) -> int:
    from echoseg.network import load_checkpoint
    from echoseg.trainer import predict

    _, _, meta = load_checkpoint(args.checkpoint)
    samples = load_samples(load_manifest(args.manifest), args.size or meta.get("image_size", 128))
    paths = predict(args.checkpoint, samples, args.out)
    print(f"wrote {len(paths)} images to {args.out}")
    return EXIT_OK


def cmd_curves(args) -> int:
    from echoseg.plots import plot_curves

    path = plot_curves(args.run_dir, args.out)
    print(path)
    return EXIT_OK


# ---------------------------------------------------------------- parser


def _add_config_args(p, view=False):
    p.add_argument("--config", type=Path, help="YAML experiment config (defaults when omitted)")
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override one config value (repeatable)")
    if view:
        p.add_argument("--view", choices=["3vtv", "4chv", "combined"], help="label set / view filter")
        p.add_argument("--loss-mode", choices=[ROBUST_DICE, EPSILON_DICE], help="soft Dice formulation")
        p.add_argument("--epochs", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="echoseg", description="Multiview fetal heart segmentation experiments.")
    parser.add_argument("--version", action="version", version=f"echoseg {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log every epoch")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a phantom dataset")
    _add_config_args(p)
    p.add_argument("--out", required=True, type=Path)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model")
    _add_config_args(p, view=True)
    p.add_argument("--manifest", type=Path, help="dataset manifest (overrides data.manifest)")
    p.add_argument("--out", required=True, type=Path)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="per-label Dice report")
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--manifest", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--view", choices=["3vtv", "4chv", "combined"], help="override the checkpoint's view filter")
    p.add_argument("--size", type=int, help="preprocessing size (default: from the checkpoint)")
    p.add_argument("--split", type=Path, help="split.json written by train")
    p.add_argument("--subset", default="test", choices=["train", "val", "test"])
    p.add_argument("--debug-identity", action="store_true", help="score ground truth against itself")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="write overlay and label-map PNGs")
    p.add_argument("--checkpoint", required=True, type=Path)
    p.add_argument("--manifest", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--size", type=int)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("curves", help="plot loss, validation Dice and learning rate of a run")
    p.add_argument("--run-dir", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path, help="PNG path, or a directory to hold curves.png")
    p.set_defaults(func=cmd_curves)
    return parser


def main(argv=None) -> int:
    from echoseg.trainer import NonFiniteLossError

    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except NonFiniteLossError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NONFINITE
    except (ValidationError, ConfigurationError, ValueError, yaml.YAMLError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
