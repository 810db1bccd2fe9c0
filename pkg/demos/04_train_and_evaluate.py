"""
A small end-to-end run
======================

Train a reduced network for 25 epochs on 64 x 64 phantoms, then print
the per-label table and write overlays. Takes about a minute on a CPU.
The large structures are picked up by then; the small vessels and the
left/right chambers need the longer runs of configs/desk.yaml.
"""

from pathlib import Path

from echoseg.dataset import Sample, select, split_patients
from echoseg.metrics import evaluate, format_table
from echoseg.network import NetworkConfig, load_checkpoint
from echoseg.optimsched import ScheduleConfig
from echoseg.synthgen import PhantomSpec, generate_arrays
from echoseg.trainer import TrainConfig, predict, predict_maps, train

spec = PhantomSpec(image_size=64, n_cases=40, seed=1)
samples = [Sample(*fields) for fields in generate_arrays(spec)]
split = split_patients({(s.case_id, s.normality) for s in samples})

cfg = TrainConfig(
    batch_size=2,
    epochs=25,
    network=NetworkConfig(levels=4, base_channels=8, convs_per_block=(1, 2, 2, 2)),
    schedule=ScheduleConfig(lr_min=1e-3, lr_max=5e-2),
)
out = Path("demo_run")
result = train(cfg, select(samples, split.train), select(samples, split.val), out,
               progress=lambda r: print(f"epoch {r.epoch}: loss {r.train_loss:.3f}, val Dice {r.val_mean_dice:.3f}"))

model, _, _ = load_checkpoint(result.best_checkpoint)
test = select(samples, split.test)
print(format_table(evaluate(predict_maps(model, [s.image for s in test]), test), "combined model"))
predict(result.best_checkpoint, test[:4], out / "overlays")
