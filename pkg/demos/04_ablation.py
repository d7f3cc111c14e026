"""Compare fusion strategies on held-out phantom subjects.

Each variant is trained once per seed with identical data and schedule;
the table pools the per-slice scores.  Expect roughly ten minutes per
three variants on one core at these settings.

    python demos/04_ablation.py runs/ablation hybrid early_fusion concate_d1
"""
import logging
import sys
from pathlib import Path

from hinet import ModelConfig, TrainConfig
from hinet.data import make_phantom_dataset, phantom_samples
from hinet.evaluate import evaluate_samples
from hinet.experiments import run_ablation
from hinet.model import FUSION_VARIANTS

logging.basicConfig(level=logging.INFO, format="%(message)s")
run_dir = Path(sys.argv[1] if len(sys.argv) > 1 else "runs/ablation")
variants = sys.argv[2:] or list(FUSION_VARIANTS)

trip = make_phantom_dataset(9, (64, 64), seed=123, n_slices=4)
train, test = phantom_samples(trip[:6]), phantom_samples(trip[6:])
result = run_ablation(train, lambda m: evaluate_samples(m, test), ModelConfig(input_size=(64, 64)),
                      TrainConfig(epochs=30, decay_start_epoch=15, checkpoint_every=0),
                      seeds=[0, 1, 2], variants=variants, run_dir=run_dir)
print(result.table())
for v in variants:
    print(f"{v:<14} mean PSNR over seeds {result.mean_psnr(v):.3f}")
