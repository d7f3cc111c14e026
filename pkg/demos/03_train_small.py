"""Train the hybrid model briefly on 64x64 phantoms and score it.

Takes a couple of minutes on one CPU core.  The loss log and a preview
grid end up in the run directory; ``hinet report --run-dir`` plots them.

    python demos/03_train_small.py runs/demo
"""
import sys
from pathlib import Path

import numpy as np

from hinet import ModelConfig, Trainer, TrainConfig
from hinet.data import make_phantom_dataset, phantom_samples
from hinet.evaluate import evaluate_samples
from hinet.experiments import emit_report, save_preview

run_dir = Path(sys.argv[1] if len(sys.argv) > 1 else "runs/demo")
trip = make_phantom_dataset(6, (64, 64), seed=1, n_slices=4)
train, test = phantom_samples(trip[:4]), phantom_samples(trip[4:])

trainer = Trainer(ModelConfig(input_size=(64, 64)),
                  TrainConfig(epochs=20, decay_start_epoch=10, checkpoint_every=10))


def progress(tr, rows):
    last = rows[-1]
    print(f"epoch {tr.epoch:3d}  l1 {last['l_g_l1']:.4f}  D {last['l_d']:.3f}  lr {last['lr']:.2e}")


trainer.fit(train, run_dir, on_epoch=progress)
save_preview(run_dir / "preview.npz", trainer.model, test)

for name, samples in (("train", train), ("held-out", test)):
    recs = evaluate_samples(trainer.model, samples)
    print(f"{name:>8}: PSNR {np.mean([r.psnr for r in recs]):.2f} dB, "
          f"SSIM {np.mean([r.ssim for r in recs]):.3f}")

written = emit_report(run_dir)
print("report files:", *written["loss_curves"], *written["grids"], sep="\n  ")
