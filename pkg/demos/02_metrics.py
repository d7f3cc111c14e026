"""The three image-quality scores on a degraded image.

Noise and blur both lower PSNR and raise NMSE.  SSIM forgives mild
blur far more than it forgives noise.
"""
import numpy as np
from scipy.ndimage import gaussian_filter

from hinet import metrics

rng = np.random.default_rng(0)
truth = gaussian_filter(rng.random((96, 96)), 3)
truth = (truth - truth.min()) / (truth.max() - truth.min())

print(f"{'degradation':<16}{'PSNR':>8}{'NMSE':>10}{'SSIM':>8}")
for name, img in [
    ("none", truth),
    ("noise 0.02", np.clip(truth + 0.02 * rng.standard_normal(truth.shape), 0, 1)),
    ("noise 0.10", np.clip(truth + 0.10 * rng.standard_normal(truth.shape), 0, 1)),
    ("blur sigma 2", gaussian_filter(truth, 2)),
]:
    print(f"{name:<16}{metrics.psnr(truth, img):>8.2f}{metrics.nmse(truth, img):>10.4f}"
          f"{metrics.ssim(truth, img):>8.3f}")

records = [metrics.MetricsRecord("demo", k, metrics.psnr(truth, img), metrics.nmse(truth, img),
                                 metrics.ssim(truth, img))
           for k, img in enumerate(np.clip(truth + s * rng.standard_normal(truth.shape), 0, 1)
                                   for s in (0.01, 0.03, 0.05))]
print()
print(metrics.aggregate(records, "noise sweep").format_table())
