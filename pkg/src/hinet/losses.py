"""Reconstruction, generator and discriminator objectives.

All l1 terms are reduced by the per-voxel mean so the trade-off weights
(lambda1 = 100, lambda2 = 20) do not depend on patch size.  Scores are
clamped to [EPS, 1 - EPS] before any log.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import torch

from .errors import DimensionError, NumericError

EPS = 1e-7


@dataclass
class LossReport:
    l_recon: float
    l_g_adv: float
    l_g_l1: float
    l_g: float
    l_d: float
    total_g_objective: float

    CSV_FIELDS = ("step", "l_recon", "l_g_adv", "l_g_l1", "l_g", "l_d", "total")

    def to_csv_row(self, step):
        return {"step": step, "l_recon": self.l_recon, "l_g_adv": self.l_g_adv, "l_g_l1": self.l_g_l1,
                "l_g": self.l_g, "l_d": self.l_d, "total": self.total_g_objective}

    def is_finite(self):
        return all(torch.isfinite(torch.tensor(v)).item() for v in asdict(self).values())


def _as_tensor(x):
    return x if torch.is_tensor(x) else torch.as_tensor(x, dtype=torch.float64)


def reconstruction_loss(pairs):
    """Sum over modalities of the mean absolute difference between each
    source image and its autoencoder reconstruction."""
    total = 0.0
    for x, x_hat in pairs:
        x, x_hat = _as_tensor(x), _as_tensor(x_hat)
        if x.shape != x_hat.shape:
            raise DimensionError(f"reconstruction shape {tuple(x_hat.shape)} != source {tuple(x.shape)}")
        total = total + (x - x_hat).abs().mean()
    return total


def l1_loss(y_hat, y):
    y_hat, y = _as_tensor(y_hat), _as_tensor(y)
    if y.shape != y_hat.shape:
        raise DimensionError(f"synthesized shape {tuple(y_hat.shape)} != target {tuple(y.shape)}")
    return (y - y_hat).abs().mean()


def adversarial_generator_loss(d_fake, strict_paper=False):
    """Non-saturating ``-log D`` by default; ``strict_paper`` minimises
    ``log(1 - D)`` literally."""
    d_fake = _as_tensor(d_fake)
    if torch.any(d_fake < 0) or torch.any(d_fake > 1) or not torch.all(torch.isfinite(d_fake)):
        raise NumericError("discriminator score outside [0, 1]")
    d = d_fake.clamp(EPS, 1 - EPS)
    if strict_paper:
        return torch.log(1 - d).mean()
    return -torch.log(d).mean()


def generator_objective(d_fake, y_hat, y, lambda_l1=100.0, strict_paper=False):
    """Returns ``(l_g_adv, l_g_l1, l_g)`` with ``l_g = l_g_adv + lambda_l1 * l_g_l1``."""
    if lambda_l1 < 0:
        raise ValueError("lambda_l1 must be non-negative")
    adv = adversarial_generator_loss(d_fake, strict_paper)
    l1 = l1_loss(y_hat, y)
    return adv, l1, adv + lambda_l1 * l1


def discriminator_objective(d_real, d_fake):
    d_real = _as_tensor(d_real).clamp(EPS, 1 - EPS)
    d_fake = _as_tensor(d_fake).clamp(EPS, 1 - EPS)
    return -torch.log(d_real).mean() - torch.log(1 - d_fake).mean()
