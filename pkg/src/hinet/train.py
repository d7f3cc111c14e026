"""Alternating adversarial training with checkpoint/resume.

Each batch gets one discriminator update on (real, detached fake) and
then one update of everything else (encoders, decoders, fusion network,
generator) on ``l_g_adv + lambda1 * l_g_l1 + lambda2 * l_recon``.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch

from . import checkpoint as ckpt
from .errors import ConfigError, NumericError
from .losses import LossReport, discriminator_objective, generator_objective, reconstruction_loss
from .model import HiNet, ModelConfig, init_params

log = logging.getLogger(__name__)

LOG_FIELDS = ("epoch", "step", "l_recon", "l_g_adv", "l_g_l1", "l_g", "l_d", "lr")


@dataclass
class TrainConfig:
    epochs: int = 300
    base_lr: float = 2e-4
    decay_start_epoch: int = 100
    lambda_l1: float = 100.0
    lambda_recon: float = 20.0
    batch_size: int = 4
    seed: int = 0
    betas: tuple = (0.5, 0.999)
    strict_paper_adv: bool = False
    shuffle: bool = True
    checkpoint_every: int = 10

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if self.epochs < 1 or self.epochs < self.decay_start_epoch:
            raise ConfigError("epochs must be >= max(1, decay_start_epoch)")
        if self.base_lr <= 0:
            raise ConfigError("base_lr must be positive")
        if self.lambda_l1 < 0 or self.lambda_recon < 0:
            raise ConfigError("loss weights must be non-negative")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")

    def to_dict(self):
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d):
        extra = set(d) - set(cls.__dataclass_fields__)
        if extra:
            raise ConfigError(f"unknown TrainConfig fields: {sorted(extra)}")
        return cls(**d)


def lr_schedule(epoch, config):
    """Constant for the first ``decay_start_epoch`` epochs, then linear to 0."""
    if not 1 <= epoch <= config.epochs:
        raise ConfigError(f"epoch {epoch} outside 1..{config.epochs}")
    if epoch <= config.decay_start_epoch:
        return config.base_lr
    span = config.epochs - config.decay_start_epoch
    return config.base_lr * ((config.epochs - epoch) / span)


class Trainer:
    """Model plus both optimizers; the unit that is checkpointed."""

    def __init__(self, model_config, train_config, model=None):
        self.model_config = model_config
        self.config = train_config
        self.model = model if model is not None else init_params(model_config, train_config.seed)
        self.opt_g = torch.optim.Adam(self.model.generator_parameters(), lr=train_config.base_lr,
                                      betas=train_config.betas)
        self.opt_d = torch.optim.Adam(self.model.discriminator_parameters(), lr=train_config.base_lr,
                                      betas=train_config.betas)
        self.epoch = 0
        self.step = 0

    def set_lr(self, lr):
        for opt in (self.opt_g, self.opt_d):
            for group in opt.param_groups:
                group["lr"] = lr

    # ------------------------------------------------------------------ checkpoints

    def state_tensors(self):
        tensors = ckpt.model_tensors(self.model)
        tensors.update(ckpt.optimizer_tensors("g", self.opt_g, self.model))
        tensors.update(ckpt.optimizer_tensors("d", self.opt_d, self.model))
        tensors["rng.torch"] = torch.get_rng_state()
        return tensors

    def save(self, path):
        meta = {"epoch": self.epoch, "step": self.step, "train_config": self.config.to_dict()}
        return ckpt.save_tensors(path, self.state_tensors(), self.model_config.to_dict(), meta)

    @classmethod
    def load(cls, path, train_config=None):
        tensors, mcfg, meta = ckpt.load_tensors(path)
        if mcfg is None:
            raise ckpt.FormatError(f"{path}: field 'model_config' missing")
        model_config = ModelConfig.from_dict(mcfg)
        config = train_config or TrainConfig.from_dict(meta["train_config"])
        trainer = cls(model_config, config, model=HiNet(model_config))
        state = {k[len("model."):]: v for k, v in tensors.items() if k.startswith("model.")}
        missing = set(trainer.model.state_dict()) - set(state)
        if missing:
            raise ckpt.FormatError(f"{path}: field 'model.{sorted(missing)[0]}' missing")
        trainer.model.load_state_dict(state)
        ckpt.restore_optimizer("g", trainer.opt_g, trainer.model, tensors)
        ckpt.restore_optimizer("d", trainer.opt_d, trainer.model, tensors)
        if "rng.torch" in tensors:
            torch.set_rng_state(tensors["rng.torch"])
        trainer.epoch = int(meta["epoch"])
        trainer.step = int(meta["step"])
        return trainer

    # ------------------------------------------------------------------ optimisation

    def train_step(self, batch, grad_norms=None):
        """One D update then one G-side update.  If ``grad_norms`` is a
        dict it is filled with the gradient norm of every parameter."""
        if not batch:
            raise ConfigError("empty batch")
        x1, x2, y = batch_tensors(batch)
        model, cfg = self.model, self.config
        model.train()

        out = model(x1, x2)
        d_real = model.discriminator(x1, x2, y)
        d_fake = model.discriminator(x1, x2, out.synthesized.detach())
        l_d = discriminator_objective(d_real, d_fake)
        self.opt_d.zero_grad(set_to_none=True)
        l_d.backward()
        _check_finite(l_d, "l_d")
        self.opt_d.step()

        d_params = model.discriminator_parameters()
        for p in d_params:
            p.requires_grad_(False)
        try:
            d_fake_g = model.discriminator(x1, x2, out.synthesized)
            l_adv, l_l1, l_g = generator_objective(d_fake_g, out.synthesized, y, cfg.lambda_l1,
                                                   cfg.strict_paper_adv)
            l_rec = reconstruction_loss(zip((x1, x2), out.reconstructions))
            total = l_g + cfg.lambda_recon * l_rec
            self.opt_g.zero_grad(set_to_none=True)
            total.backward()
        finally:
            for p in d_params:
                p.requires_grad_(True)

        report = LossReport(*(float(t.detach()) for t in (l_rec, l_adv, l_l1, l_g, l_d, total)))
        if not report.is_finite():
            raise NumericError(f"non-finite loss at step {self.step + 1}: {report}", report)
        if grad_norms is not None:
            for name, p in model.named_parameters():
                grad_norms[name] = 0.0 if p.grad is None else float(p.grad.norm())
        self.opt_g.step()
        self.step += 1
        return report

    def fit(self, samples, run_dir=None, on_epoch=None):
        """Train until ``config.epochs``; resumes from ``self.epoch``.

        Writes ``loss_log.csv`` and ``ckpt_epoch_<k>`` files into
        ``run_dir`` when given.  Returns the list of log rows produced.
        """
        cfg = self.config
        if not samples:
            raise ConfigError("no training samples")
        run_dir = Path(run_dir) if run_dir is not None else None
        log_path = None
        if run_dir is not None:
            run_dir.mkdir(parents=True, exist_ok=True)
            log_path = run_dir / "loss_log.csv"
            _prepare_log(log_path, self.step)
        rows = []
        n_batches = math.ceil(len(samples) / cfg.batch_size)
        for epoch in range(self.epoch + 1, cfg.epochs + 1):
            lr = lr_schedule(epoch, cfg)
            self.set_lr(lr)
            order = epoch_order(len(samples), cfg.seed, epoch, cfg.shuffle)
            epoch_rows = []
            for b in range(n_batches):
                batch = [samples[i] for i in order[b * cfg.batch_size:(b + 1) * cfg.batch_size]]
                try:
                    rep = self.train_step(batch)
                except NumericError as exc:
                    if log_path is not None:
                        bad = [_log_row(epoch, self.step + 1, exc.report, lr)] if exc.report is not None else []
                        _append_log(log_path, epoch_rows + bad)
                    raise
                epoch_rows.append(_log_row(epoch, self.step, rep, lr))
            self.epoch = epoch
            rows.extend(epoch_rows)
            if log_path is not None:
                _append_log(log_path, epoch_rows)
                if cfg.checkpoint_every and (epoch % cfg.checkpoint_every == 0 or epoch == cfg.epochs):
                    self.save(run_dir / f"ckpt_epoch_{epoch}")
            if on_epoch is not None:
                on_epoch(self, epoch_rows)
        return rows


def epoch_order(n, seed, epoch, shuffle=True):
    if not shuffle:
        return np.arange(n)
    return np.random.default_rng([int(seed), int(epoch)]).permutation(n)


def batch_tensors(batch):
    def stack(attr):
        return torch.from_numpy(np.stack([np.asarray(getattr(s, attr), dtype=np.float32) for s in batch])[:, None])
    return stack("x1"), stack("x2"), stack("y")


def _check_finite(t, name):
    if not torch.isfinite(t).all():
        raise NumericError(f"{name} is not finite")


def _log_row(epoch, step, rep, lr):
    return {"epoch": epoch, "step": step, "l_recon": rep.l_recon, "l_g_adv": rep.l_g_adv, "l_g_l1": rep.l_g_l1,
            "l_g": rep.l_g, "l_d": rep.l_d, "lr": lr}


def _prepare_log(path, keep_steps):
    """Start a fresh log, or truncate an existing one to ``keep_steps`` rows on resume."""
    rows = read_loss_log(path)[:keep_steps] if keep_steps and path.exists() else []
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, LOG_FIELDS)
        w.writeheader()
        w.writerows(_fmt(r) for r in rows)


def _append_log(path, rows):
    with open(path, "a", newline="") as fh:
        csv.DictWriter(fh, LOG_FIELDS).writerows(_fmt(r) for r in rows)


def _fmt(row):
    return {k: repr(float(v)) if isinstance(v, float) else v for k, v in row.items()}


def read_loss_log(path):
    with open(path, newline="") as fh:
        return [{k: (int(v) if k in ("epoch", "step") else float(v)) for k, v in row.items()}
                for row in csv.DictReader(fh)]


def fit(samples, train_config, model_config=None, run_dir=None, resume_from=None):
    """Convenience wrapper: build (or resume) a :class:`Trainer` and train it."""
    if resume_from is not None:
        trainer = Trainer.load(resume_from, train_config)
    else:
        trainer = Trainer(model_config or ModelConfig(), train_config)
    rows = trainer.fit(samples, run_dir)
    return trainer, rows
