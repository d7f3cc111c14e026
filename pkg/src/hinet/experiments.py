"""Fusion variants, run manifests, the ablation harness and reports."""
from __future__ import annotations

import csv
import hashlib
import json
import logging
from dataclasses import dataclass, field, replace
from functools import partial
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, HiNetError
from .metrics import METRICS, aggregate, format_table, read_slice_csv, write_slice_csv
from .model import FUSION_VARIANTS, ModelConfig, init_params
from .train import LOG_FIELDS, Trainer, TrainConfig, read_loss_log

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class VariantSpec:
    name: str
    description: str
    overrides: dict = field(default_factory=dict)


VARIANTS = {
    "hybrid": VariantSpec("hybrid", "MFB fusion network and MFB generator"),
    "early_fusion": VariantSpec("early_fusion", "sources stacked into one encoder"),
    "late_fusion": VariantSpec("late_fusion", "separate encoders, latents concatenated once"),
    "concate_d1": VariantSpec("concate_d1", "concat fusion in both the fusion network and the generator"),
    "concate_d2": VariantSpec("concate_d2", "MFB fusion network, concat fusion in the generator"),
    "concate_d3": VariantSpec("concate_d3", "concat fusion network, MFB generator"),
}
TABLE_ORDER = ("concate_d1", "concate_d2", "concate_d3", "early_fusion", "late_fusion", "hybrid")
TABLE_LABELS = {"concate_d1": "Degraded-1", "concate_d2": "Degraded-2", "concate_d3": "Degraded-3",
                "early_fusion": "Early fusion", "late_fusion": "Late fusion", "hybrid": "Hybrid fusion"}


def get_variant(name):
    if isinstance(name, VariantSpec):
        return name
    try:
        return VARIANTS[name]
    except KeyError:
        raise ConfigError(f"unknown variant {name!r}; choose from {', '.join(FUSION_VARIANTS)}") from None


def variant_config(spec, config):
    spec = get_variant(spec)
    d = config.to_dict()
    d.update(spec.overrides)
    d["fusion_variant"] = spec.name
    return ModelConfig.from_dict(d)


def build_variant(spec, config):
    """Factory ``seed -> HiNet`` for a variant of ``config``."""
    return partial(init_params, variant_config(spec, config))


# --------------------------------------------------------------------------- manifests

def git_hash(payload):
    """Content hash the way git hashes a blob."""
    body = json.dumps(payload, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha1(b"blob %d\0" % len(body) + body).hexdigest()


@dataclass
class RunManifest:
    run_id: str
    sources: list
    target: str
    dataset_root: str
    train_config: dict
    model_config: dict
    variant: str
    extra: dict = field(default_factory=dict)
    config_hash: str = ""

    def __post_init__(self):
        payload = {k: v for k, v in self.__dict__.items() if k not in ("run_id", "config_hash")}
        self.config_hash = git_hash(payload)

    @property
    def task(self):
        return f"{'+'.join(self.sources)}→{self.target}"

    def write(self, run_dir):
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        path = run_dir / "manifest.json"
        path.write_text(json.dumps(self.__dict__, indent=2, sort_keys=True))
        return path

    @classmethod
    def read(cls, path):
        d = json.loads(Path(path).read_text())
        stored = d.pop("config_hash", "")
        m = cls(**d)
        if stored and stored != m.config_hash:
            raise ConfigError(f"{path}: config hash {stored} does not match contents ({m.config_hash})")
        return m


# --------------------------------------------------------------------------- ablation

@dataclass
class AblationResult:
    reports: dict          # variant -> pooled AggregateReport (None on failure)
    per_seed_psnr: dict    # variant -> {seed: mean PSNR}
    failures: dict         # variant -> error message

    def mean_psnr(self, variant):
        vals = list(self.per_seed_psnr.get(variant, {}).values())
        return float(np.mean(vals)) if vals else float("nan")

    def rows(self):
        out = []
        for v in TABLE_ORDER:
            if v not in self.reports:
                continue
            rep = self.reports[v]
            row = {"variant": v, "label": TABLE_LABELS[v]}
            for m in METRICS:
                row[f"{m}_mean"] = rep.stats[m]["mean"] if rep else float("nan")
                row[f"{m}_std"] = rep.stats[m]["std"] if rep else float("nan")
            row["count"] = rep.count if rep else 0
            row["failed"] = v in self.failures
            out.append(row)
        return out

    def table(self):
        return format_table([(TABLE_LABELS[r["variant"]], self.reports[r["variant"]]) for r in self.rows()])


ABLATION_FIELDS = ("variant", "label", *(f"{m}_{s}" for m in METRICS for s in ("mean", "std")), "count", "failed")


def run_ablation(train_samples, evaluate_fn, model_config, train_config, seeds, variants=FUSION_VARIANTS,
                 run_dir=None):
    """Train every variant once per seed and pool the held-out metrics.

    ``evaluate_fn(model)`` returns per-slice :class:`MetricsRecord` lists.
    A failing run is logged and leaves a gap in the table.
    """
    seeds = list(seeds)
    if not seeds:
        raise ConfigError("run_ablation needs at least one seed")
    run_dir = Path(run_dir) if run_dir is not None else None
    reports, per_seed, failures = {}, {}, {}
    for v in variants:
        spec = get_variant(v)
        cfg = variant_config(spec, model_config)
        pooled = []
        per_seed[spec.name] = {}
        try:
            for seed in seeds:
                tcfg = replace(train_config, seed=seed)
                sub = run_dir / spec.name / f"seed_{seed}" if run_dir is not None else None
                trainer = Trainer(cfg, tcfg)
                trainer.fit(train_samples, sub)
                records = evaluate_fn(trainer.model)
                if sub is not None:
                    write_slice_csv(sub / "slices.csv", records)
                pooled.extend(records)
                per_seed[spec.name][seed] = aggregate(records).stats["psnr"]["mean"]
                log.info("%s seed %d: PSNR %.3f", spec.name, seed, per_seed[spec.name][seed])
            reports[spec.name] = aggregate(pooled, TABLE_LABELS[spec.name])
        except HiNetError as exc:
            log.error("variant %s failed: %s", spec.name, exc)
            failures[spec.name] = str(exc)
            reports[spec.name] = None
    result = AblationResult(reports, per_seed, failures)
    if run_dir is not None:
        write_ablation(run_dir, result)
    return result


def write_ablation(run_dir, result):
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    with open(run_dir / "ablation.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, ABLATION_FIELDS)
        w.writeheader()
        for row in result.rows():
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
    (run_dir / "ablation.txt").write_text(result.table() + "\n")
    (run_dir / "per_seed_psnr.json").write_text(json.dumps(result.per_seed_psnr, indent=2, sort_keys=True))


# --------------------------------------------------------------------------- reports

PREVIEW_COLUMNS = ("x1", "x2", "y", "y_hat")
LOSS_SERIES = tuple(f for f in LOG_FIELDS if f.startswith("l_"))


def save_preview(path, model, samples, n=4):
    from .evaluate import predict

    samples = list(samples)[:n]
    x1 = np.stack([s.x1 for s in samples])
    x2 = np.stack([s.x2 for s in samples])
    np.savez(path, x1=x1, x2=x2, y=np.stack([s.y for s in samples]), y_hat=predict(model, x1, x2))
    return path


def emit_report(run_dir):
    """Loss curves, metric tables and image grids for everything under ``run_dir``.

    Returns a dict describing what was written.
    """
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    run_dir = Path(run_dir)
    logs = sorted(run_dir.rglob("loss_log.csv"))
    if not logs:
        raise DataError(f"no loss_log.csv under {run_dir}")
    out_dir = run_dir / "report"
    out_dir.mkdir(exist_ok=True)
    written = {"loss_curves": [], "tables": [], "grids": [], "series": list(LOSS_SERIES),
               "grid_columns": list(PREVIEW_COLUMNS)}

    for path in logs:
        rows = read_loss_log(path)
        if not rows:
            raise DataError(f"{path} is empty")
        label = _label(run_dir, path.parent)
        fig, ax = plt.subplots(figsize=(7, 4))
        steps = [r["step"] for r in rows]
        for name in LOSS_SERIES:
            ax.plot(steps, [r[name] for r in rows], label=name)
        ax.set_yscale("symlog", linthresh=1e-2)
        ax.set_xlabel("step")
        ax.set_title(f"losses: {label}")
        ax.legend(fontsize=7)
        fig.tight_layout()
        target = out_dir / f"loss_curves_{label}.png"
        fig.savefig(target, dpi=80)
        plt.close(fig)
        written["loss_curves"].append(target)

    slice_files = sorted(run_dir.rglob("slices.csv"))
    if slice_files:
        table_rows = []
        for path in slice_files:
            table_rows.append((_label(run_dir, path.parent), aggregate(read_slice_csv(path))))
        with open(out_dir / "metrics.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["run", "count", *(f"{m}_{s}" for m in METRICS for s in ("mean", "std"))])
            for label, rep in table_rows:
                w.writerow([label, rep.count, *(repr(rep.stats[m][s]) for m in METRICS for s in ("mean", "std"))])
        (out_dir / "metrics.txt").write_text(format_table(table_rows) + "\n")
        written["tables"] += [out_dir / "metrics.csv", out_dir / "metrics.txt"]

    for path in sorted(run_dir.rglob("preview.npz")):
        arrays = np.load(path)
        n = arrays["y"].shape[0]
        fig, axes = plt.subplots(n, len(PREVIEW_COLUMNS), figsize=(2.2 * len(PREVIEW_COLUMNS), 2.2 * n),
                                 squeeze=False)
        for i in range(n):
            for j, col in enumerate(PREVIEW_COLUMNS):
                axes[i, j].imshow(arrays[col][i], cmap="gray", vmin=-1, vmax=1)
                axes[i, j].set_xticks([])
                axes[i, j].set_yticks([])
                if i == 0:
                    axes[i, j].set_title("ŷ" if col == "y_hat" else col)
        fig.tight_layout()
        target = out_dir / f"grid_{_label(run_dir, path.parent)}.png"
        fig.savefig(target, dpi=80)
        plt.close(fig)
        written["grids"].append(target)
    return written


def _label(root, path):
    rel = path.relative_to(root)
    return "run" if str(rel) == "." else str(rel).replace("/", "_")
