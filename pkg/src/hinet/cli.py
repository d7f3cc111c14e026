"""Command line entry point: ``hinet <subcommand> [options]``.

Exit codes: 0 success, 2 config error, 3 data error, 4 numeric failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import uuid
from dataclasses import replace
from pathlib import Path

from . import data
from .errors import ConfigError, DataError, HiNetError
from .evaluate import aggregate_evaluate, evaluate_dataset, synthesize_subject
from .experiments import RunManifest, emit_report, run_ablation, save_preview, variant_config
from .metrics import write_slice_csv
from .model import FUSION_VARIANTS, ModelConfig
from .train import Trainer, TrainConfig

log = logging.getLogger("hinet")

DEFAULT_RUN_CONFIG = {
    "dataset_root": None,
    "sources": ["T1", "T2"],
    "target": "Flair",
    "variant": "hybrid",
    "train_fraction": 0.8,
    "split_seed": 0,
    "skip_background": False,
    "crop": list(data.CROP_SHAPE),
    "model": {},
    "train": {},
    "ablation": {"seeds": [0, 1, 2], "variants": list(FUSION_VARIANTS)},
}


def load_run_config(args):
    cfg = json.loads(json.dumps(DEFAULT_RUN_CONFIG))
    if args.config:
        try:
            user = json.loads(Path(args.config).read_text())
        except (OSError, ValueError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
        unknown = set(user) - set(cfg)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        cfg.update(user)
    for key in ("dataset_root", "variant"):
        if getattr(args, key, None):
            cfg[key] = getattr(args, key)
    if args.seed is not None:
        cfg["train"]["seed"] = args.seed
    if args.strict_paper_adv:
        cfg["train"]["strict_paper_adv"] = True
    return cfg


def _configs(cfg):
    model_cfg = variant_config(cfg["variant"], ModelConfig.from_dict(cfg["model"]))
    return model_cfg, TrainConfig.from_dict(cfg["train"])


def _split(cfg, index):
    split_path = Path(index.root) / "split.json"
    if split_path.is_file():
        d = json.loads(split_path.read_text())
        return data.DatasetSplit(d["train_ids"], d["test_ids"], d["seed"])
    return data.split_subjects(sorted(index.subjects), cfg["train_fraction"], cfg["split_seed"])


def _require_dataset(cfg):
    if not cfg["dataset_root"]:
        raise ConfigError("dataset_root is not set (config file or --dataset-root)")
    return data.scan_dataset(cfg["dataset_root"])


def _run_dir(args):
    if not args.run_dir:
        raise ConfigError("--run-dir is required")
    return Path(args.run_dir)


def cmd_phantom_gen(args):
    out = Path(args.out)
    triplets = data.make_phantom_dataset(args.subjects, tuple(args.size), args.seed or 0, args.slices, args.rule)
    data.write_dataset(out, triplets, ext=args.ext)
    log.info("wrote %d phantom subjects to %s", args.subjects, out)


def cmd_prepare_data(args):
    index = data.write_manifest(args.data)
    split = data.split_subjects(sorted(index.subjects), args.train_fraction, args.seed or 0)
    (Path(args.data) / "split.json").write_text(json.dumps(split.__dict__, indent=2))
    log.info("%d subjects: %d train / %d test", len(index.subjects), len(split.train_ids), len(split.test_ids))


def cmd_train(args):
    cfg = load_run_config(args)
    run_dir = _run_dir(args)
    model_cfg, train_cfg = _configs(cfg)
    manifest = RunManifest(args.run_id or uuid.uuid4().hex[:12], cfg["sources"], cfg["target"],
                           str(cfg["dataset_root"]), train_cfg.to_dict(), model_cfg.to_dict(), cfg["variant"],
                           {"train_fraction": cfg["train_fraction"], "split_seed": cfg["split_seed"],
                            "skip_background": cfg["skip_background"], "crop": cfg["crop"]})
    manifest.write(run_dir)
    index = _require_dataset(cfg)
    split = _split(cfg, index)
    samples = data.patch_samples(index, split.train_ids, cfg["sources"], cfg["target"], cfg["skip_background"],
                                 tuple(cfg["crop"]), model_cfg.input_size[0])
    if args.resume:
        trainer = Trainer.load(args.resume, train_cfg)
    else:
        trainer = Trainer(model_cfg, train_cfg)
    trainer.fit(samples, run_dir)
    save_preview(run_dir / "preview.npz", trainer.model, samples[::max(1, len(samples) // 4)])
    log.info("trained %d epochs (%d steps); checkpoints in %s", trainer.epoch, trainer.step, run_dir)


def _load_model(path):
    return Trainer.load(path).model


def cmd_synthesize(args):
    cfg = load_run_config(args)
    model = _load_model(args.checkpoint)
    path = synthesize_subject(model, args.subject_dir, args.sources, args.out, args.target,
                              crop=tuple(cfg["crop"]))
    log.info("wrote %s", path)


def cmd_evaluate(args):
    cfg = load_run_config(args)
    run_dir = _run_dir(args)
    index = _require_dataset(cfg)
    split = _split(cfg, index)
    model = _load_model(args.checkpoint)
    report, records = aggregate_evaluate(model, index, split.test_ids, cfg["sources"], cfg["target"],
                                         per_subject=args.per_subject, skip_background=cfg["skip_background"],
                                         crop=tuple(cfg["crop"]))
    run_dir.mkdir(parents=True, exist_ok=True)
    write_slice_csv(run_dir / "slices.csv", records)
    row = report.row()
    (run_dir / "aggregate.csv").write_text(",".join(row) + "\n" + ",".join(str(v) for v in row.values()) + "\n")
    (run_dir / "aggregate.txt").write_text(report.format_table() + "\n")
    print(report.format_table())


def cmd_ablate(args):
    cfg = load_run_config(args)
    run_dir = _run_dir(args)
    model_cfg, train_cfg = _configs(cfg)
    RunManifest(args.run_id or uuid.uuid4().hex[:12], cfg["sources"], cfg["target"], str(cfg["dataset_root"]),
                train_cfg.to_dict(), model_cfg.to_dict(), "ablation", {"ablation": cfg["ablation"]}).write(run_dir)
    index = _require_dataset(cfg)
    split = _split(cfg, index)
    samples = data.patch_samples(index, split.train_ids, cfg["sources"], cfg["target"], cfg["skip_background"],
                                 tuple(cfg["crop"]), model_cfg.input_size[0])

    def evaluate_fn(model):
        return evaluate_dataset(model, index, split.test_ids, cfg["sources"], cfg["target"],
                                cfg["skip_background"], tuple(cfg["crop"]))[0]

    result = run_ablation(samples, evaluate_fn, model_cfg, train_cfg, cfg["ablation"]["seeds"],
                          cfg["ablation"]["variants"], run_dir)
    print(result.table())


def cmd_report(args):
    written = emit_report(_run_dir(args))
    for kind in ("loss_curves", "tables", "grids"):
        for p in written[kind]:
            print(p)


def _global_flags(parser, suppress):
    default = argparse.SUPPRESS if suppress else None
    parser.add_argument("--config", default=default, help="JSON run configuration")
    parser.add_argument("--seed", type=int, default=default)
    parser.add_argument("--run-dir", default=default)
    parser.add_argument("--strict-paper-adv", action="store_true",
                        default=argparse.SUPPRESS if suppress else False,
                        help="use the literal log(1 - D) generator loss")


def build_parser():
    p = argparse.ArgumentParser(prog="hinet", description=__doc__.splitlines()[0])
    _global_flags(p, suppress=False)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    _global_flags(common, suppress=True)

    s = sub.add_parser("phantom-gen", parents=[common], help="write a synthetic phantom dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--subjects", type=int, default=10)
    s.add_argument("--size", type=int, nargs=2, default=(240, 240), metavar=("ROWS", "COLS"))
    s.add_argument("--slices", type=int, default=8)
    s.add_argument("--rule", choices=("fusion", "identity"), default="fusion")
    s.add_argument("--ext", choices=("hinv", "nii", "nii.gz"), default="hinv")
    s.set_defaults(func=cmd_phantom_gen)

    s = sub.add_parser("prepare-data", parents=[common], help="write manifest.json and split.json")
    s.add_argument("--data", required=True)
    s.add_argument("--train-fraction", type=float, default=0.8)
    s.set_defaults(func=cmd_prepare_data)

    for name, func, help_ in (("train", cmd_train, "train one model"),
                              ("ablate", cmd_ablate, "train and evaluate every fusion variant")):
        s = sub.add_parser(name, parents=[common], help=help_)
        s.add_argument("--dataset-root", dest="dataset_root")
        s.add_argument("--variant", choices=FUSION_VARIANTS)
        s.add_argument("--run-id")
        if name == "train":
            s.add_argument("--resume", help="checkpoint to continue from")
        s.set_defaults(func=func)

    s = sub.add_parser("synthesize", parents=[common], help="synthesize a target volume for one subject")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--subject-dir", required=True)
    s.add_argument("--sources", nargs=2, default=("T1", "T2"))
    s.add_argument("--target", default="Flair")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synthesize)

    s = sub.add_parser("evaluate", parents=[common], help="score a checkpoint on the test split")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--dataset-root", dest="dataset_root")
    s.add_argument("--per-subject", action="store_true")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("report", parents=[common], help="plots and tables for a run directory")
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except HiNetError as exc:
        print(f"hinet: {exc}", file=sys.stderr)
        return exc.exit_code
    except (OSError, KeyError) as exc:
        print(f"hinet: data error: {exc}", file=sys.stderr)
        return DataError.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
