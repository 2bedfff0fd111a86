"""
Command-line entry point: ``python -m lab <command> [flags]``.
"""
import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import numpy as np

from dmt.dataset_io import export_splits
from dmt.synthworld import make_splits
from dmt.trainer import MAP_SOURCES, build_bundle, warm_up
from lab.app.config import ConfigError, ExperimentConfig, FLAG_FIELDS, parse_config, settings
from lab.app.reports import emit_reports, load_manifests, write_metric_report, write_warmup_csv
from lab.checkpoint import load_bundle, save_bundle
from lab.experiment import Ledger, evaluate_bundle, run_ablation, run_experiment, summary_rows
from lab.oracles import failed, run_oracles

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_RUNTIME = 2
EXIT_ORACLE = 3

# flag name -> (type, help)
_DMT_FLAGS = {
    "delta": (float, "binarization threshold for teacher maps"),
    "tau": (float, "consensus IoU threshold of the noise filter"),
    "beta": (float, "EMA decay of the teachers"),
    "lambda_u": (float, "weight of the unsupervised contrastive loss"),
    "temp": (float, "InfoNCE temperature"),
    "lr": (float, "Adam learning rate"),
    "warmup_epochs": (int, "warm-up epochs"),
    "epochs": (int, "unbiased-stage epochs"),
    "batch": (int, "batch size"),
    "labeled_ratio": (float, "labeled fraction of the labeled pool"),
    "fp_rate": (float, "false-positive rate of the unlabeled split"),
}


def _common_flags() -> argparse.ArgumentParser:
    parent = argparse.ArgumentParser(add_help=False)
    parent.add_argument("--config", help="JSON config file")
    parent.add_argument("--seed", type=int, help="run seed")
    parent.add_argument("--out", help="output directory")
    for name, (kind, text) in _DMT_FLAGS.items():
        parent.add_argument(f"--{name.replace('_', '-')}", dest=name, type=kind, help=text)
    return parent


def build_parser() -> argparse.ArgumentParser:
    common = _common_flags()
    parser = argparse.ArgumentParser(prog="lab", description=f"{settings.APP_NAME}: semi-supervised sound source localization")
    parser.add_argument("--log-level", default=settings.LOG_LEVEL, help="logging level")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("generate", parents=[common], help="write the synthetic dataset to disk")
    sub.add_parser("warmup", parents=[common], help="run the warm-up stage only")
    sub.add_parser("train", parents=[common], help="warm-up, unbiased stage and evaluation")

    ev = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on the test split")
    ev.add_argument("--checkpoint", required=True, help="checkpoint written by warmup or train")
    ev.add_argument("--source", default="fused", choices=MAP_SOURCES, help="map source to evaluate")

    ab = sub.add_parser("ablate", parents=[common], help="run an ablation matrix")
    ab.add_argument("--matrix", default="modules", help="preset name, JSON file or inline JSON")
    ab.add_argument("--seeds", help="comma-separated seed list")
    ab.add_argument("--workers", type=int, help=f"parallel runs (default DMT_LAB_THREADS={settings.DMT_LAB_THREADS})")

    orc = sub.add_parser("oracle", help="run the brute-force oracle suite")
    orc.add_argument("--slow", action="store_true", help="also run the pilot-training oracles")
    orc.add_argument("--inject-fault", action="store_true", help="perturb analytic gradients; gradient oracles must fail")
    orc.add_argument("--only", nargs="*", help="oracle names to run")

    rep = sub.add_parser("report", help="render a summary from run manifests")
    rep.add_argument("runs", nargs="+", help="run directories or manifest files")
    rep.add_argument("--out", default=".", help="directory for summary.md")
    rep.add_argument("--ledger", default=settings.DB_URL, help="run ledger URL for the run-history section")
    rep.add_argument("--no-history", action="store_true", help="leave the run-history section out")
    rep.add_argument("--history-limit", type=int, default=20, help="ledger runs and alerts to list")
    return parser


def config_from_args(args: argparse.Namespace) -> ExperimentConfig:
    flags: Dict[str, Any] = {"seed": args.seed, "out": args.out}
    flags.update({name: getattr(args, name, None) for name in FLAG_FIELDS})
    return parse_config(args.config, flags)


def parse_matrix(value: str) -> Any:
    path = Path(value)
    if path.suffix == ".json" or path.exists():
        if not path.exists():
            raise ConfigError(f"Matrix file not found: {value}", ["matrix"])
        value = path.read_text()
    elif not value.lstrip().startswith("{"):
        return value
    try:
        return json.loads(value)
    except json.JSONDecodeError as e:
        raise ConfigError(f"Ablation matrix is not valid JSON: {e}", ["matrix"]) from None


def parse_seeds(value: Optional[str]) -> Optional[List[int]]:
    if not value:
        return None
    try:
        return [int(s) for s in value.split(",") if s.strip()]
    except ValueError:
        raise ConfigError(f"Invalid seed list '{value}'", ["seeds"]) from None


def cmd_generate(args) -> int:
    config = config_from_args(args)
    seed = config.seeds[0]
    out = Path(config.out_dir) / "dataset"
    counts = export_splits(make_splits(config.world, seed), str(out), config.config_hash())
    print(f"Dataset written to {out}: " + ", ".join(f"{k}={v}" for k, v in counts.items()))
    return EXIT_OK


def cmd_warmup(args) -> int:
    config = config_from_args(args)
    seed = config.seeds[0]
    out = Path(config.out_dir) / f"warmup-seed{seed}"
    splits = make_splits(config.world, seed)
    bundle = build_bundle(config, seed)
    result = warm_up(bundle, splits.labeled, config, np.random.default_rng([seed, 1]), val=splits.val)
    report = evaluate_bundle(bundle, splits.test, config)
    save_bundle(str(out / "warmup.ckpt"), bundle, config.config_hash())
    write_warmup_csv(result.losses, result.val_ciou, str(out / "warmup_trace.csv"))
    write_metric_report(report, str(out), "warmup_metrics")
    print(report.to_text())
    return EXIT_OK


def cmd_train(args) -> int:
    config = config_from_args(args)
    manifest = run_experiment(config, ledger=Ledger())
    print(f"Run written to {manifest.out_dir}")
    print(f"CIoU {manifest.metrics['ciou']:.4f}  AUC {manifest.metrics['auc']:.4f}  "
          f"warm-up CIoU {manifest.warmup_metrics['ciou']:.4f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    config = config_from_args(args)
    bundle = load_bundle(args.checkpoint, config)
    splits = make_splits(config.world, config.seeds[0])
    report = evaluate_bundle(bundle, splits.test, config, args.source)
    if args.out:
        write_metric_report(report, args.out, f"eval_{args.source}")
    print(report.to_text())
    return EXIT_OK


def cmd_ablate(args) -> int:
    config = config_from_args(args)
    table = run_ablation(config, parse_matrix(args.matrix), parse_seeds(args.seeds),
                         out_dir=args.out, max_workers=args.workers, ledger=Ledger())
    summary = summary_rows(table)
    print(summary[["variant", "status", "CIoU", "CIoU_std", "AUC", "MSE"]].to_string(index=False))
    return EXIT_OK if (table["status"] != "failed").all() else EXIT_RUNTIME


def cmd_oracle(args) -> int:
    results = run_oracles(slow=args.slow, inject_fault=args.inject_fault, names=args.only)
    for r in results:
        status = "SKIP" if r.skipped else ("PASS" if r.passed else "FAIL")
        print(f"{status:4}  {r.name:45} {r.detail}")
    bad = failed(results)
    print(f"{len(results) - len(bad)}/{len(results)} passed")
    return EXIT_ORACLE if bad else EXIT_OK


def cmd_report(args) -> int:
    manifests = load_manifests(args.runs)
    if not manifests:
        logger.error(f"No manifests found under {args.runs}")
        return EXIT_RUNTIME
    history = None if args.no_history else Ledger.from_url(args.ledger).history(args.history_limit)
    print(f"Summary written to {emit_reports(manifests, args.out, history)}")
    return EXIT_OK


COMMANDS = {
    "generate": cmd_generate,
    "warmup": cmd_warmup,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "oracle": cmd_oracle,
    "report": cmd_report,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=getattr(logging, str(args.log_level).upper(), logging.INFO),
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
    )
    try:
        return COMMANDS[args.command](args)
    except ConfigError as e:
        logger.error(f"Configuration error: {e}")
        return EXIT_CONFIG
    except Exception as e:
        logger.error(f"{args.command} failed: {type(e).__name__}: {e}")
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
