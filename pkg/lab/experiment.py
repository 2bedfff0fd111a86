"""
Experiment orchestration: single runs and ablation matrices.
"""
import copy
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence

import numpy as np
import pandas as pd

from common.hashing import file_blob_hash
from dmt.dataset_io import write_pnm
from dmt.metrics import MetricReport, evaluate_records, make_records, normalize_map, record_ious
from dmt.synthworld import Splits, make_splits
from dmt.trainer import (
    MAP_SOURCES,
    ModelBundle,
    build_bundle,
    pseudo_label_quality,
    refresh_pseudo_labels,
    run_unbiased_stage,
    validation_scores,
    warm_up,
)
from lab.app.config import ConfigError, ExperimentConfig, FLAG_FIELDS, merge_raw, build_config, settings
from lab.app.reports import (
    RunManifest,
    write_metric_report,
    write_trace_csv,
    write_warmup_csv,
)
from lab.checkpoint import save_bundle

logger = logging.getLogger(__name__)

MAP_DUMP_COUNT = 8


class Ledger:
    """Best-effort run bookkeeping in the SQL ledger; failures are logged, never raised"""

    def __init__(self, session_factory=None):
        if session_factory is None:
            from lab.app.db import SessionLocal, create_tables
            create_tables()
            session_factory = SessionLocal
        self.session_factory = session_factory

    def _call(self, fn):
        from lab.app.db import ledger_session
        from lab.app.repo import AlertRepository, RunRepository, TraceRepository
        try:
            with ledger_session(self.session_factory) as db:
                return fn(RunRepository(db), TraceRepository(db), AlertRepository(db))
        except Exception as e:
            logger.warning(f"Ledger call failed: {e}")
            return None

    @classmethod
    def from_url(cls, url: str) -> "Ledger":
        from sqlalchemy.orm import sessionmaker
        from lab.app.db import create_tables, make_engine
        engine = make_engine(url)
        create_tables(bind=engine)
        return cls(sessionmaker(autocommit=False, autoflush=False, bind=engine))

    def start(self, config_hash: str, seed: int, variant: str, out_dir: str) -> Optional[int]:
        run = self._call(lambda runs, _t, _a: runs.start_run(config_hash, seed, variant, out_dir))
        return run.id if run is not None else None

    def finish(self, run_id: Optional[int], manifest: RunManifest) -> None:
        if run_id is None:
            return
        self._call(lambda runs, traces, _a: (
            runs.finish_run(run_id, manifest.metrics, manifest.warmup_metrics.get("ciou"), manifest.wall_clock_s),
            traces.insert_traces(run_id, manifest.trace),
        ))

    def fail(self, run_id: Optional[int], message: str) -> None:
        def record(runs, _t, alerts):
            if run_id is not None:
                runs.fail_run(run_id)
            alerts.insert_alert("error", message)
        self._call(record)

    def alert(self, level: str, message: str) -> None:
        self._call(lambda _r, _t, alerts: alerts.insert_alert(level, message))

    def history(self, limit: int = 20) -> Optional[Dict[str, List[Dict[str, Any]]]]:
        """Most recent runs, with their stored epoch count, and alerts; None when the ledger is unreadable"""
        def read(runs, traces, alerts):
            return {
                "runs": [{"id": r.id, "variant": r.variant, "seed": r.seed, "status": r.status,
                          "config_hash": r.config_hash, "ciou": r.ciou, "warmup_ciou": r.warmup_ciou,
                          "epochs": len(traces.traces_for_run(r.id))}
                         for r in runs.recent_runs(limit)],
                "alerts": [{"ts": a.ts, "level": a.level, "message": a.message}
                           for a in alerts.get_recent_alerts(limit)],
            }
        return self._call(read)


def run_dir(config: ExperimentConfig, seed: int) -> Path:
    return Path(config.out_dir) / f"{config.ablation.label()}-seed{seed}"


def evaluate_bundle(bundle: ModelBundle, pairs, config: ExperimentConfig, source: str = "fused") -> MetricReport:
    records = make_records(pairs, bundle.predict(pairs, source))
    return evaluate_records(records, config.dmt.delta_eval, config.dmt.ciou_threshold)


def evaluate_sources(bundle: ModelBundle, pairs, config: ExperimentConfig) -> Dict[str, Dict[str, float]]:
    """CIoU, AUC and MSE of every available map source on the genuine pairs"""
    genuine = [p for p in pairs if not p.is_false_positive]
    sources = {}
    for source in MAP_SOURCES:
        if not bundle.dual and source in ("teacher_B", "student_B", "fused"):
            continue
        sources[source] = validation_scores(bundle, genuine, config, source)
    return sources


def filter_diagnostics(bundle: ModelBundle, splits: Splits, config: ExperimentConfig, seed: int) -> Dict[str, float]:
    """Pseudo-label quality and false-positive rejection of the current teachers"""
    if not splits.unlabeled:
        return {}
    rng = np.random.default_rng([seed, 2])
    result = refresh_pseudo_labels(bundle, splits.unlabeled, config, rng)
    return {
        "n_accepted": float(result.n_accepted),
        "ipl_iou_accepted": pseudo_label_quality(result, splits.instrumented, accepted_only=True),
        "ipl_iou_all": pseudo_label_quality(result, splits.instrumented, accepted_only=False),
        "accept_rate_genuine": result.acceptance_rate(false_positive=False),
        "accept_rate_fp": result.acceptance_rate(false_positive=True),
    }


def _dump_maps(bundle: ModelBundle, splits: Splits, config: ExperimentConfig, out: Path) -> List[Path]:
    """Normalized fused maps of the best and worst test samples by IoU"""
    genuine = [p for p in splits.test if not p.is_false_positive]
    if not genuine:
        return []
    records = make_records(genuine, bundle.predict(genuine))
    ious = record_ious(records, config.dmt.delta_eval)
    order = np.argsort(ious, kind="stable")
    k = min(MAP_DUMP_COUNT, len(order))
    picks = [("best", i) for i in order[::-1][:k]] + [("worst", i) for i in order[:k]]
    written = []
    for rank, (tag, i) in enumerate(picks):
        rec = records[i]
        path = out / "maps" / f"{tag}{rank % k}_{rec.sample_id:06d}.pgm"
        path.parent.mkdir(parents=True, exist_ok=True)
        write_pnm(path, normalize_map(rec.pred))
        written.append(path)
    return written


def run_experiment(config: ExperimentConfig, seed: Optional[int] = None, out_dir: Optional[str] = None,
                   ledger: Optional[Ledger] = None, variant: Optional[str] = None) -> RunManifest:
    """
    Generate the world, warm up, run the unbiased stage and evaluate on the test split

    Args:
        config: experiment configuration
        seed: run seed, defaults to the first configured seed
        out_dir: run directory, defaults to <out_dir>/<variant>-seed<seed>
        ledger: optional SQL ledger
        variant: label stored in the manifest, defaults to the ablation switch label

    Returns:
        RunManifest: metrics, traces and artifact hashes of the run
    """
    seed = config.seeds[0] if seed is None else int(seed)
    out = Path(out_dir) if out_dir else run_dir(config, seed)
    out.mkdir(parents=True, exist_ok=True)
    config_hash = config.config_hash()
    variant = variant or config.ablation.label()
    run_id = ledger.start(config_hash, seed, variant, str(out)) if ledger else None
    start = time.perf_counter()
    logger.info(f"Run {variant} seed {seed} (config {config_hash[:12]}) -> {out}")

    try:
        splits = make_splits(config.world, seed)
        rng = np.random.default_rng([seed, 1])
        bundle = build_bundle(config, seed)

        warm_epochs = config.dmt.warmup_epochs if config.ablation.use_warmup else 0
        warm = warm_up(bundle, splits.labeled, config, rng, val=splits.val, epochs=warm_epochs)
        warm_report = evaluate_bundle(bundle, splits.test, config)
        diagnostics = filter_diagnostics(bundle, splits, config, seed)
        save_bundle(str(out / "warmup.ckpt"), bundle, config_hash)

        bundle, trace = run_unbiased_stage(bundle, splits, config, rng)
        report = evaluate_bundle(bundle, splits.test, config)
        sources = evaluate_sources(bundle, splits.test, config)

        paths = [
            write_trace_csv(trace, str(out / "trace.csv")),
            write_warmup_csv(warm.losses, warm.val_ciou, str(out / "warmup_trace.csv")),
            *write_metric_report(report, str(out), "metrics"),
            *write_metric_report(warm_report, str(out), "warmup_metrics"),
            *_dump_maps(bundle, splits, config, out),
        ]
        save_bundle(str(out / "final.ckpt"), bundle, config_hash)
        paths += [out / "warmup.ckpt", out / "final.ckpt"]
    except Exception as e:
        message = f"{type(e).__name__}: {e}"
        logger.error(f"Run {variant} seed {seed} failed: {message}")
        RunManifest(config_hash=config_hash, seed=seed, variant=variant, out_dir=str(out), status="failed",
                    wall_clock_s=time.perf_counter() - start, error=message).write()
        if ledger:
            ledger.fail(run_id, f"{variant} seed {seed}: {message}")
        raise

    manifest = RunManifest(
        config_hash=config_hash,
        seed=seed,
        variant=variant,
        out_dir=str(out),
        wall_clock_s=time.perf_counter() - start,
        metrics=report.as_dict(),
        warmup_metrics=warm_report.as_dict(),
        map_sources=sources,
        filter_after_warmup=diagnostics,
        warmup_trace={"loss": warm.losses, "val_ciou": warm.val_ciou},
        trace=[t.as_row() for t in trace],
        artifacts={str(p.relative_to(out)): file_blob_hash(str(p)) for p in paths},
    )
    manifest.write()
    if ledger:
        ledger.finish(run_id, manifest)
    logger.info(f"Run {variant} seed {seed} done: CIoU {report.ciou:.4f} (warm-up {warm_report.ciou:.4f}), "
                f"AUC {report.auc:.4f}, {manifest.wall_clock_s:.1f}s")
    return manifest


# ---------------------------------------------------------------------------
# Ablation matrices
# ---------------------------------------------------------------------------

def _modules_grid() -> List[Dict[str, Any]]:
    variants = [
        {"name": "single-teacher-no-ema",
         "overrides": {"ablation.dual_teachers": False, "ablation.use_ema": False}},
        {"name": "single-teacher", "overrides": {"ablation.dual_teachers": False}},
    ]
    for use_filter in (False, True):
        for use_ipl in (False, True):
            for use_ema in (False, True):
                overrides = {"ablation.use_filter": use_filter, "ablation.use_ipl": use_ipl,
                             "ablation.use_ema": use_ema}
                off = [n for n, on in (("filter", use_filter), ("ipl", use_ipl), ("ema", use_ema)) if not on]
                name = "full" if not off else "no-" + "-no-".join(off)
                variants.append({"name": name, "overrides": overrides})
    return variants


PRESETS: Dict[str, Any] = {
    "modules": _modules_grid,
    "delta": {"dmt.delta": [0.3, 0.45, 0.6, 0.75, 0.9]},
    "tau": {"dmt.tau": [0.0, 0.5, 0.7, 0.85, 0.95]},
    "beta": {"dmt.beta": [0.99, 0.995, 0.999, 0.9999]},
    "warmup": {"dmt.warmup_epochs": [0, 2, 4, 6, 8]},
    "ratio": {"world.labeled_ratio": [0.005, 0.02, 0.1]},
    "unlabeled": {"world.unlabeled_size": [1000, 2000, 4000]},
    "augment": {"ablation.strong_augment": [False, True]},
    "backbone": {"ablation.heterogeneous": [False, True]},
}

SWITCH_COLUMNS = {
    "Filter": "use_filter",
    "IPL": "use_ipl",
    "EMA": "use_ema",
    "Warmup": "use_warmup",
    "Dual": "dual_teachers",
    "Hetero": "heterogeneous",
    "StrongAug": "strong_augment",
}
METRIC_COLUMNS = {"CIoU": "ciou", "AUC": "auc", "MSE": "mse", "max_F1": "max_f1", "AP": "ap"}


def _dotted_key(key: str) -> str:
    if key in FLAG_FIELDS:
        section, name = FLAG_FIELDS[key]
        return f"{section}.{name}"
    if "." not in key:
        raise ConfigError(f"Ablation axis '{key}' must be a flag name or a dotted path like dmt.tau", [key])
    return key


def _nest(overrides: Mapping[str, Any]) -> Dict[str, Any]:
    nested: Dict[str, Any] = {}
    for key, value in overrides.items():
        node = nested
        parts = _dotted_key(key).split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        node[parts[-1]] = value
    return nested


def expand_matrix(matrix: Any) -> List[Dict[str, Any]]:
    """
    Variants of an ablation matrix

    Accepts a preset name, a mapping of axis -> value list (cross product),
    a mapping with a ``variants`` list, or a mapping with a ``preset`` key.
    """
    if isinstance(matrix, str):
        if matrix not in PRESETS:
            raise ConfigError(f"Unknown ablation preset '{matrix}'", ["matrix"])
        matrix = PRESETS[matrix]
    if callable(matrix):
        return matrix()
    if "preset" in matrix:
        return expand_matrix(matrix["preset"])
    if "variants" in matrix:
        return [{"name": v.get("name") or _variant_name(v["overrides"]), "overrides": dict(v["overrides"])}
                for v in matrix["variants"]]
    variants: List[Dict[str, Any]] = [{}]
    for axis, values in matrix.items():
        if not isinstance(values, (list, tuple)) or not values:
            raise ConfigError(f"Ablation axis '{axis}' needs a non-empty value list", [axis])
        variants = [{**v, axis: value} for v in variants for value in values]
    return [{"name": _variant_name(v), "overrides": v} for v in variants]


def _variant_name(overrides: Mapping[str, Any]) -> str:
    if not overrides:
        return "base"
    return ",".join(f"{key.split('.')[-1]}={value}" for key, value in overrides.items())


@dataclass
class AblationCell:
    name: str
    overrides: Dict[str, Any]
    config: ExperimentConfig
    seed: int
    out_dir: str
    manifest: Optional[RunManifest] = None
    error: Optional[str] = None


def _cell_row(cell: AblationCell) -> Dict[str, Any]:
    row: Dict[str, Any] = {"variant": cell.name, "seed": cell.seed}
    ablation = cell.config.ablation
    for column, attr in SWITCH_COLUMNS.items():
        row[column] = "on" if getattr(ablation, attr) else "off"
    for key, value in cell.overrides.items():
        row[_dotted_key(key)] = value
    metrics = cell.manifest.metrics if cell.manifest else {}
    for column, key in METRIC_COLUMNS.items():
        row[column] = metrics.get(key, float("nan"))
        row[f"{column}_std"] = float("nan")
    row["warmup_CIoU"] = cell.manifest.warmup_metrics.get("ciou", float("nan")) if cell.manifest else float("nan")
    row["status"] = "done" if cell.manifest else "failed"
    row["error"] = cell.error or ""
    row["config_hash"] = cell.config.config_hash()[:12]
    return row


def run_ablation(base: ExperimentConfig, matrix: Any, seeds: Optional[Sequence[int]] = None,
                 out_dir: Optional[str] = None, max_workers: Optional[int] = None,
                 ledger: Optional[Ledger] = None) -> pd.DataFrame:
    """
    Cross-product of runs over a matrix and a seed list

    Every (variant, seed) cell gets its own run directory. Failed cells stay in
    the table with status "failed". One summary row per variant carries the
    mean (metric columns) and standard deviation (``*_std`` columns) over its
    successful seeds.

    Returns:
        pd.DataFrame: the table, also written to <out_dir>/ablation.csv
    """
    seeds = list(seeds) if seeds else list(base.seeds)
    root = Path(out_dir or base.out_dir)
    variants = expand_matrix(matrix)
    base_raw = base.model_dump()

    cells: List[AblationCell] = []
    for variant in variants:
        config = build_config(merge_raw(copy.deepcopy(base_raw), _nest(variant["overrides"])))
        for seed in seeds:
            cell_dir = root / variant["name"].replace("/", "_") / f"seed{seed}"
            cells.append(AblationCell(variant["name"], variant["overrides"], config, seed, str(cell_dir)))

    workers = max(1, min(max_workers or settings.DMT_LAB_THREADS, len(cells)))
    logger.info(f"Ablation: {len(variants)} variants x {len(seeds)} seeds = {len(cells)} runs, {workers} worker(s)")

    def run_cell(cell: AblationCell) -> AblationCell:
        try:
            cell.manifest = run_experiment(cell.config, cell.seed, cell.out_dir, ledger, variant=cell.name)
        except Exception as e:
            cell.error = f"{type(e).__name__}: {e}"
            logger.warning(f"Ablation cell {cell.name} seed {cell.seed} failed: {cell.error}")
        return cell

    if workers == 1:
        done = [run_cell(c) for c in cells]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            done = list(pool.map(run_cell, cells))

    rows = [_cell_row(c) for c in done]
    table = pd.DataFrame(rows)
    summaries = []
    for variant in variants:
        group = table[(table["variant"] == variant["name"]) & (table["status"] == "done")]
        template = table[table["variant"] == variant["name"]].iloc[0].to_dict()
        summary = {**template, "seed": "summary", "status": f"{len(group)}/{len(seeds)} done", "error": ""}
        for column in METRIC_COLUMNS:
            values = group[column].astype(float)
            summary[column] = float(values.mean()) if len(values) else float("nan")
            summary[f"{column}_std"] = float(values.std(ddof=0)) if len(values) else float("nan")
        summary["warmup_CIoU"] = float(group["warmup_CIoU"].astype(float).mean()) if len(group) else float("nan")
        summaries.append(summary)
    table = pd.concat([table, pd.DataFrame(summaries)], ignore_index=True)[list(table.columns)]

    root.mkdir(parents=True, exist_ok=True)
    table.to_csv(root / "ablation.csv", index=False)
    n_failed = sum(c.manifest is None for c in done)
    if n_failed:
        logger.warning(f"Ablation finished with {n_failed} failed run(s)")
        if ledger:
            ledger.alert("warn", f"Ablation under {root}: {n_failed} failed run(s)")
    logger.info(f"Ablation table written to {root / 'ablation.csv'}")
    return table


def summary_rows(table: pd.DataFrame) -> pd.DataFrame:
    return table[table["seed"] == "summary"].reset_index(drop=True)
