"""
Run artifacts: manifests, trace and metric tables, curve files and the
markdown summary.
"""
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import pandas as pd
from jinja2 import Environment, FileSystemLoader

from dmt.metrics import AUC_NOTE, FP_ACC_NOTE, MetricReport
from dmt.trainer import TRACE_COLUMNS, EpochTrace

logger = logging.getLogger(__name__)

TEMPLATES_DIR = Path(__file__).parent / "templates"
MANIFEST_FILE = "manifest.json"
METRIC_COLUMNS = ("ciou", "auc", "mse", "max_f1", "ap", "fp_accuracy", "n_records")
FP_NOTE = "false positives are synthetic: audio of a class absent from the frame, or an empty frame"
IPL_OFF_NOTE = "with IPL disabled the pseudo-label is teacher A's mask"

CURVES = {
    "pseudo_quality.txt": ("epoch", "ipl_quality"),
    "filtered_count.txt": ("epoch", "n_accepted"),
    "val_ciou.txt": ("epoch", "ciou_val"),
}


@dataclass
class RunManifest:
    config_hash: str
    seed: int
    variant: str
    out_dir: str
    status: str = "done"
    wall_clock_s: float = 0.0
    metrics: Dict[str, float] = field(default_factory=dict)
    warmup_metrics: Dict[str, float] = field(default_factory=dict)
    map_sources: Dict[str, Dict[str, float]] = field(default_factory=dict)
    filter_after_warmup: Dict[str, float] = field(default_factory=dict)
    warmup_trace: Dict[str, List[float]] = field(default_factory=dict)
    trace: List[Dict[str, float]] = field(default_factory=list)
    artifacts: Dict[str, str] = field(default_factory=dict)
    error: Optional[str] = None

    def to_json(self) -> str:
        return json.dumps(_jsonable(asdict(self)), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "RunManifest":
        return cls(**_restore_nan(json.loads(text)))

    def write(self, path: Optional[str] = None) -> Path:
        target = Path(path) if path else Path(self.out_dir) / MANIFEST_FILE
        target.parent.mkdir(parents=True, exist_ok=True)
        target.write_text(self.to_json())
        return target


def _jsonable(value: Any) -> Any:
    """NaN is not valid JSON; store it as null"""
    if isinstance(value, float) and math.isnan(value):
        return None
    if isinstance(value, dict):
        return {k: _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    return value


def _restore_nan(value: Any) -> Any:
    if value is None:
        return float("nan")
    if isinstance(value, dict):
        return {k: (v if k in ("error",) else _restore_nan(v)) for k, v in value.items()}
    if isinstance(value, list):
        return [_restore_nan(v) for v in value]
    return value


def load_manifests(paths: Sequence[str]) -> List[RunManifest]:
    """Manifests from run directories or manifest files; directories are searched recursively"""
    manifests = []
    for raw in paths:
        path = Path(raw)
        files = sorted(path.rglob(MANIFEST_FILE)) if path.is_dir() else [path]
        for f in files:
            manifests.append(RunManifest.from_json(f.read_text()))
    return manifests


def write_trace_csv(trace: Sequence[EpochTrace], path: str) -> Path:
    df = pd.DataFrame([t.as_row() for t in trace], columns=list(TRACE_COLUMNS))
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    df.to_csv(target, index=False)
    return target


def write_warmup_csv(losses: Sequence[float], val_ciou: Sequence[float], path: str) -> Path:
    rows = [{"epoch": k + 1, "loss": loss, "ciou_val": val_ciou[k] if k < len(val_ciou) else float("nan")}
            for k, loss in enumerate(losses)]
    df = pd.DataFrame(rows, columns=["epoch", "loss", "ciou_val"])
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    df.to_csv(target, index=False)
    return target


def write_metric_report(report: MetricReport, out_dir: str, stem: str = "metrics") -> List[Path]:
    """Structured text plus a one-row CSV"""
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    text_path = root / f"{stem}.txt"
    text_path.write_text(report.to_text())
    row = report.as_dict()
    csv_path = root / f"{stem}.csv"
    pd.DataFrame([row], columns=list(row)).to_csv(csv_path, index=False)
    return [text_path, csv_path]


def write_curve(path: Path, xs: Sequence[float], ys: Sequence[float]) -> Path:
    """Two-column decimal text, one point per line"""
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(f"{x!r} {y!r}\n" for x, y in zip(xs, ys)))
    return path


def write_curves(manifest: RunManifest) -> List[Path]:
    root = Path(manifest.out_dir) / "curves"
    written = []
    for filename, (x_key, y_key) in CURVES.items():
        xs = [row[x_key] for row in manifest.trace]
        ys = [row[y_key] for row in manifest.trace]
        written.append(write_curve(root / filename, xs, ys))
    warm = manifest.warmup_trace.get("val_ciou", [])
    written.append(write_curve(root / "warmup_ciou.txt", list(range(1, len(warm) + 1)), warm))
    return written


def _fmt(value: Any) -> str:
    if value is None:
        return "-"
    if isinstance(value, float):
        return "nan" if math.isnan(value) else f"{value:.4f}"
    return str(value)


def render_summary(manifests: Sequence[RunManifest], title: str = "DMT Lab summary",
                   history: Optional[Dict[str, List[Dict[str, Any]]]] = None) -> str:
    env = Environment(loader=FileSystemLoader(str(TEMPLATES_DIR)), trim_blocks=True, lstrip_blocks=True)
    template = env.get_template("summary.md.j2")
    rows, sources = [], []
    for m in manifests:
        rows.append({
            "variant": m.variant,
            "seed": m.seed,
            "config_hash": m.config_hash[:12],
            "status": m.status,
            **{key: _fmt(m.metrics.get(key)) for key in ("ciou", "auc", "mse", "max_f1", "ap", "fp_accuracy")},
            "warmup_ciou": _fmt(m.warmup_metrics.get("ciou")),
        })
        for source, scores in m.map_sources.items():
            sources.append({"variant": m.variant, "seed": m.seed, "source": source,
                            **{key: _fmt(scores.get(key)) for key in ("ciou", "auc", "mse")}})
    ledger_runs, alerts = [], []
    if history:
        ledger_runs = [{**run, "config_hash": run["config_hash"][:12], "ciou": _fmt(run["ciou"]),
                        "warmup_ciou": _fmt(run["warmup_ciou"])} for run in history.get("runs", [])]
        alerts = [{**alert, "ts": _fmt(alert["ts"])} for alert in history.get("alerts", [])]
    return template.render(title=title, rows=rows, sources=sources, history=history is not None,
                           ledger_runs=ledger_runs, alerts=alerts,
                           notes=[AUC_NOTE, FP_ACC_NOTE, FP_NOTE, IPL_OFF_NOTE])


def emit_reports(manifests: Sequence[RunManifest], out_dir: str,
                 history: Optional[Dict[str, List[Dict[str, Any]]]] = None) -> Path:
    """
    Curve files for every run plus one markdown summary

    Args:
        manifests: at least one run manifest
        out_dir: where summary.md goes
        history: ledger runs and alerts (Ledger.history) for the run-history section

    Returns:
        Path: the summary file
    """
    if not manifests:
        raise ValueError("emit_reports needs at least one manifest")
    for m in manifests:
        if m.status == "done":
            write_curves(m)
    target = Path(out_dir) / "summary.md"
    target.parent.mkdir(parents=True, exist_ok=True)
    target.write_text(render_summary(manifests, history=history))
    logger.info(f"Summary written to {target} ({len(manifests)} runs)")
    return target
