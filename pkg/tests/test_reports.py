import math

import numpy as np
import pandas as pd
import pytest

from dmt.metrics import MetricReport
from dmt.trainer import TRACE_COLUMNS, EpochTrace
from lab.app.reports import (
    RunManifest,
    emit_reports,
    load_manifests,
    render_summary,
    write_metric_report,
    write_trace_csv,
    write_warmup_csv,
)


def make_trace(n=3):
    return [EpochTrace(epoch=k + 1, ciou_val=0.1 * k, auc_val=0.2, mse_val=0.3, n_accepted=10 + k,
                       ipl_quality=float("nan") if k == 0 else 0.5, fp_accept_rate=0.1,
                       loss_sup=1.0, loss_unsup=2.0) for k in range(n)]


def make_manifest(tmp_path, variant="full", seed=0, status="done"):
    return RunManifest(
        config_hash="f" * 64,
        seed=seed,
        variant=variant,
        out_dir=str(tmp_path / f"{variant}-seed{seed}"),
        status=status,
        metrics={"ciou": 0.625, "auc": 0.5, "mse": float("nan"), "max_f1": 0.7, "ap": 0.6, "fp_accuracy": 0.8},
        warmup_metrics={"ciou": 0.4},
        map_sources={"teacher_A": {"ciou": 0.5, "auc": 0.4, "mse": 0.1}},
        warmup_trace={"losses": [0.9, 0.7], "val_ciou": [0.2, 0.3]},
        trace=[t.as_row() for t in make_trace()],
    )


class TestManifest:
    def test_nan_stored_as_null(self, tmp_path):
        manifest = make_manifest(tmp_path)
        text = manifest.to_json()
        assert "NaN" not in text
        assert '"mse": null' in text
        restored = RunManifest.from_json(text)
        assert math.isnan(restored.metrics["mse"])
        assert math.isnan(restored.trace[0]["ipl_quality"])
        assert restored.metrics["ciou"] == 0.625
        assert restored.error is None

    def test_load_from_directory(self, tmp_path):
        for seed in (0, 1):
            make_manifest(tmp_path, seed=seed).write()
        manifests = load_manifests([str(tmp_path)])
        assert sorted(m.seed for m in manifests) == [0, 1]


class TestTables:
    def test_trace_csv_columns(self, tmp_path):
        path = write_trace_csv(make_trace(), str(tmp_path / "trace.csv"))
        df = pd.read_csv(path)
        assert tuple(df.columns) == TRACE_COLUMNS
        assert list(df["n_accepted"]) == [10, 11, 12]

    def test_warmup_csv_pads_missing_validation(self, tmp_path):
        df = pd.read_csv(write_warmup_csv([1.0, 0.5], [0.3], str(tmp_path / "w.csv")))
        assert list(df.columns) == ["epoch", "loss", "ciou_val"]
        assert np.isnan(df["ciou_val"].iloc[1])

    def test_metric_report_files(self, tmp_path):
        report = MetricReport(0.5, 0.4, 0.1, 0.6, 0.55, 0.9, 12)
        text_path, csv_path = write_metric_report(report, str(tmp_path), "m")
        assert MetricReport.from_text(text_path.read_text()).ciou == 0.5
        assert pd.read_csv(csv_path)["n_records"].iloc[0] == 12


class TestSummary:
    def test_emit_writes_curves_and_summary(self, tmp_path):
        manifest = make_manifest(tmp_path)
        summary = emit_reports([manifest], str(tmp_path / "out"))
        text = summary.read_text()
        assert "| full | 0 |" in text
        assert "0.6250" in text
        assert "teacher_A" in text
        assert "AUC" in text
        curves = tmp_path / "full-seed0" / "curves"
        lines = (curves / "filtered_count.txt").read_text().splitlines()
        assert lines == ["1 10", "2 11", "3 12"]
        assert len((curves / "warmup_ciou.txt").read_text().splitlines()) == 2

    def test_failed_runs_listed_without_curves(self, tmp_path):
        manifest = make_manifest(tmp_path, variant="broken", status="failed")
        text = render_summary([manifest])
        assert "failed" in text
        emit_reports([manifest], str(tmp_path / "out"))
        assert not (tmp_path / "broken-seed0" / "curves").exists()

    def test_run_history_section(self, tmp_path):
        history = {
            "runs": [{"id": 7, "variant": "no-ipl", "seed": 1, "status": "failed", "config_hash": "e" * 64,
                      "ciou": None, "warmup_ciou": 0.35, "epochs": 0}],
            "alerts": [{"ts": "2026-01-01 00:00:00", "level": "error", "message": "diverged"}],
        }
        text = emit_reports([make_manifest(tmp_path)], str(tmp_path / "out"), history).read_text()
        assert "## Run history" in text
        assert "| 7 | no-ipl | 1 | eeeeeeeeeeee | failed | 0 | - | 0.3500 |" in text
        assert "| 2026-01-01 00:00:00 | error | diverged |" in text

    def test_history_section_absent_without_ledger(self, tmp_path):
        assert "Run history" not in render_summary([make_manifest(tmp_path)])
        empty = render_summary([make_manifest(tmp_path)], history={"runs": [], "alerts": []})
        assert "No runs in the ledger." in empty

    def test_no_manifests(self, tmp_path):
        with pytest.raises(ValueError):
            emit_reports([], str(tmp_path))
