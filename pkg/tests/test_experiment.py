import json
import math

import pandas as pd
import pytest

from common.hashing import file_blob_hash
from dmt.synthworld import WorldConfigError
from lab.app.config import ConfigError, build_config
from lab.app.reports import RunManifest, load_manifests
from lab.app.repo import RunRepository
from lab.experiment import Ledger, expand_matrix, run_ablation, run_experiment, summary_rows


class TestMatrix:
    def test_modules_preset(self):
        variants = expand_matrix("modules")
        names = [v["name"] for v in variants]
        assert len(variants) == 10
        assert "full" in names and "no-filter-no-ipl-no-ema" in names
        assert "single-teacher" in names
        full = next(v for v in variants if v["name"] == "full")
        assert full["overrides"] == {"ablation.use_filter": True, "ablation.use_ipl": True, "ablation.use_ema": True}

    def test_axes_cross_product(self):
        variants = expand_matrix({"tau": [0.0, 0.7], "dmt.beta": [0.99, 0.999]})
        assert len(variants) == 4
        assert variants[0] == {"name": "tau=0.0,beta=0.99", "overrides": {"tau": 0.0, "dmt.beta": 0.99}}

    def test_explicit_variants(self):
        variants = expand_matrix({"variants": [{"name": "x", "overrides": {"dmt.tau": 0.0}},
                                               {"overrides": {"ablation.use_ipl": False}}]})
        assert [v["name"] for v in variants] == ["x", "use_ipl=False"]

    def test_preset_key(self):
        assert len(expand_matrix({"preset": "tau"})) == 5

    def test_unknown_preset(self):
        with pytest.raises(ConfigError):
            expand_matrix("gamma")

    def test_empty_axis(self):
        with pytest.raises(ConfigError):
            expand_matrix({"dmt.tau": []})


class TestRunExperiment:
    def test_artifacts(self, tiny_config, tmp_path, session_factory):
        ledger = Ledger(session_factory)
        manifest = run_experiment(tiny_config, seed=0, out_dir=str(tmp_path / "run"), ledger=ledger)
        out = tmp_path / "run"

        assert manifest.variant == "full"
        assert len(manifest.trace) == tiny_config.dmt.epochs
        assert 0.0 <= manifest.metrics["ciou"] <= 1.0
        assert set(manifest.map_sources) == {"teacher_A", "teacher_B", "student_A", "student_B", "fused"}
        for name in ("trace.csv", "warmup_trace.csv", "metrics.txt", "metrics.csv", "warmup.ckpt", "final.ckpt"):
            assert (out / name).exists()
            assert manifest.artifacts[name] == file_blob_hash(str(out / name))
        assert len(list((out / "maps").glob("*.pgm"))) == 16

        stored = RunManifest.from_json((out / "manifest.json").read_text())
        assert stored.config_hash == tiny_config.config_hash()
        assert stored.metrics["ciou"] == manifest.metrics["ciou"]

        db = session_factory()
        try:
            run = RunRepository(db).recent_runs()[0]
            assert run.status == "done" and run.out_dir == str(out)
        finally:
            db.close()

    def test_same_seed_same_metrics(self, tiny_config, tmp_path):
        a = run_experiment(tiny_config, seed=1, out_dir=str(tmp_path / "a"))
        b = run_experiment(tiny_config, seed=1, out_dir=str(tmp_path / "b"))
        assert a.metrics == b.metrics or all(
            (math.isnan(x) and math.isnan(b.metrics[k])) or x == b.metrics[k] for k, x in a.metrics.items())
        assert a.artifacts["final.ckpt"] == b.artifacts["final.ckpt"]

    def test_single_teacher_sources(self, tiny_config, tmp_path):
        config = tiny_config.model_copy(deep=True)
        config.ablation.dual_teachers = False
        manifest = run_experiment(config, seed=0, out_dir=str(tmp_path / "single"))
        assert manifest.variant == "single-teacher"
        assert set(manifest.map_sources) == {"teacher_A", "student_A"}

    def test_failure_leaves_failed_manifest(self, tiny_config, tmp_path, session_factory):
        raw = tiny_config.model_dump()
        config = build_config({**raw, "world": {**raw["world"], "labeled_ratio": 0.001}})
        with pytest.raises(WorldConfigError):
            run_experiment(config, seed=2, out_dir=str(tmp_path / "broken"), ledger=Ledger(session_factory))
        stored = load_manifests([str(tmp_path / "broken")])
        assert len(stored) == 1
        assert stored[0].status == "failed" and stored[0].seed == 2
        assert stored[0].error.startswith("WorldConfigError")
        assert stored[0].metrics == {} and stored[0].config_hash == config.config_hash()
        db = session_factory()
        try:
            assert RunRepository(db).recent_runs()[0].status == "failed"
        finally:
            db.close()


class TestRunAblation:
    def test_table_and_summary(self, tiny_config, tmp_path):
        matrix = {"variants": [{"name": "full", "overrides": {}},
                               {"name": "no-filter", "overrides": {"dmt.tau": 0.0}}]}
        table = run_ablation(tiny_config, matrix, seeds=[0], out_dir=str(tmp_path))
        assert list(table["variant"]) == ["full", "no-filter", "full", "no-filter"]
        summary = summary_rows(table)
        assert list(summary["status"]) == ["1/1 done", "1/1 done"]
        assert (summary["CIoU_std"] == 0.0).all()
        assert (tmp_path / "full" / "seed0" / "manifest.json").exists()
        on_disk = pd.read_csv(tmp_path / "ablation.csv")
        assert len(on_disk) == 4
        assert "dmt.tau" in on_disk.columns

    def test_failed_cell_kept(self, tiny_config, tmp_path):
        matrix = {"variants": [{"name": "broken", "overrides": {"world.labeled_ratio": 0.001}}]}
        table = run_ablation(tiny_config, matrix, seeds=[0], out_dir=str(tmp_path))
        assert table["status"].iloc[0] == "failed"
        assert "WorldConfigError" in table["error"].iloc[0]
        assert summary_rows(table)["status"].iloc[0] == "0/1 done"
        assert math.isnan(summary_rows(table)["CIoU"].iloc[0])
