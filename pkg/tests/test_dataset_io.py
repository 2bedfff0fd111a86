import numpy as np
import pytest

from dmt.dataset_io import DatasetIOError, export_splits, import_splits, read_pnm, write_pnm
from dmt.synthworld import make_splits
from lab.app.config import WorldConfig


class TestPnm:
    def test_gray_and_color(self, tmp_path, rng):
        gray = np.round(rng.random((5, 7)) * 255) / 255
        color = np.round(rng.random((4, 4, 3)) * 255) / 255
        write_pnm(tmp_path / "g.pgm", gray)
        write_pnm(tmp_path / "c.ppm", color)
        assert (tmp_path / "g.pgm").read_bytes().startswith(b"P5")
        assert (tmp_path / "c.ppm").read_bytes().startswith(b"P6")
        np.testing.assert_allclose(read_pnm(tmp_path / "g.pgm"), gray, atol=1e-12)
        np.testing.assert_allclose(read_pnm(tmp_path / "c.ppm"), color, atol=1e-12)

    def test_header_comment(self, tmp_path):
        (tmp_path / "x.pgm").write_bytes(b"P5\n# made by hand\n2 1\n255\n\x00\xff")
        np.testing.assert_array_equal(read_pnm(tmp_path / "x.pgm"), [[0.0, 1.0]])

    def test_unsupported_maxval(self, tmp_path):
        (tmp_path / "x.pgm").write_bytes(b"P5\n1 1\n65535\n\x00\x00")
        with pytest.raises(DatasetIOError):
            read_pnm(tmp_path / "x.pgm")

    def test_two_channel_grid(self, tmp_path):
        with pytest.raises(DatasetIOError):
            write_pnm(tmp_path / "x.ppm", np.zeros((2, 2, 2)))


class TestSplitsOnDisk:
    def test_export_then_import(self, tmp_path):
        world = WorldConfig(labeled_pool_size=20, labeled_ratio=0.5, unlabeled_size=6, val_size=3,
                            test_size=4, instrumented_size=2, fp_rate=0.5)
        splits = make_splits(world, 0)
        counts = export_splits(splits, str(tmp_path), config_hash="abc")
        assert counts == {"labeled": 10, "unlabeled": 6, "val": 3, "test": 4}
        loaded = import_splits(str(tmp_path), world)
        for name in ("labeled", "unlabeled", "val", "test"):
            for a, b in zip(splits.by_name(name), loaded.by_name(name)):
                assert a.sample_id == b.sample_id
                assert a.is_false_positive == b.is_false_positive
                np.testing.assert_array_equal(a.visual, b.visual)
                np.testing.assert_array_equal(a.audio, b.audio)
                assert (a.gt is None) == (b.gt is None)
        assert set(loaded.instrumented) == set(splits.instrumented)

    def test_missing_manifest(self, tmp_path, world):
        with pytest.raises(DatasetIOError):
            import_splits(str(tmp_path), world)
