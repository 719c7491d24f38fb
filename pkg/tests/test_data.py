import filecmp
import os

import numpy as np
import pytest

from fusionsam import data
from fusionsam.errors import ConfigError, DataError


def tree_bytes(root):
    out = {}
    for dirpath, _, files in os.walk(root):
        for f in sorted(files):
            p = os.path.join(dirpath, f)
            with open(p, "rb") as fh:
                out[os.path.relpath(p, root)] = fh.read()
    return out


class TestSyntheticGenerator:
    def test_same_seed_byte_identical_trees(self, tmp_path):
        cfg = data.SynthConfig(train_count=3, val_count=1, test_count=1, seed=5)
        data.gen_synthetic(cfg, str(tmp_path / "a"))
        data.gen_synthetic(cfg, str(tmp_path / "b"))
        a = tree_bytes(tmp_path / "a")
        b = tree_bytes(tmp_path / "b")
        assert a.keys() == b.keys()
        assert all(a[k] == b[k] for k in a)

    def test_different_seed_differs(self, tmp_path):
        data.gen_synthetic(data.SynthConfig(train_count=2, seed=1), str(tmp_path / "a"))
        data.gen_synthetic(data.SynthConfig(train_count=2, seed=2), str(tmp_path / "b"))
        a = tree_bytes(tmp_path / "a")
        b = tree_bytes(tmp_path / "b")
        assert any(a[k] != b[k] for k in a if k in b)

    def test_labels_within_class_range(self, tmp_path):
        cfg = data.SynthConfig(train_count=6, num_classes=4, seed=3)
        data.gen_synthetic(cfg, str(tmp_path))
        for sample in data.load_dataset(str(tmp_path), "train"):
            assert sample.labels.min() >= 0
            assert sample.labels.max() < 4

    def test_ir_only_class_contrast(self, tmp_path):
        # class 2 must be invisible in vis (zero contrast, below the noise
        # floor by construction) and strongly visible in ir
        cfg = data.SynthConfig(train_count=12, seed=4)
        assert cfg.ir_contrast > 3 * cfg.noise  # generator parameter arithmetic
        data.gen_synthetic(cfg, str(tmp_path))
        found = 0
        for sample in data.load_dataset(str(tmp_path), "train"):
            region = sample.labels == 2
            bg = sample.labels == 0
            if region.sum() < 12 or bg.sum() < 12:
                continue
            rows = np.nonzero(region)
            # compare against background pixels in the same columns to cancel
            # the horizontal luminance ramp in the visible background
            vis_delta = []
            for r, c in zip(*rows):
                col_bg = bg[:, c]
                if col_bg.any():
                    vis_delta.append(
                        sample.vis.data[r, c].mean()
                        - sample.vis.data[col_bg, c].mean(axis=0).mean()
                    )
            if not vis_delta:
                continue
            found += 1
            assert abs(np.mean(vis_delta)) < 3 * cfg.noise
            ir_delta = sample.ir.data[region].mean() - sample.ir.data[bg].mean()
            assert ir_delta > 10 * cfg.noise
        assert found >= 3

    def test_image_size_validation(self):
        with pytest.raises(ConfigError):
            data.SynthConfig(image_size=30).validate()
        with pytest.raises(ConfigError):
            data.SynthConfig(num_classes=1).validate()


class TestLoadDataset:
    def test_sorted_by_filename(self, tmp_path):
        cfg = data.SynthConfig(train_count=3, seed=6)
        data.gen_synthetic(cfg, str(tmp_path))
        samples = data.load_dataset(str(tmp_path), "train")
        assert [s.id for s in samples] == ["0000", "0001", "0002"]
        assert samples[0].vis.shape == (32, 32, 3)
        assert samples[0].ir.shape == (32, 32, 1)
        assert samples[0].vis.data.max() <= 1.0 and samples[0].vis.data.min() >= 0.0

    def test_missing_ir_names_the_id(self, tmp_path):
        data.gen_synthetic(data.SynthConfig(train_count=2, seed=7), str(tmp_path))
        os.remove(tmp_path / "train" / "ir" / "0001.png")
        with pytest.raises(DataError, match="0001"):
            data.load_dataset(str(tmp_path), "train")

    def test_mismatched_dims_rejected(self, tmp_path):
        data.gen_synthetic(data.SynthConfig(train_count=1, seed=8), str(tmp_path))
        bad = np.zeros((16, 16), dtype=np.uint8)
        data._save_png(str(tmp_path / "train" / "ir" / "0000.png"), bad, "L")
        with pytest.raises(DataError, match="dims disagree"):
            data.load_dataset(str(tmp_path), "train")

    def test_mfnet_shaped_files_load(self, tmp_path):
        g = np.random.default_rng(9)
        vis = (g.uniform(0, 1, (480, 640, 3)) * 255).astype(np.uint8)
        ir = (g.uniform(0, 1, (480, 640)) * 255).astype(np.uint8)
        labels = g.integers(0, 9, (480, 640)).astype(np.uint8)
        data._save_png(str(tmp_path / "train" / "vis" / "0000.png"), vis, "RGB")
        data._save_png(str(tmp_path / "train" / "ir" / "0000.png"), ir, "L")
        data._save_png(str(tmp_path / "train" / "labels" / "0000.png"), labels, "P")
        samples = data.load_dataset(str(tmp_path), "train")
        assert samples[0].vis.shape == (480, 640, 3)
        assert samples[0].labels.shape == (480, 640)

    def test_class_map_remaps_ids(self, tmp_path):
        data.gen_synthetic(data.SynthConfig(train_count=1, seed=10), str(tmp_path))
        mapping_file = tmp_path / "classes.txt"
        mapping_file.write_text("# remap\n3 1\n")
        mapping = data.load_class_map(str(mapping_file))
        samples = data.load_dataset(str(tmp_path), "train", class_map=mapping)
        assert 3 not in np.unique(samples[0].labels)

    def test_unknown_split(self, tmp_path):
        with pytest.raises(ConfigError):
            data.load_dataset(str(tmp_path), "validation")


class TestMaskExport:
    def test_round_trip_exact(self, tmp_path):
        g = np.random.default_rng(11)
        classes = g.integers(0, 8, (16, 16)).astype(np.int64)
        path = str(tmp_path / "mask.png")
        data.export_mask(classes, path)
        assert np.array_equal(data.load_mask(path), classes)

    def test_checkerboard_round_trip(self, tmp_path):
        classes = np.indices((8, 8)).sum(axis=0) % 2
        path = str(tmp_path / "board.png")
        data.export_mask(classes.astype(np.int64), path)
        assert np.array_equal(data.load_mask(path), classes)

    def test_class_zero_is_palette_entry_zero(self):
        table = data.palette()
        assert tuple(table[0]) == (0, 0, 0)
        assert len(np.unique(table[:16], axis=0)) == 16

    def test_out_of_range_ids_rejected(self, tmp_path):
        with pytest.raises(DataError):
            data.export_mask(np.array([[300]]), str(tmp_path / "bad.png"))

    def test_fusion_map_round_trip_within_8bit(self, tmp_path):
        g = np.random.default_rng(12)
        fmap = g.uniform(0, 1, (8, 8, 3))
        path = str(tmp_path / "fusion.png")
        data.export_fusion_map(fmap, path)
        back = data.load_fusion_map(path)
        assert np.max(np.abs(back - fmap)) <= 1.0 / 255.0 + 1e-12
