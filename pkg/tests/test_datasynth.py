import os

import numpy as np
import pytest

from bwnkit.datasynth import (
    CLASS_NAMES,
    Dataset,
    DatasetFormatError,
    SceneConfig,
    class_histogram,
    generate,
    load_dataset,
    save_dataset,
    splitmix64,
)
from bwnkit.detect import GroundTruth


def dir_bytes(path):
    out = {}
    for name in sorted(os.listdir(path)):
        with open(os.path.join(path, name), "rb") as fh:
            out[name] = fh.read()
    return out


class TestGenerate:
    def test_deterministic_files(self, tmp_path):
        cfg = SceneConfig(seed=11)
        a, b = tmp_path / "a", tmp_path / "b"
        save_dataset(generate(cfg, 6), a)
        save_dataset(generate(cfg, 6), b)
        assert dir_bytes(a) == dir_bytes(b)

    def test_label_bounds(self):
        ds = generate(SceneConfig(seed=5), 20)
        limit = 40.0 / 96 + 2.0 / 96
        for img_gts in ds.gts:
            for g in img_gts:
                assert 0 < g.w <= limit and 0 < g.h <= limit
                assert 0 <= g.cx - g.w / 2 and g.cx + g.w / 2 <= 1
                assert 0 <= g.cy - g.h / 2 and g.cy + g.h / 2 <= 1

    def test_disc_label_matches_radius(self):
        ds = generate(SceneConfig(seed=21), 60)
        checked = 0
        for img_gts in ds.gts:
            for g in img_gts:
                if g.class_id == 0:
                    # discs are rendered with w == h == diameter
                    assert abs(g.w - g.h) <= 2.0 / 96
                    checked += 1
        assert checked > 10

    def test_pairwise_iou_bounded(self):
        ds = generate(SceneConfig(seed=13), 30)
        for img_gts in ds.gts:
            for i in range(len(img_gts)):
                for j in range(i + 1, len(img_gts)):
                    from bwnkit.detect import iou
                    assert iou(img_gts[i], img_gts[j]) <= 0.3 + 1e-9

    def test_object_count_range(self):
        ds = generate(SceneConfig(seed=3), 40)
        for img_gts in ds.gts:
            assert 1 <= len(img_gts) <= 4

    def test_class_balance(self):
        ds = generate(SceneConfig(seed=17), 500)
        hist = class_histogram(ds)
        total = sum(hist)
        assert total >= 1000
        for count in hist:
            assert 0.28 <= count / total <= 0.39

    def test_pixels_in_unit_range(self):
        ds = generate(SceneConfig(seed=2), 4)
        assert ds.images.min() >= 0.0 and ds.images.max() <= 1.0

    def test_count_validated(self):
        with pytest.raises(ValueError):
            generate(SceneConfig(), 0)

    def test_splitmix_is_stable(self):
        # frozen reference values of the named SplitMix64 mix
        assert splitmix64(0) == 16294208416658607535
        assert splitmix64(1) == 10451216379200822465


class TestIo:
    def test_roundtrip_exact(self, tmp_path):
        ds = generate(SceneConfig(seed=9), 5)
        save_dataset(ds, tmp_path / "d")
        loaded = load_dataset(tmp_path / "d")
        np.testing.assert_array_equal(loaded.images, ds.images)
        assert loaded.gts == ds.gts

    def test_image_file_size(self, tmp_path):
        ds = generate(SceneConfig(seed=1), 1)
        save_dataset(ds, tmp_path / "d")
        assert (tmp_path / "d" / "00000.bwdi").stat().st_size == 16 + 96 * 96 * 3

    def test_label_line_format(self, tmp_path):
        ds = Dataset(images=np.zeros((1, 3, 96, 96), dtype=np.float32),
                     gts=[[GroundTruth(0, 0.5, 0.5, 0.5, 0.5)]])
        save_dataset(ds, tmp_path / "d")
        line = (tmp_path / "d" / "00000.txt").read_text().strip()
        assert line == "0 0.500000 0.500000 0.500000 0.500000"

    def test_bad_magic(self, tmp_path):
        d = tmp_path / "d"
        d.mkdir()
        (d / "00000.bwdi").write_bytes(b"XXXX" + b"\x00" * 20)
        (d / "00000.txt").write_text("")
        with pytest.raises(DatasetFormatError, match="magic"):
            load_dataset(d)

    def test_truncated_image(self, tmp_path):
        ds = generate(SceneConfig(seed=1), 1)
        save_dataset(ds, tmp_path / "d")
        p = tmp_path / "d" / "00000.bwdi"
        p.write_bytes(p.read_bytes()[:-10])
        with pytest.raises(DatasetFormatError, match="expected"):
            load_dataset(tmp_path / "d")

    def test_empty_dir(self, tmp_path):
        d = tmp_path / "d"
        d.mkdir()
        with pytest.raises(DatasetFormatError):
            load_dataset(d)

    def test_class_names_cover_three_shapes(self):
        assert len(CLASS_NAMES) == 3
