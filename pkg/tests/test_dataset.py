import json

import numpy as np
import pytest
from PIL import Image

from holopower.dataset import (
    DatasetRecord,
    RecordError,
    brighten,
    build_dataset,
    generate_procedural_target,
    import_rgbd,
    load_corpus,
    load_manifest,
    load_record,
    quantize_depth,
    save_record,
)
from holopower.holo_opt import LaserPowerMatrix, OptimizationConfig


class TestProceduralTarget:
    def test_deterministic(self):
        a = generate_procedural_target(11, 48, 40)
        b = generate_procedural_target(11, 48, 40)
        np.testing.assert_array_equal(a[0], b[0])
        np.testing.assert_array_equal(a[1], b[1])

    def test_range_and_span(self):
        for seed in range(10):
            rgb, depth = generate_procedural_target(seed, 32, 32)
            assert rgb.shape == (3, 32, 32) and depth.shape == (32, 32)
            assert rgb.min() >= 0 and rgb.max() <= 1 and depth.min() >= 0 and depth.max() <= 1
            assert np.all(rgb.min(axis=(1, 2)) <= 0.05) and np.all(rgb.max(axis=(1, 2)) >= 0.95)

    def test_seeds_vary_channel_means(self):
        means = np.array([generate_procedural_target(s, 32, 32)[0].mean(axis=(1, 2)) for s in range(20)])
        assert np.all(means.std(axis=0) > 0.05)
        for a in range(5):
            assert np.max(np.abs(means[a] - means[a + 1])) > 0.02

    def test_depth_is_smooth(self):
        _, depth = generate_procedural_target(2, 64, 64)
        assert np.abs(np.diff(depth, axis=0)).mean() < 0.05

    def test_too_small(self):
        with pytest.raises(ValueError):
            generate_procedural_target(0, 16, 64)

    def test_brighten(self):
        rgb, _ = generate_procedural_target(0, 32, 32)
        bright = brighten(rgb)
        assert bright.min() >= 0.5 and bright.mean() > 0.5


class TestQuantizeDepth:
    def test_single_plane(self):
        masks = quantize_depth(np.random.default_rng(0).uniform(size=(5, 5)), [0.0])
        assert masks.shape == (1, 5, 5) and masks.all()

    def test_zero_depth_first_plane(self):
        masks = quantize_depth(np.zeros((4, 4)), [-0.005, 0, 0.005])
        assert masks[0].all() and not masks[1:].any()

    def test_ramp_thirds(self):
        h = 96
        ramp = np.repeat(np.linspace(0, 1, h)[:, None], 10, axis=1)
        masks = quantize_depth(ramp, [-0.005, 0, 0.005])
        counts = masks.sum(axis=(1, 2))
        assert counts.sum() == h * 10
        assert np.all(np.abs(counts - h * 10 / 3) <= 10)
        assert np.all(masks.sum(axis=0) == 1)

    def test_partition_property(self):
        d = np.random.default_rng(1).uniform(size=(20, 20))
        masks = quantize_depth(d, [0.1, 0.2, 0.3, 0.4])
        np.testing.assert_array_equal(masks.sum(axis=0), 1)


def random_record(seed=0, size=32):
    rgb, depth = generate_procedural_target(seed, size, size)
    masks = quantize_depth(depth, [-0.005, 0, 0.005])
    powers = LaserPowerMatrix(np.random.default_rng(seed).uniform(0, 1, (3, 3)))
    return DatasetRecord("00000", rgb, depth, masks, powers, 0.123, seed, {"scale": 1.8})


class TestRecordIO:
    def test_round_trip_bitwise(self, tmp_path):
        rec = random_record()
        save_record(rec, tmp_path / "r")
        back = load_record(tmp_path / "r")
        np.testing.assert_array_equal(back.target, rec.target)
        np.testing.assert_array_equal(back.depth, rec.depth)
        np.testing.assert_array_equal(back.masks, rec.masks)
        np.testing.assert_array_equal(back.powers.values, rec.powers.values)
        assert (back.id, back.seed, back.final_loss, back.meta["scale"]) == ("00000", 0, 0.123, 1.8)

    def test_layout(self, tmp_path):
        save_record(random_record(), tmp_path / "r")
        names = sorted(p.name for p in (tmp_path / "r").iterdir())
        assert names == ["depth.png", "masks.png", "meta.json", "powers.json", "target.png"]
        assert Image.open(tmp_path / "r" / "masks.png").mode == "P"
        assert np.asarray(Image.open(tmp_path / "r" / "depth.png")).dtype == np.uint16

    def test_truncated_file_named(self, tmp_path):
        save_record(random_record(), tmp_path / "r")
        path = tmp_path / "r" / "target.png"
        path.write_bytes(path.read_bytes()[:-20])
        with pytest.raises(RecordError, match="target.png"):
            load_record(tmp_path / "r")

    def test_shape_mismatch_named(self, tmp_path):
        save_record(random_record(), tmp_path / "r")
        meta = json.loads((tmp_path / "r" / "meta.json").read_text())
        meta["shape"] = [3, 16, 16]
        (tmp_path / "r" / "meta.json").write_text(json.dumps(meta))
        with pytest.raises(RecordError, match="target.png"):
            load_record(tmp_path / "r")

    def test_corrupted_json(self, tmp_path):
        save_record(random_record(), tmp_path / "r")
        (tmp_path / "r" / "meta.json").write_text("{oops")
        with pytest.raises(RecordError, match="meta.json"):
            load_record(tmp_path / "r")

    def test_missing_file(self, tmp_path):
        save_record(random_record(), tmp_path / "r")
        (tmp_path / "r" / "powers.json").unlink()
        with pytest.raises(RecordError, match="powers.json"):
            load_record(tmp_path / "r")


class TestBuildDataset:
    def test_contract_and_determinism(self, tmp_path):
        cfg = OptimizationConfig(steps=50)
        summary = build_dataset(2, 64, cfg, tmp_path / "a", base_seed=5)
        assert summary["count"] == 2 and not summary["failures"]
        assert np.isfinite(summary["mean_final_loss"]) and summary["wall_time_s"] >= 0
        records = load_corpus(tmp_path / "a")
        assert [r.seed for r in records] == [5, 6]
        for r in records:
            assert r.powers.in_range() and r.meta["scale"] == 1.8
            np.testing.assert_array_equal(r.masks.sum(axis=0), 1)
        build_dataset(2, 64, cfg, tmp_path / "b", base_seed=5)
        for rid in ("00000", "00001"):
            for name in ("powers.json", "target.png", "meta.json"):
                assert (tmp_path / "a" / rid / name).read_bytes() == (tmp_path / "b" / rid / name).read_bytes()
        assert (tmp_path / "a" / "manifest.json").read_bytes() == (tmp_path / "b" / "manifest.json").read_bytes()

    def test_manifest(self, tmp_path):
        build_dataset(2, 32, OptimizationConfig(steps=3), tmp_path, base_seed=0)
        manifest = load_manifest(tmp_path)
        assert [r["id"] for r in manifest["records"]] == ["00000", "00001"]
        assert len(manifest["config_hash"]) == 16

    def test_reuses_matching_records(self, tmp_path):
        build_dataset(2, 32, OptimizationConfig(steps=3), tmp_path)
        stamp = (tmp_path / "00000" / "powers.json").stat().st_mtime_ns
        build_dataset(3, 32, OptimizationConfig(steps=3), tmp_path)
        assert (tmp_path / "00000" / "powers.json").stat().st_mtime_ns == stamp
        assert len(load_manifest(tmp_path)["records"]) == 3

    def test_rebuilds_on_config_change(self, tmp_path):
        build_dataset(1, 32, OptimizationConfig(steps=3), tmp_path)
        before = (tmp_path / "00000" / "powers.json").read_bytes()
        build_dataset(1, 32, OptimizationConfig(steps=6), tmp_path)
        assert (tmp_path / "00000" / "powers.json").read_bytes() != before

    def test_io_failure_is_reported(self, tmp_path):
        (tmp_path / "00001").write_text("a file where a directory should be")
        summary = build_dataset(2, 32, OptimizationConfig(steps=2), tmp_path)
        assert summary["count"] == 1 and len(summary["failures"]) == 1

    def test_parallel_matches_serial(self, tmp_path):
        cfg = OptimizationConfig(steps=3)
        build_dataset(2, 32, cfg, tmp_path / "s")
        build_dataset(2, 32, cfg, tmp_path / "p", jobs=2)
        for rid in ("00000", "00001"):
            assert (tmp_path / "s" / rid / "powers.json").read_bytes() == \
                (tmp_path / "p" / rid / "powers.json").read_bytes()

    def test_invalid_count(self, tmp_path):
        with pytest.raises(ValueError):
            build_dataset(0, 32, OptimizationConfig(steps=1), tmp_path)


def test_import_rgbd(tmp_path):
    rgb = (np.random.default_rng(0).uniform(0, 255, (20, 30, 3))).astype(np.uint8)
    Image.fromarray(rgb).save(tmp_path / "img.png")
    depth = np.linspace(0, 65535, 600).reshape(20, 30).astype(np.uint16)
    Image.fromarray(depth).save(tmp_path / "d.png")
    img, d = import_rgbd(tmp_path / "img.png", tmp_path / "d.png")
    np.testing.assert_array_equal(img, np.moveaxis(rgb, -1, 0) / 255.0)
    assert d.min() == 0 and d.max() == 1
    img2, d2 = import_rgbd(tmp_path / "img.png", size=16)
    assert img2.shape == (3, 16, 16) and not d2.any()
