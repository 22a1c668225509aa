import hashlib

import numpy as np
import pytest
from PIL import Image

from irfs import data
from irfs.data import DatasetError, SynthConfig


def write_triple(base, name, size=8, mask=True):
    rng = np.random.default_rng(sum(map(ord, name)))
    for sub in ("RGB", "T", "GT"):
        (base / sub).mkdir(parents=True, exist_ok=True)
    Image.fromarray((rng.random((size, size, 3)) * 255).astype(np.uint8)).save(base / "RGB" / f"{name}.png")
    Image.fromarray((rng.random((size, size)) * 255).astype(np.uint8)).save(base / "T" / f"{name}.png")
    if mask:
        Image.fromarray(((rng.random((size, size)) > 0.5) * 255).astype(np.uint8)).save(base / "GT" / f"{name}.png")


class TestManifest:
    def test_three_triples(self, tmp_path):
        for n in ("c", "a", "b"):
            write_triple(tmp_path / "train", n)
        m = data.load_manifest(tmp_path, "train")
        assert m.ids() == ["a", "b", "c"]

    def test_missing_mask_lists_every_id(self, tmp_path):
        write_triple(tmp_path, "a")
        write_triple(tmp_path, "b", mask=False)
        write_triple(tmp_path, "c", mask=False)
        with pytest.raises(DatasetError) as e:
            data.load_manifest(tmp_path, "train")
        assert "b: missing mask" in str(e.value) and "c: missing mask" in str(e.value)

    def test_test_split_allows_missing_masks(self, tmp_path):
        write_triple(tmp_path, "a", mask=False)
        assert data.load_manifest(tmp_path, "test").entries[0].mask is None

    def test_empty_and_missing_dirs(self, tmp_path):
        with pytest.raises(DatasetError, match="empty"):
            data.load_manifest(tmp_path, "train")
        with pytest.raises(DatasetError, match="not found"):
            data.load_manifest(tmp_path / "nope", "train")

    def test_cache_round_trip_and_invalidation(self, tmp_path):
        write_triple(tmp_path, "a")
        first = data.load_manifest(tmp_path, "train")
        assert (tmp_path / ".irfs_manifest_train.json").is_file()
        assert data.load_manifest(tmp_path, "train") == first
        write_triple(tmp_path, "b")
        assert len(data.load_manifest(tmp_path, "train")) == 2

    def test_undecodable_file(self, tmp_path):
        write_triple(tmp_path, "a")
        (tmp_path / "RGB" / "a.png").write_bytes(b"not a png")
        m = data.load_manifest(tmp_path, "train", use_cache=False)
        with pytest.raises(DatasetError, match="cannot decode"):
            data.read_sample(m.entries[0])

    def test_custom_subdirs(self, tmp_path):
        write_triple(tmp_path, "a")
        (tmp_path / "RGB").rename(tmp_path / "vis")
        m = data.load_manifest(tmp_path, "train", subdirs={"visible": "vis"}, use_cache=False)
        assert len(m) == 1


class TestBatches:
    @pytest.fixture
    def manifest(self, tmp_path):
        return data.generate_synthetic(SynthConfig(n_samples=8, size=32, seed=4), tmp_path)

    def test_shape_and_ranges(self, manifest):
        b = data.make_batch(manifest, range(8), train=True, crop=24, rng=np.random.default_rng(0))
        assert b.visible.shape == (8, 24, 24, 3) and b.infrared.shape == (8, 24, 24, 1) and b.mask.shape == (8, 24, 24)
        assert b.visible.min() >= 0 and b.visible.max() <= 1
        assert set(np.unique(b.mask)) <= {0.0, 1.0}
        vis, ir, gt = b.tensors()
        assert vis.shape == (8, 3, 24, 24) and ir.shape == (8, 1, 24, 24) and gt.shape == (8, 1, 24, 24)

    def test_default_batch_shape(self, manifest):
        b = data.make_batch(manifest, range(8), train=False, crop=352)
        assert b.visible.shape == (8, 352, 352, 3)
        assert set(np.unique(b.mask)) <= {0.0, 1.0}

    def test_flip_is_synchronised(self, manifest):
        plain = data.make_batch(manifest, range(8), train=False)
        b = data.make_batch(manifest, range(8), train=True, rng=np.random.default_rng(1))
        assert b.flipped.any() and not b.flipped.all()
        for k, f in enumerate(b.flipped):
            for arr, ref in ((b.visible, plain.visible), (b.infrared, plain.infrared), (b.mask, plain.mask)):
                expected = data.hflip(ref[k]) if f else ref[k]
                np.testing.assert_array_equal(arr[k], expected)

    def test_flip_involution(self, rng):
        a = rng.random((4, 5, 3))
        np.testing.assert_array_equal(data.hflip(data.hflip(a)), a)

    def test_workers_do_not_change_content(self, manifest, monkeypatch):
        one = data.make_batch(manifest, [3, 1, 5], train=True, rng=np.random.default_rng(9))
        monkeypatch.setenv("IRFS_NUM_WORKERS", "3")
        many = data.make_batch(manifest, [3, 1, 5], train=True, rng=np.random.default_rng(9))
        assert one.ids == many.ids
        np.testing.assert_array_equal(one.visible, many.visible)
        np.testing.assert_array_equal(one.mask, many.mask)

    def test_num_workers_env(self, monkeypatch):
        monkeypatch.setenv("IRFS_NUM_WORKERS", "garbage")
        assert data.num_workers() == 1
        monkeypatch.setenv("IRFS_NUM_WORKERS", "4")
        assert data.num_workers() == 4


class TestSynthetic:
    def _digest(self, root):
        h = hashlib.sha256()
        for p in sorted(root.rglob("*.png")):
            h.update(p.relative_to(root).as_posix().encode())
            h.update(p.read_bytes())
        return h.hexdigest()

    def test_byte_identical_per_seed(self, tmp_path):
        cfg = SynthConfig(n_samples=3, size=32, seed=11)
        data.generate_synthetic(cfg, tmp_path / "a")
        data.generate_synthetic(cfg, tmp_path / "b")
        assert self._digest(tmp_path / "a") == self._digest(tmp_path / "b")
        data.generate_synthetic(SynthConfig(n_samples=3, size=32, seed=12), tmp_path / "c")
        assert self._digest(tmp_path / "a") != self._digest(tmp_path / "c")

    def test_area_bounds_and_hotspots(self):
        cfg = SynthConfig(size=64)
        lo, hi = cfg.area_bounds()
        rng = np.random.default_rng(0)
        for k in range(30):
            s = data.synth_sample(cfg, rng, str(k))
            frac = s.mask.mean()
            assert lo <= frac <= hi
            ir = s.infrared[..., 0]
            assert ir[s.mask > 0].mean() > ir[s.mask == 0].mean()

    def test_round_trip_through_disk(self, tmp_path):
        m = data.generate_synthetic(SynthConfig(n_samples=2, size=16, seed=0), tmp_path)
        s = data.read_sample(m.entries[0])
        assert s.visible.shape == (16, 16, 3)
        assert set(np.unique(s.mask)) <= {0.0, 1.0}

    def test_config_validation(self):
        with pytest.raises(ValueError):
            SynthConfig(n_shapes=(3, 1))
        with pytest.raises(ValueError):
            SynthConfig(radius_range=(0.0, 0.1))
