import numpy as np
import pytest
import torch

from irfs.types import (
    FeaturePyramid,
    LoopSchedule,
    MetricReport,
    MultimodalSample,
    RangeError,
    ShapeMismatchError,
    check_same_shape,
    to_chw,
    to_hwc,
    validate_sample,
)


def sample(h=8, w=8, ir_shape=None, mask=None):
    rng = np.random.default_rng(0)
    ir = rng.random(ir_shape or (h, w, 1))
    return MultimodalSample(rng.random((h, w, 3)), ir, mask, "s")


class TestSample:
    def test_valid(self):
        s = sample(mask=np.ones((8, 8)))
        assert validate_sample(s) is s

    def test_infrared_shape_mismatch_names_field(self):
        with pytest.raises(ShapeMismatchError) as e:
            validate_sample(sample(ir_shape=(4, 4, 1)))
        assert e.value.field == "infrared"

    def test_mask_shape_mismatch(self):
        with pytest.raises(ShapeMismatchError) as e:
            validate_sample(sample(mask=np.zeros((8, 7))))
        assert e.value.field == "mask"

    def test_non_binary_mask(self):
        m = np.zeros((8, 8))
        m[0, 0] = 0.5
        with pytest.raises(RangeError) as e:
            validate_sample(sample(mask=m))
        assert e.value.field == "mask"

    def test_pixel_range(self):
        s = MultimodalSample(np.full((4, 4, 3), 1.2), np.zeros((4, 4, 1)))
        with pytest.raises(RangeError):
            validate_sample(s)
        with pytest.raises(RangeError):
            validate_sample(MultimodalSample(np.zeros((4, 4, 3)), np.full((4, 4, 1), np.nan)))

    def test_grayscale_visible_replicated(self):
        g = np.random.default_rng(1).random((5, 6))
        s = MultimodalSample(g, np.zeros((5, 6)))
        assert s.visible.shape == (5, 6, 3) and s.infrared.shape == (5, 6, 1)
        for c in range(3):
            np.testing.assert_array_equal(s.visible[..., c], g)
        assert s.shape == (5, 6)

    def test_immutable(self):
        s = sample()
        with pytest.raises(AttributeError):
            s.id = "other"


def test_layout_round_trip():
    a = np.random.default_rng(2).random((5, 7, 3))
    t = to_chw(a)
    assert t.shape == (1, 3, 5, 7)
    np.testing.assert_array_equal(to_hwc(t), a)


def test_check_same_shape():
    assert check_same_shape(a=np.zeros((2, 3)), b=np.ones((2, 3))) == (2, 3)
    with pytest.raises(ShapeMismatchError):
        check_same_shape(a=np.zeros((2, 3)), b=np.zeros((3, 2)))


def test_feature_pyramid_sizes_non_increasing():
    ok = FeaturePyramid({1: torch.zeros(1, 4, 8, 8), 2: torch.zeros(1, 8, 4, 4)}, "fused")
    assert ok.channels() == [4, 8]
    with pytest.raises(ShapeMismatchError):
        FeaturePyramid({1: torch.zeros(1, 4, 4, 4), 2: torch.zeros(1, 8, 8, 8)}, "visible")
    with pytest.raises(ValueError):
        FeaturePyramid({}, "depth")


class TestSchedule:
    def test_defaults(self):
        s = LoopSchedule()
        assert (s.m, s.n_f, s.n_s, s.batch_size, s.crop) == (10, 3, 10, 8, 352)
        assert (s.lr_fusion, s.lr_sod_init, s.lr_sod_floor) == (1e-3, 5e-5, 1e-6)

    def test_eta_ramp(self):
        s = LoopSchedule()
        assert [s.eta(k) for k in range(10)] == [float(v) for v in range(1, 11)]
        assert LoopSchedule(m=1).eta(0) == 1.0
        with pytest.raises(IndexError):
            s.eta(10)

    def test_cosine(self):
        s = LoopSchedule()
        lrs = [s.sod_lr(e) for e in range(s.n_s)]
        assert lrs[0] == pytest.approx(5e-5) and lrs[-1] == pytest.approx(1e-6)
        assert all(a >= b for a, b in zip(lrs, lrs[1:]))

    @pytest.mark.parametrize("bad", [dict(m=0), dict(batch_size=-1), dict(tau=0.0), dict(eta_end=0.5), dict(lr_sod_floor=1.0)])
    def test_validation(self, bad):
        with pytest.raises(ValueError):
            LoopSchedule(**bad)


def test_metric_report_round_trip():
    r = MetricReport(dataset="x", n_samples=3, flags=["f"])
    assert MetricReport.from_dict(r.to_dict()).to_dict() == r.to_dict()
