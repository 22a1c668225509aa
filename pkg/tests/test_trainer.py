import json

import pytest
import torch

from irfs import checkpoint as ckpt
from irfs.data import SynthConfig, generate_synthetic
from irfs.fusion import FSFNet, FusionNetConfig
from irfs.sod import SodNetConfig
from irfs.trainer import (
    LoopState,
    NumericalAbort,
    Trainer,
    TrainingInterrupted,
    build_networks,
    one_stage_baseline,
    run_interactive_training,
)
from irfs.types import LoopSchedule

TINY_FUSION = FusionNetConfig(base_channels=4, n_res_blocks=1, ca_reduction=2)
TINY_SOD = SodNetConfig(stage_channels=(4, 8, 8, 8, 8), decoder_channels=4)


@pytest.fixture(scope="module")
def tiny_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth")
    train = generate_synthetic(SynthConfig(n_samples=8, size=32, seed=0), root, "train")
    test = generate_synthetic(SynthConfig(n_samples=4, size=32, seed=1), root, "test")
    return train, test


def schedule(**kw):
    base = dict(m=2, n_f=1, n_s=2, batch_size=4, crop=32, lr_sod_init=1e-3, lr_sod_floor=1e-5)
    base.update(kw)
    return LoopSchedule(**base)


def trainer(data, run_dir=None, seed=0, **kw):
    fusion, sod = build_networks(TINY_FUSION, TINY_SOD, seed)
    return Trainer(fusion, sod, data[0], data[1], schedule(**kw), seed=seed, run_dir=run_dir)


class TestPhases:
    def test_fusion_phase_freezes_sod(self, tiny_data):
        t = trainer(tiny_data)
        before_sod = ckpt.weights_checksum(t.sod)
        before_fusion = ckpt.weights_checksum(t.fusion)
        t.run_fusion_phase(LoopState(0, "fusion", 1.0))
        assert ckpt.weights_checksum(t.sod) == before_sod
        assert ckpt.weights_checksum(t.fusion) != before_fusion

    def test_sod_phase_freezes_fusion_and_truncates(self, tiny_data):
        t = trainer(tiny_data)
        before_fusion = ckpt.weights_checksum(t.fusion)
        before_sod = ckpt.weights_checksum(t.sod)
        rows = t.run_sod_phase(LoopState(0, "sod", 1.0))
        assert ckpt.weights_checksum(t.fusion) == before_fusion
        assert ckpt.weights_checksum(t.sod) != before_sod
        assert rows[0]["truncation_probe"] == 0.0

    def test_joint_path_does_reach_fusion(self, tiny_data):
        # control for the probe: without the detach the gradient is non-zero
        t = trainer(tiny_data)
        batch = next(t.batches("fusion", 0, 0))
        loss, _, ls = t._joint_forward(batch, 1.0)
        grads = torch.autograd.grad(ls.total, list(t.fusion.parameters()), allow_unused=True)
        assert max(g.abs().max().item() for g in grads if g is not None) > 0

    def test_cosine_lr_per_loop(self, tiny_data):
        t = trainer(tiny_data, n_s=3, lr_sod_init=5e-5, lr_sod_floor=1e-6)
        rows = t.run_sod_phase(LoopState(0, "sod", 1.0))
        lrs = [r["lr"] for r in rows]
        assert lrs[0] == 5e-5 and lrs[-1] >= 1e-6 and lrs[-1] == pytest.approx(1e-6)

    def test_fusion_loss_decreases(self, tmp_path):
        train = generate_synthetic(SynthConfig(n_samples=16, size=32, seed=0), tmp_path, "train")
        fusion, sod = build_networks(TINY_FUSION, TINY_SOD, 0)
        t = Trainer(fusion, sod, train, None, schedule(n_f=3), seed=0)
        rows = t.run_fusion_phase(LoopState(0, "fusion", 1.0))
        assert rows[-1]["fusion"] <= rows[0]["fusion"]

    def test_nan_aborts_with_snapshot(self, tiny_data, tmp_path):
        t = trainer(tiny_data, run_dir=tmp_path)
        with torch.no_grad():
            t.fusion.reconstruct.project.bias.fill_(float("nan"))
        with pytest.raises(NumericalAbort):
            t.run_fusion_phase(LoopState(0, "fusion", 1.0))
        snap = json.loads((tmp_path / "abort.json").read_text())
        assert snap["phase"] == "fusion" and snap["step"] == 0

    def test_batch_order_is_seeded(self, tiny_data):
        a, b = trainer(tiny_data), trainer(tiny_data)
        ids = lambda t, e: [i for batch in t.batches("sod", 0, e) for i in batch.ids]
        assert ids(a, 0) == ids(b, 0)
        assert sorted(ids(a, 0)) == sorted(ids(a, 1)) and ids(a, 0) != ids(a, 1)


class TestRuns:
    def test_smoke_single_loop(self, tmp_path):
        train = generate_synthetic(SynthConfig(n_samples=4, size=32, seed=0), tmp_path, "train")
        res = run_interactive_training(train, train, schedule(m=1, n_f=1, n_s=1), TINY_FUSION, TINY_SOD)
        assert len(res.reports) == 1
        assert 0 <= res.reports[0].sod["mae"] <= 1

    def test_eta_recorded_per_loop(self, tiny_data):
        res = run_interactive_training(*tiny_data, schedule(m=3, eta_start=1.0, eta_end=3.0), TINY_FUSION, TINY_SOD)
        assert sorted({(r["loop"], r["eta"]) for r in res.trace}) == [(0, 1.0), (1, 2.0), (2, 3.0)]

    def test_run_directory_and_determinism(self, tiny_data, tmp_path):
        for name in ("a", "b"):
            run_interactive_training(*tiny_data, schedule(), TINY_FUSION, TINY_SOD, seed=3, run_dir=tmp_path / name)
        for k in range(2):
            for f in ("fusion.ckpt", "sod.ckpt", "metrics.json", "trace.json", "DONE"):
                assert (tmp_path / "a" / f"loop{k}" / f).is_file()
        assert (tmp_path / "a" / "metrics.json").read_bytes() == (tmp_path / "b" / "metrics.json").read_bytes()
        assert (tmp_path / "a" / "loss_trace.csv").read_bytes() == (tmp_path / "b" / "loss_trace.csv").read_bytes()
        manifest = json.loads((tmp_path / "a" / "manifest.json").read_text())
        assert manifest["seed"] == 3 and set(manifest["config_hashes"]) == {"fusion", "sod"}

    def test_resume_reproduces_trace(self, tiny_data, tmp_path):
        full = run_interactive_training(*tiny_data, schedule(m=3), TINY_FUSION, TINY_SOD, run_dir=tmp_path / "full")
        with pytest.raises(TrainingInterrupted) as e:
            run_interactive_training(*tiny_data, schedule(m=3), TINY_FUSION, TINY_SOD, run_dir=tmp_path / "cut", stop_after_loop=0)
        assert e.value.loop == 0
        resumed = run_interactive_training(*tiny_data, schedule(m=3), TINY_FUSION, TINY_SOD, run_dir=tmp_path / "cut", resume=True)
        # sod rows carry a nan fusion term, so compare serialised traces
        assert json.dumps(resumed.trace) == json.dumps(full.trace)
        assert (tmp_path / "cut" / "metrics.json").read_bytes() == (tmp_path / "full" / "metrics.json").read_bytes()

    def test_one_stage_budget_and_schema(self, tiny_data, tmp_path):
        s = schedule()
        res = one_stage_baseline(*tiny_data, s, TINY_FUSION, TINY_SOD, run_dir=tmp_path)
        assert len(res.trace) == s.m * (s.n_f + s.n_s)
        assert {r["phase"] for r in res.trace} == {"joint"}
        assert set(res.reports[0].to_dict()) == {"fusion", "sod", "dataset", "n_samples", "flags"}
        assert (tmp_path / "one_stage" / "sod.ckpt").is_file()


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        torch.manual_seed(0)
        net = FSFNet(TINY_FUSION)
        ckpt.save_checkpoint(tmp_path / "f.ckpt", "fusion", TINY_FUSION, net)
        loaded = ckpt.build_fusion_from_checkpoint(tmp_path / "f.ckpt")
        assert ckpt.weights_checksum(loaded) == ckpt.weights_checksum(net)

    def test_config_mismatch(self, tmp_path):
        ckpt.save_checkpoint(tmp_path / "f.ckpt", "fusion", TINY_FUSION, FSFNet(TINY_FUSION))
        other = FusionNetConfig(base_channels=4, n_res_blocks=2, ca_reduction=2)
        with pytest.raises(ckpt.CheckpointError, match="n_res_blocks"):
            ckpt.load_into(tmp_path / "f.ckpt", "fusion", FSFNet(other), other)

    def test_corrupt_and_wrong_kind(self, tmp_path):
        (tmp_path / "bad.ckpt").write_bytes(b"garbage")
        with pytest.raises(ckpt.CheckpointError):
            ckpt.read_checkpoint(tmp_path / "bad.ckpt")
        with pytest.raises(ckpt.CheckpointError, match="not found"):
            ckpt.read_checkpoint(tmp_path / "missing.ckpt")
        ckpt.save_checkpoint(tmp_path / "f.ckpt", "fusion", TINY_FUSION, FSFNet(TINY_FUSION))
        with pytest.raises(ckpt.CheckpointError, match="expected a sod"):
            ckpt.read_checkpoint(tmp_path / "f.ckpt", "sod")
