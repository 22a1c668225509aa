import json
import time
from pathlib import Path

import numpy as np
import pytest
import yaml
from PIL import Image

from irfs import checkpoint as ckpt
from irfs.cli import ConfigError, RunConfig, main
from irfs.fusion import FSFNet, FusionNetConfig
from irfs.sod import FGC2Net, SodNetConfig

TINY = {
    "seed": 0,
    "data": {"synth": 4, "synth_size": 32},
    "schedule": {"m": 1, "n_f": 1, "n_s": 1, "batch_size": 4, "crop": 32},
    "fusion": {"base_channels": 4, "n_res_blocks": 1, "ca_reduction": 2},
    "sod": {"stage_channels": [4, 8, 8, 8, 8], "decoder_channels": 4},
}


@pytest.fixture(scope="module")
def pairs(tmp_path_factory):
    root = tmp_path_factory.mktemp("pairs")
    assert main(["synth", "--out", str(root), "--n", "3", "--size", "40", "--seed", "2", "--split", "test"]) == 0
    return root / "test"


@pytest.fixture(scope="module")
def checkpoints(tmp_path_factory):
    root = tmp_path_factory.mktemp("ckpt")
    fcfg = FusionNetConfig(**TINY["fusion"])
    scfg = SodNetConfig(stage_channels=(4, 8, 8, 8, 8), decoder_channels=4)
    ckpt.save_checkpoint(root / "fusion.ckpt", "fusion", fcfg, FSFNet(fcfg))
    ckpt.save_checkpoint(root / "sod.ckpt", "sod", scfg, FGC2Net(scfg))
    return root / "fusion.ckpt", root / "sod.ckpt"


def pngs(folder):
    return sorted(p.name for p in folder.glob("*.png"))


class TestConfig:
    def test_round_trip(self, tmp_path):
        cfg = RunConfig.from_dict(TINY)
        cfg.dump(tmp_path / "c.yaml")
        assert RunConfig.load(tmp_path / "c.yaml") == cfg

    def test_unknown_keys_rejected(self):
        with pytest.raises(ConfigError, match="bogus"):
            RunConfig.from_dict({"schedule": {"bogus": 1}})
        with pytest.raises(ConfigError, match="extra"):
            RunConfig.from_dict({"extra": 1})

    def test_schema_version(self):
        with pytest.raises(ConfigError, match="schema_version"):
            RunConfig.from_dict({"schema_version": 99})

    def test_invalid_value_is_config_error(self, tmp_path):
        (tmp_path / "c.yaml").write_text(yaml.safe_dump({"schedule": {"m": 0}}))
        assert main(["train", "--config", str(tmp_path / "c.yaml")]) == 2


class TestTrain:
    def test_missing_dataset(self, tmp_path, capsys):
        assert main(["train", "--train-dir", str(tmp_path / "nope"), "--out", str(tmp_path / "run")]) == 2
        assert "not found" in capsys.readouterr().err

    def test_no_data_at_all(self, tmp_path):
        assert main(["train", "--out", str(tmp_path / "run")]) == 2

    def test_synthetic_run_writes_config(self, tmp_path, capsys):
        (tmp_path / "c.yaml").write_text(yaml.safe_dump(TINY))
        run = tmp_path / "run"
        assert main(["train", "--config", str(tmp_path / "c.yaml"), "--out", str(run), "--seed", "5"]) == 0
        saved = RunConfig.load(run / "config.yaml")
        assert saved.seed == 5 and saved.schedule.m == 1
        final = json.loads(capsys.readouterr().out)["final"]
        assert set(final["sod"]) == {"s_alpha", "f_beta", "e_xi", "mae"}
        assert (run / "loop0" / "DONE").is_file()

    def test_one_stage_report(self, tmp_path, capsys):
        (tmp_path / "c.yaml").write_text(yaml.safe_dump(TINY))
        run = tmp_path / "run"
        assert main(["train", "--config", str(tmp_path / "c.yaml"), "--out", str(run), "--one-stage"]) == 0
        final = json.loads(capsys.readouterr().out)["final"]
        assert set(final) >= {"fusion", "sod"}
        assert (run / "one_stage" / "sod.ckpt").is_file()

    @pytest.mark.slow
    def test_toy_config_is_desk_sized(self, tmp_path):
        toy = Path(__file__).parents[1] / "configs" / "toy.yaml"
        start = time.perf_counter()
        assert main(["train", "--config", str(toy), "--synth", "16", "--m", "2", "--out", str(tmp_path / "run")]) == 0
        assert time.perf_counter() - start < 300

    def test_corrupt_checkpoint_on_resume(self, tmp_path):
        (tmp_path / "c.yaml").write_text(yaml.safe_dump(TINY))
        run = tmp_path / "run"
        args = ["train", "--config", str(tmp_path / "c.yaml"), "--out", str(run)]
        assert main(args) == 0
        (run / "loop0" / "sod.ckpt").write_bytes(b"garbage")
        assert main(args + ["--resume"]) == 3


class TestInference:
    def test_fuse_writes_one_png_per_pair(self, pairs, checkpoints, tmp_path):
        assert main(["fuse", "--checkpoint", str(checkpoints[0]), "--input", str(pairs), "--output", str(tmp_path)]) == 0
        assert pngs(tmp_path) == pngs(pairs / "RGB")
        im = Image.open(tmp_path / pngs(tmp_path)[0])
        assert im.mode == "RGB" and im.size == (40, 40)

    def test_fuse_empty_directory(self, checkpoints, tmp_path):
        (tmp_path / "in").mkdir()
        assert main(["fuse", "--checkpoint", str(checkpoints[0]), "--input", str(tmp_path / "in"), "--output", str(tmp_path / "out")]) == 0
        assert pngs(tmp_path / "out") == []

    def test_fuse_wrong_checkpoint_kind(self, pairs, checkpoints, tmp_path):
        assert main(["fuse", "--checkpoint", str(checkpoints[1]), "--input", str(pairs), "--output", str(tmp_path)]) == 3

    @pytest.mark.parametrize("dump_all, per_pair", [(False, 1), (True, 6)])
    def test_detect(self, pairs, checkpoints, tmp_path, dump_all, per_pair):
        args = ["detect", "--fusion-checkpoint", str(checkpoints[0]), "--sod-checkpoint", str(checkpoints[1]),
                "--input", str(pairs), "--output", str(tmp_path), "--size", "32"]
        assert main(args + (["--dump-all"] if dump_all else [])) == 0
        assert len(pngs(tmp_path)) == 3 * per_pair
        for name in pngs(tmp_path):
            assert Image.open(tmp_path / name).size == (40, 40)


class TestEvaluate:
    def test_self_fusion_and_perfect_prediction(self, pairs, tmp_path):
        out = tmp_path / "r.json"
        rc = main(["evaluate", "--fused-dir", str(pairs / "T"), "--ir-dir", str(pairs / "T"), "--vis-dir", str(pairs / "T"),
                   "--pred-dir", str(pairs / "GT"), "--gt-dir", str(pairs / "GT"), "--out", str(out)])
        assert rc == 0
        r = json.loads(out.read_text())
        assert r["aggregate"]["fusion"]["cc"] == pytest.approx(1.0, abs=1e-9)
        assert r["aggregate"]["sod"]["mae"] == 0.0
        assert "metric_config" in r and len(r["per_sample"]) == 3

    def test_metric_subset(self, pairs, capsys):
        assert main(["evaluate", "--pred-dir", str(pairs / "GT"), "--gt-dir", str(pairs / "GT"), "--metrics", "mae"]) == 0
        r = json.loads(capsys.readouterr().out)
        assert r["aggregate"]["sod"] == {"mae": 0.0}

    def test_unmatched_names(self, pairs, tmp_path, capsys):
        pred = tmp_path / "pred"
        pred.mkdir()
        for name in pngs(pairs / "GT")[:2]:
            (pred / name).write_bytes((pairs / "GT" / name).read_bytes())
        Image.fromarray(np.zeros((40, 40), np.uint8)).save(pred / "stray.png")
        assert main(["evaluate", "--pred-dir", str(pred), "--gt-dir", str(pairs / "GT")]) == 2
        err = capsys.readouterr().err
        assert "stray" in err and pngs(pairs / "GT")[2][:-4] in err

    def test_unknown_metric(self, pairs):
        assert main(["evaluate", "--pred-dir", str(pairs / "GT"), "--gt-dir", str(pairs / "GT"), "--metrics", "psnr"]) == 2

    def test_nothing_to_evaluate(self):
        assert main(["evaluate"]) == 2


def test_synth_is_reproducible(tmp_path):
    for name in ("a", "b"):
        assert main(["synth", "--out", str(tmp_path / name), "--n", "2", "--size", "24"]) == 0
    for f in pngs(tmp_path / "a" / "train" / "GT"):
        assert (tmp_path / "a" / "train" / "GT" / f).read_bytes() == (tmp_path / "b" / "train" / "GT" / f).read_bytes()
