"""``irfs`` command line: train, fuse, detect, evaluate, synth.

Exit codes: 0 ok, 2 config or data error, 3 checkpoint error,
4 numerical abort, 130 interrupted (resumable with ``--resume``).
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import yaml
from PIL import Image

from . import checkpoint as ckpt
from . import metrics
from .data import (
    DatasetError,
    EmptyDatasetError,
    IMAGE_EXTS,
    SynthConfig,
    generate_synthetic,
    load_manifest,
    read_image,
    read_sample,
)
from .fusion import FusionNetConfig, fuse_pair, to_ycbcr
from .sod import SodNetConfig, TokenOverflowError
from .trainer import LossConfig, NumericalAbort, TrainingInterrupted, one_stage_baseline, run_interactive_training
from .types import LoopSchedule

log = logging.getLogger("irfs")

SCHEMA_VERSION = 1
EXIT_OK, EXIT_DATA, EXIT_CHECKPOINT, EXIT_NUMERIC, EXIT_INTERRUPTED = 0, 2, 3, 4, 130


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DataConfig:
    train_root: Optional[str] = None
    test_root: Optional[str] = None
    synth: int = 0  # >0: generate this many training pairs (plus a quarter as test)
    synth_size: int = 96
    synth_seed: int = 0


@dataclass(frozen=True)
class RunConfig:
    schema_version: int = SCHEMA_VERSION
    seed: int = 0
    out: str = "runs/irfs"
    one_stage: bool = False
    backbone_weights: Optional[str] = None
    data: DataConfig = field(default_factory=DataConfig)
    schedule: LoopSchedule = field(default_factory=LoopSchedule)
    fusion: FusionNetConfig = field(default_factory=FusionNetConfig)
    sod: SodNetConfig = field(default_factory=SodNetConfig)
    loss: LossConfig = field(default_factory=LossConfig)

    def to_dict(self) -> dict:
        return json.loads(json.dumps(dataclasses.asdict(self), default=list))

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d or {})
        version = d.get("schema_version", SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            raise ConfigError(f"unsupported config schema_version {version} (expected {SCHEMA_VERSION})")
        nested = {"data": DataConfig, "schedule": LoopSchedule, "fusion": FusionNetConfig, "sod": SodNetConfig, "loss": LossConfig}
        kwargs = _check_keys("config", d, cls)
        for key, typ in nested.items():
            if key in kwargs:
                sub = kwargs[key]
                if not isinstance(sub, dict):
                    raise ConfigError(f"config section '{key}' must be a mapping")
                try:
                    kwargs[key] = typ(**_check_keys(key, sub, typ))
                except (TypeError, ValueError) as e:
                    raise ConfigError(f"config section '{key}': {e}") from e
        try:
            return cls(**kwargs)
        except (TypeError, ValueError) as e:
            raise ConfigError(str(e)) from e

    def dump(self, path) -> None:
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=False))

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            raw = yaml.safe_load(Path(path).read_text())
        except FileNotFoundError as e:
            raise ConfigError(f"config file not found: {path}") from e
        except yaml.YAMLError as e:
            raise ConfigError(f"cannot parse {path}: {e}") from e
        if raw is not None and not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        return cls.from_dict(raw or {})


def _check_keys(section: str, d: dict, typ) -> dict:
    allowed = {f.name for f in dataclasses.fields(typ)}
    unknown = sorted(set(d) - allowed)
    if unknown:
        raise ConfigError(f"unknown keys in {section}: {unknown}")
    return dict(d)


# ---------------------------------------------------------------------------
# train


def _replace(obj, **changes):
    changes = {k: v for k, v in changes.items() if v is not None}
    return dataclasses.replace(obj, **changes) if changes else obj


def resolve_train_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    try:
        cfg = dataclasses.replace(
            cfg,
            seed=args.seed if args.seed is not None else cfg.seed,
            out=args.out or cfg.out,
            one_stage=cfg.one_stage or args.one_stage,
            data=_replace(cfg.data, train_root=args.train_dir, test_root=args.test_dir, synth=args.synth),
            schedule=_replace(
                cfg.schedule,
                m=args.m,
                n_f=args.n_f,
                n_s=args.n_s,
                batch_size=args.batch_size,
                crop=args.crop,
                lr_sod_init=args.lr_sod,
                lr_sod_floor=args.lr_sod_floor,
            ),
            sod=_replace(
                cfg.sod,
                use_c2ftl=False if args.no_c2ftl else None,
                use_lfs=False if args.no_lfs else None,
                guidance=args.guidance,
            ),
        )
    except ValueError as e:
        raise ConfigError(str(e)) from e
    return cfg


def _datasets(cfg: RunConfig, out: Path):
    d = cfg.data
    if d.synth > 0:
        root = out / "data"
        train = generate_synthetic(SynthConfig(n_samples=d.synth, size=d.synth_size, seed=d.synth_seed), root, "train")
        n_test = max(4, d.synth // 4)
        test = generate_synthetic(SynthConfig(n_samples=n_test, size=d.synth_size, seed=d.synth_seed + 1), root, "test")
        return train, test
    if not d.train_root:
        raise ConfigError("no training data: give --train-dir, data.train_root or --synth N")
    train = load_manifest(d.train_root, "train", resize=cfg.schedule.crop)
    test = load_manifest(d.test_root, "test", resize=cfg.schedule.crop) if d.test_root else None
    return train, test


def cmd_train(args) -> int:
    cfg = resolve_train_config(args)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.dump(out / "config.yaml")
    train, test = _datasets(cfg, out)
    common = dict(
        schedule=cfg.schedule,
        fusion_cfg=cfg.fusion,
        sod_cfg=cfg.sod,
        seed=cfg.seed,
        loss_cfg=cfg.loss,
        run_dir=out,
        backbone_weights=cfg.backbone_weights,
    )
    if cfg.one_stage:
        result = one_stage_baseline(train, test, **common)
    else:
        result = run_interactive_training(train, test, resume=args.resume, **common)
    final = result.reports[-1]
    print(json.dumps({"run": str(out), "final": final.to_dict()}, indent=2))
    return EXIT_OK


# ---------------------------------------------------------------------------
# fuse / detect


def _pairs(input_dir: str):
    """Manifest for an inference directory, or None if it holds no images."""
    try:
        return load_manifest(input_dir, "test", use_cache=False)
    except EmptyDatasetError:
        return None


def _save_gray(arr: np.ndarray, path: Path) -> None:
    Image.fromarray(np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8), "L").save(path)


def cmd_fuse(args) -> int:
    net = ckpt.build_fusion_from_checkpoint(args.checkpoint)
    manifest = _pairs(args.input)
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    if manifest is None:
        log.warning("no image pairs found under %s; nothing to fuse", args.input)
        return EXIT_OK
    for entry in manifest.entries:
        fused = fuse_pair(read_sample(entry), net)
        rgb = np.clip(np.rint(fused.rgb * 255.0), 0, 255).astype(np.uint8)
        Image.fromarray(rgb, "RGB").save(out / f"{entry.id}.png")
    log.info("wrote %d fused images to %s", len(manifest), out)
    return EXIT_OK


def cmd_detect(args) -> int:
    import torch
    import torch.nn.functional as F

    fusion = ckpt.build_fusion_from_checkpoint(args.fusion_checkpoint)
    sod = ckpt.build_sod_from_checkpoint(args.sod_checkpoint)
    manifest = _pairs(args.input)
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    if manifest is None:
        log.warning("no image pairs found under %s; nothing to detect", args.input)
        return EXIT_OK
    with torch.no_grad():
        for entry in manifest.entries:
            native = read_sample(entry)
            h, w = native.shape
            s = read_sample(entry, args.size)
            vis = torch.from_numpy(s.visible.transpose(2, 0, 1)[None]).float()
            ir = torch.from_numpy(s.infrared.transpose(2, 0, 1)[None]).float()
            _, rgb_f = fusion.fuse_rgb(vis, ir)
            maps = sod(vis, rgb_f, ir).all_maps()
            wanted = maps if args.dump_all else {"final": maps["final"]}
            for name, m in wanted.items():
                m = F.interpolate(m, size=(h, w), mode="bilinear", align_corners=False)[0, 0].numpy()
                suffix = "" if name == "final" else f"_{name}"
                _save_gray(m, out / f"{entry.id}{suffix}.png")
    log.info("wrote saliency maps for %d pairs to %s", len(manifest), out)
    return EXIT_OK


# ---------------------------------------------------------------------------
# evaluate


def _index(folder) -> dict:
    folder = Path(folder)
    if not folder.is_dir():
        raise DatasetError(f"directory not found: {folder}")
    return {p.stem: p for p in sorted(folder.iterdir()) if p.suffix.lower() in IMAGE_EXTS}


def _match(named: dict) -> list[str]:
    indices = {k: _index(v) for k, v in named.items()}
    names = set().union(*(set(i) for i in indices.values()))
    unmatched = sorted(n for n in names if any(n not in i for i in indices.values()))
    if unmatched:
        detail = "; ".join(f"{n} (missing in {', '.join(k for k, i in indices.items() if n not in i)})" for n in unmatched)
        raise DatasetError(f"unmatched filenames: {detail}")
    if not names:
        raise DatasetError("no images to evaluate")
    return sorted(names)


def _luma(path) -> np.ndarray:
    rgb = read_image(path, "RGB").astype(np.float64)
    return to_ycbcr(rgb)[0][..., 0]


def cmd_evaluate(args) -> int:
    wanted = args.metrics or []
    fusion_keys = [m for m in ("mi", "vif", "cc") if not wanted or m in wanted]
    sod_keys = [m for m in ("s_alpha", "f_beta", "e_xi", "mae") if not wanted or m in wanted]
    unknown = sorted(set(wanted) - set(metrics.FUSION_METRICS) - set(metrics.SOD_METRICS))
    if unknown:
        raise ConfigError(f"unknown metrics {unknown}")
    do_fusion = args.fused_dir is not None and fusion_keys
    do_sod = args.pred_dir is not None and sod_keys
    if not (do_fusion or do_sod):
        raise ConfigError("nothing to evaluate: give --fused-dir/--ir-dir/--vis-dir and/or --pred-dir/--gt-dir")

    per_sample: dict[str, dict] = {}
    fusion_rows, sod_rows, flags = [], [], []
    if do_fusion:
        if not (args.ir_dir and args.vis_dir):
            raise ConfigError("fusion metrics need --ir-dir and --vis-dir")
        names = _match({"fused": args.fused_dir, "ir": args.ir_dir, "vis": args.vis_dir})
        fused_idx, ir_idx, vis_idx = _index(args.fused_dir), _index(args.ir_dir), _index(args.vis_dir)
        for name in names:
            ir = read_image(ir_idx[name], "L")[..., 0].astype(np.float64)
            row = metrics.fusion_scores(ir, _luma(vis_idx[name]), _luma(fused_idx[name]), flags, keys=fusion_keys)
            fusion_rows.append(row)
            per_sample.setdefault(name, {}).update(row)
    if do_sod:
        if not args.gt_dir:
            raise ConfigError("SOD metrics need --gt-dir")
        names = _match({"pred": args.pred_dir, "gt": args.gt_dir})
        pred_idx, gt_idx = _index(args.pred_dir), _index(args.gt_dir)
        for name in names:
            pred = read_image(pred_idx[name], "L")[..., 0].astype(np.float64)
            gt = read_image(gt_idx[name], "L")[..., 0].astype(np.float64)
            if gt.shape != pred.shape:
                raise DatasetError(f"{name}: prediction {pred.shape} and mask {gt.shape} differ in size")
            row = metrics.sod_scores(pred, gt, flags, keys=sod_keys)
            sod_rows.append(row)
            per_sample.setdefault(name, {}).update(row)

    report = metrics.aggregate_report(fusion_rows, sod_rows, args.name, flags)
    agg = report.to_dict()
    agg["fusion"] = {k: v for k, v in agg["fusion"].items() if k in fusion_keys and do_fusion}
    agg["sod"] = {k: v for k, v in agg["sod"].items() if k in sod_keys and do_sod}
    result = {"aggregate": agg, "per_sample": per_sample, "metric_config": metrics.METRIC_CONFIG}
    text = json.dumps(result, indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n")
    else:
        print(text)
    return EXIT_OK


# ---------------------------------------------------------------------------
# synth


def cmd_synth(args) -> int:
    cfg = SynthConfig(n_samples=args.n, size=args.size, seed=args.seed)
    m = generate_synthetic(cfg, args.out, args.split)
    print(f"wrote {len(m)} synthetic pairs to {Path(args.out) / args.split}")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="irfs", description="Infrared/visible fusion and RGB-T salient object detection.")
    parser.add_argument("-v", "--verbose", action="store_true", help="Log progress at INFO level.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="Interactive loop training (or the one-stage baseline).")
    p.add_argument("--config", help="YAML run config; flags below override it.")
    p.add_argument("--synth", type=int, default=None, metavar="N", help="Train on N generated pairs instead of a dataset.")
    p.add_argument("--train-dir", default=None, help="Dataset root with RGB/T/GT subfolders (or a train/ split).")
    p.add_argument("--test-dir", default=None, help="Evaluation dataset root.")
    p.add_argument("--m", type=int, default=None, help="Number of interactive loops.")
    p.add_argument("--n-f", type=int, default=None, help="Fusion epochs per loop.")
    p.add_argument("--n-s", type=int, default=None, help="SOD epochs per loop.")
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--crop", type=int, default=None, help="Square training resolution.")
    p.add_argument("--lr-sod", type=float, default=None, help="Initial SOD learning rate of each loop.")
    p.add_argument("--lr-sod-floor", type=float, default=None, help="Cosine floor of the SOD learning rate.")
    p.add_argument("--one-stage", action="store_true", help="Joint one-stage baseline instead of the interactive loop.")
    p.add_argument("--no-c2ftl", action="store_true", help="Disable cross-modal attention in every FGSE block.")
    p.add_argument("--no-lfs", action="store_true", help="Disable the learnable feature selector.")
    p.add_argument("--guidance", choices=["fused", "average"], default=None, help="Third encoder input: fused image or source average.")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=None, help="Run directory.")
    p.add_argument("--resume", action="store_true", help="Continue from the last completed loop in --out.")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("fuse", help="Fuse every visible/infrared pair in a directory.")
    p.add_argument("--checkpoint", required=True, help="fusion.ckpt")
    p.add_argument("--input", required=True, help="Directory with RGB/ and T/ subfolders.")
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("detect", help="Predict saliency maps for every pair in a directory.")
    p.add_argument("--fusion-checkpoint", required=True)
    p.add_argument("--sod-checkpoint", required=True)
    p.add_argument("--input", required=True, help="Directory with RGB/ and T/ subfolders.")
    p.add_argument("--output", required=True)
    p.add_argument("--size", type=int, default=96, help="Working resolution; maps are resized back to the input size.")
    p.add_argument("--dump-all", action="store_true", help="Also write the five coarse/precise maps.")
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("evaluate", help="Score fused images and/or saliency maps; prints a JSON report.")
    p.add_argument("--fused-dir")
    p.add_argument("--ir-dir")
    p.add_argument("--vis-dir")
    p.add_argument("--pred-dir")
    p.add_argument("--gt-dir")
    p.add_argument("--metrics", nargs="+", default=None, help="Subset of mi vif cc s_alpha f_beta e_xi mae.")
    p.add_argument("--name", default="eval", help="Dataset label stored in the report.")
    p.add_argument("--out", default=None, help="Write the report here instead of stdout.")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("synth", help="Generate a synthetic paired dataset.")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=16)
    p.add_argument("--size", type=int, default=96)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--split", choices=["train", "test"], default="train")
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, DatasetError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    except TokenOverflowError as e:
        print(f"error: {e}; lower --crop or raise sod.max_tokens", file=sys.stderr)
        return EXIT_DATA
    except ckpt.CheckpointError as e:
        print(f"checkpoint error: {e}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except NumericalAbort as e:
        print(f"numerical abort: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except TrainingInterrupted as e:
        print(str(e), file=sys.stderr)
        return EXIT_INTERRUPTED


if __name__ == "__main__":
    sys.exit(main())
