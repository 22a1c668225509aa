"""Interactive loop training of the fusion and SOD subnetworks.

Each of the ``m`` loops runs ``n_f`` fusion epochs (SOD net frozen, joint
loss) followed by ``n_s`` SOD epochs (fusion net frozen, fused image
detached). Loop boundaries are the only checkpoint and resume points.

Run directory layout::

    {run}/manifest.json                 schedule, seeds, config hashes
    {run}/loop{k}/fusion.ckpt
    {run}/loop{k}/sod.ckpt
    {run}/loop{k}/metrics.json
    {run}/loop{k}/trace.json
    {run}/metrics.json                  every per-loop report
    {run}/loss_trace.csv
"""
from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import signal
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from . import checkpoint as ckpt
from .data import Batch, DatasetManifest, make_batch
from .fusion import FSFNet, FusionNetConfig, rgb_to_ycbcr
from .losses import fusion_loss, overall_loss, sod_loss
from .metrics import aggregate_report, fusion_scores, sod_scores
from .sod import FGC2Net, SodNetConfig
from .types import LoopSchedule, MetricReport

log = logging.getLogger(__name__)

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


class NumericalAbort(RuntimeError):
    pass


class TrainingInterrupted(RuntimeError):
    def __init__(self, loop: int):
        self.loop = loop
        super().__init__(f"training stopped after loop {loop}; resume from the run directory")


@dataclass(frozen=True)
class LossConfig:
    lam: float = 0.5
    gamma: float = 20.0
    sod_reduction: str = "sum"
    pool: int = 15


@dataclass
class LoopState:
    loop_index: int
    phase: str
    eta_current: float
    fusion_epochs_done: int = 0
    sod_epochs_done: int = 0
    rng_seed: int = 0


@dataclass
class TrainResult:
    fusion_net: FSFNet
    sod_net: FGC2Net
    reports: list
    trace: list = field(default_factory=list)


def derive_seed(seed: int, *keys: int) -> int:
    return int(np.random.SeedSequence([seed, *keys]).generate_state(1)[0])


PHASE_CODES = {"fusion": 0, "sod": 1, "joint": 2}


def build_networks(fusion_cfg: FusionNetConfig, sod_cfg: SodNetConfig, seed: int, backbone_weights: str | None = None):
    torch.manual_seed(seed)
    fusion = FSFNet(fusion_cfg)
    sod = FGC2Net(sod_cfg, backbone_weights)
    return fusion, sod


def _set_trainable(net: torch.nn.Module, flag: bool) -> None:
    net.train(flag)
    for p in net.parameters():
        p.requires_grad_(flag)


class Trainer:
    def __init__(
        self,
        fusion_net: FSFNet,
        sod_net: FGC2Net,
        train: DatasetManifest,
        test: Optional[DatasetManifest],
        schedule: LoopSchedule,
        seed: int = 0,
        loss_cfg: LossConfig = LossConfig(),
        run_dir=None,
    ):
        if len(train) == 0:
            raise ValueError("empty training set")
        self.fusion = fusion_net
        self.sod = sod_net
        self.train_set = train
        self.test_set = test
        self.schedule = schedule
        self.seed = seed
        self.loss_cfg = loss_cfg
        self.run_dir = Path(run_dir) if run_dir is not None else None
        self.opt_fusion = torch.optim.Adam(self.fusion.parameters(), lr=schedule.lr_fusion, betas=ADAM_BETAS, eps=ADAM_EPS)
        self.opt_sod = torch.optim.Adam(self.sod.parameters(), lr=schedule.lr_sod_init, betas=ADAM_BETAS, eps=ADAM_EPS)
        self.trace: list[dict] = []
        self.reports: list[MetricReport] = []
        self.start_loop = 0
        self._stop = False

    # -- data -------------------------------------------------------------

    def batches(self, phase: str, loop: int, epoch: int):
        """Deterministic shuffled batches for (phase, loop, epoch)."""
        rng = np.random.default_rng(derive_seed(self.seed, PHASE_CODES[phase], loop, epoch))
        order = rng.permutation(len(self.train_set))
        bs = self.schedule.batch_size
        for start in range(0, len(order), bs):
            yield make_batch(self.train_set, order[start : start + bs], train=True, crop=self.schedule.crop, rng=rng)

    # -- forward paths ------------------------------------------------------

    def _joint_forward(self, batch: Batch, eta: float):
        vis, ir, gt = batch.tensors()
        y_vis = rgb_to_ycbcr(vis)[:, :1]
        y_f, rgb_f = self.fusion.fuse_rgb(vis, ir)
        out = self.sod(vis, rgb_f, ir)
        lf = fusion_loss(ir, y_vis, y_f, self.loss_cfg.lam, self.loss_cfg.gamma)
        ls = sod_loss(out, gt, self.loss_cfg.sod_reduction, self.loss_cfg.pool)
        return overall_loss(lf, ls, self.schedule.tau, eta), lf, ls

    def _sod_forward(self, batch: Batch):
        vis, ir, gt = batch.tensors()
        _, rgb_f = self.fusion.fuse_rgb(vis, ir)
        out = self.sod(vis, rgb_f.detach(), ir)  # gradient stops at the fusion output
        return sod_loss(out, gt, self.loss_cfg.sod_reduction, self.loss_cfg.pool)

    def probe_truncation(self, batch: Batch) -> float:
        """Max |dL_sod/d theta_fusion| along the SOD-phase path (expected 0)."""
        params = list(self.fusion.parameters())
        flags = [p.requires_grad for p in params]
        for p in params:
            p.requires_grad_(True)
        try:
            ls = self._sod_forward(batch)
            grads = torch.autograd.grad(ls.total, params, allow_unused=True)
        finally:
            for p, f in zip(params, flags):
                p.requires_grad_(f)
        return max((g.abs().max().item() for g in grads if g is not None), default=0.0)

    def _check_finite(self, loss, state: LoopState, step: int, terms: dict):
        if torch.isfinite(loss):
            return
        snapshot = {"loop": state.loop_index, "phase": state.phase, "step": step, **{k: float(torch.as_tensor(v).detach()) for k, v in terms.items()}}
        if self.run_dir is not None:
            self.run_dir.mkdir(parents=True, exist_ok=True)
            (self.run_dir / "abort.json").write_text(json.dumps(snapshot, indent=2))
        raise NumericalAbort(f"non-finite loss: {snapshot}")

    # -- phases -------------------------------------------------------------

    def run_fusion_phase(self, state: LoopState) -> list[dict]:
        _set_trainable(self.sod, False)
        _set_trainable(self.fusion, True)
        frozen = ckpt.weights_checksum(self.sod)
        rows = []
        for epoch in range(self.schedule.n_f):
            sums = {"loss": 0.0, "fusion": 0.0, "sod": 0.0}
            n = 0
            for step, batch in enumerate(self.batches("fusion", state.loop_index, epoch)):
                loss, lf, ls = self._joint_forward(batch, state.eta_current)
                self._check_finite(loss, state, step, {"fusion": lf.total, "sod": ls.total})
                self.opt_fusion.zero_grad(set_to_none=True)
                loss.backward()
                self.opt_fusion.step()
                k = len(batch)
                sums["loss"] += loss.item() * k
                sums["fusion"] += lf.total.item() * k
                sums["sod"] += ls.total.item() * k
                n += k
            state.fusion_epochs_done += 1
            rows.append(self._row(state, "fusion", epoch, self.schedule.lr_fusion, {k: v / n for k, v in sums.items()}))
        if ckpt.weights_checksum(self.sod) != frozen:
            raise RuntimeError("SOD weights changed during a fusion phase")
        return rows

    def run_sod_phase(self, state: LoopState) -> list[dict]:
        _set_trainable(self.fusion, False)
        _set_trainable(self.sod, True)
        frozen = ckpt.weights_checksum(self.fusion)
        rows = []
        for epoch in range(self.schedule.n_s):
            lr = self.schedule.sod_lr(epoch)
            for group in self.opt_sod.param_groups:
                group["lr"] = lr
            sums = {"loss": 0.0, "sod": 0.0}
            n = 0
            probe = None
            for step, batch in enumerate(self.batches("sod", state.loop_index, epoch)):
                if probe is None and epoch == 0:
                    probe = self.probe_truncation(batch)
                ls = self._sod_forward(batch)
                self._check_finite(ls.total, state, step, {"sod": ls.total})
                self.opt_sod.zero_grad(set_to_none=True)
                ls.total.backward()
                self.opt_sod.step()
                k = len(batch)
                sums["loss"] += ls.total.item() * k
                sums["sod"] += ls.total.item() * k
                n += k
            state.sod_epochs_done += 1
            row = self._row(state, "sod", epoch, lr, {k: v / n for k, v in sums.items()})
            if probe is not None:
                row["truncation_probe"] = probe
            rows.append(row)
        if ckpt.weights_checksum(self.fusion) != frozen:
            raise RuntimeError("fusion weights changed during a SOD phase")
        return rows

    def _row(self, state: LoopState, phase: str, epoch: int, lr: float, means: dict) -> dict:
        return {
            "loop": state.loop_index,
            "phase": phase,
            "epoch": epoch,
            "eta": state.eta_current,
            "lr": lr,
            "loss": means["loss"],
            "fusion": means.get("fusion", float("nan")),
            "sod": means["sod"],
        }

    # -- evaluation ---------------------------------------------------------

    @torch.no_grad()
    def evaluate(self, manifest: DatasetManifest | None = None) -> MetricReport:
        manifest = manifest or self.test_set
        if manifest is None:
            return MetricReport(dataset="none")
        return evaluate_networks(self.fusion, self.sod, manifest, self.schedule.crop, self.schedule.batch_size)

    # -- loops --------------------------------------------------------------

    def _install_signal_handlers(self):
        if threading.current_thread() is not threading.main_thread():
            return {}

        def handler(signum, frame):
            log.warning("signal %s received; stopping at the next loop boundary", signum)
            self._stop = True

        previous = {}
        for sig in (signal.SIGINT, signal.SIGTERM):
            previous[sig] = signal.signal(sig, handler)
        return previous

    def run(self, stop_after_loop: int | None = None) -> TrainResult:
        """Run loops ``start_loop .. m-1``; ``stop_after_loop`` simulates an abort."""
        previous = self._install_signal_handlers()
        try:
            if self.run_dir is not None:
                self._write_manifest()
            for k in range(self.start_loop, self.schedule.m):
                state = LoopState(k, "fusion", self.schedule.eta(k), rng_seed=derive_seed(self.seed, k))
                rows = self.run_fusion_phase(state)
                state.phase = "sod"
                rows += self.run_sod_phase(state)
                self.trace.extend(rows)
                report = self.evaluate()
                report.dataset = f"{report.dataset}@loop{k}"
                self.reports.append(report)
                log.info("loop %d: %s %s", k, report.fusion, report.sod)
                if self.run_dir is not None:
                    self.save_loop(k, rows, report)
                if self._stop or (stop_after_loop is not None and k == stop_after_loop and k < self.schedule.m - 1):
                    raise TrainingInterrupted(k)
        finally:
            for sig, h in previous.items():
                signal.signal(sig, h)
        return TrainResult(self.fusion, self.sod, list(self.reports), list(self.trace))

    # -- persistence ----------------------------------------------------------

    def _write_manifest(self):
        self.run_dir.mkdir(parents=True, exist_ok=True)
        manifest = {
            "schedule": dataclasses.asdict(self.schedule),
            "seed": self.seed,
            "loss": dataclasses.asdict(self.loss_cfg),
            "fusion_config": dataclasses.asdict(self.fusion.cfg),
            "sod_config": dataclasses.asdict(self.sod.cfg),
            "config_hashes": {"fusion": ckpt.config_hash(self.fusion.cfg), "sod": ckpt.config_hash(self.sod.cfg)},
            "train_set": {"root": self.train_set.root, "n": len(self.train_set)},
            "test_set": None if self.test_set is None else {"root": self.test_set.root, "n": len(self.test_set)},
        }
        (self.run_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, default=list))

    def save_loop(self, k: int, rows: list[dict], report: MetricReport):
        d = self.run_dir / f"loop{k}"
        ckpt.save_checkpoint(d / "fusion.ckpt", "fusion", self.fusion.cfg, self.fusion, self.opt_fusion, {"loop": k})
        ckpt.save_checkpoint(d / "sod.ckpt", "sod", self.sod.cfg, self.sod, self.opt_sod, {"loop": k})
        (d / "trace.json").write_text(json.dumps(rows, indent=2))
        (d / "metrics.json").write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True))
        (d / "DONE").write_text("ok\n")
        write_run_outputs(self.run_dir, self.reports, self.trace)

    def resume(self) -> int:
        """Restore the last completed loop from ``run_dir``; returns the next loop index."""
        if self.run_dir is None:
            raise ValueError("resume needs a run directory")
        done = sorted(int(p.name[4:]) for p in self.run_dir.glob("loop*") if (p / "DONE").is_file())
        if not done:
            return 0
        last = done[-1]
        if done != list(range(last + 1)):
            raise ckpt.CheckpointError(f"incomplete loop sequence in {self.run_dir}: {done}")
        d = self.run_dir / f"loop{last}"
        ckpt.load_into(d / "fusion.ckpt", "fusion", self.fusion, self.fusion.cfg, self.opt_fusion)
        ckpt.load_into(d / "sod.ckpt", "sod", self.sod, self.sod.cfg, self.opt_sod)
        self.trace, self.reports = [], []
        for k in range(last + 1):
            self.trace.extend(json.loads((self.run_dir / f"loop{k}" / "trace.json").read_text()))
            self.reports.append(MetricReport.from_dict(json.loads((self.run_dir / f"loop{k}" / "metrics.json").read_text())))
        self.start_loop = last + 1
        return self.start_loop


def write_run_outputs(run_dir: Path, reports: list, trace: list) -> None:
    run_dir = Path(run_dir)
    (run_dir / "metrics.json").write_text(json.dumps([r.to_dict() for r in reports], indent=2, sort_keys=True))
    if trace:
        keys = ["loop", "phase", "epoch", "eta", "lr", "loss", "fusion", "sod", "truncation_probe"]
        with open(run_dir / "loss_trace.csv", "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=keys, restval="")
            w.writeheader()
            for row in trace:
                w.writerow({k: row.get(k, "") for k in keys})


@torch.no_grad()
def evaluate_networks(fusion: FSFNet, sod: FGC2Net, manifest: DatasetManifest, crop: int | None = None, batch_size: int = 8) -> MetricReport:
    """Fusion metrics of the fused Y channel against the sources, SOD metrics of the final map."""
    was = (fusion.training, sod.training)
    fusion.eval()
    sod.eval()
    fusion_rows, sod_rows, flags = [], [], []
    try:
        for start in range(0, len(manifest), batch_size):
            batch = make_batch(manifest, range(start, min(start + batch_size, len(manifest))), train=False, crop=crop)
            vis, ir, gt = batch.tensors()
            y_vis = rgb_to_ycbcr(vis)[:, :1]
            y_f, rgb_f = fusion.fuse_rgb(vis, ir)
            pred = sod(vis, rgb_f, ir).final
            for i in range(len(batch)):
                fusion_rows.append(fusion_scores(ir[i, 0].numpy(), y_vis[i, 0].numpy(), y_f[i, 0].numpy(), flags))
                if gt is not None:
                    sod_rows.append(sod_scores(pred[i, 0].numpy(), gt[i, 0].numpy(), flags))
    finally:
        fusion.train(was[0])
        sod.train(was[1])
    return aggregate_report(fusion_rows, sod_rows, Path(manifest.root).name + f"/{manifest.split}", flags)


def run_interactive_training(
    train: DatasetManifest,
    test: Optional[DatasetManifest],
    schedule: LoopSchedule = LoopSchedule(),
    fusion_cfg: FusionNetConfig = FusionNetConfig(),
    sod_cfg: SodNetConfig = SodNetConfig(),
    seed: int = 0,
    loss_cfg: LossConfig = LossConfig(),
    run_dir=None,
    resume: bool = False,
    stop_after_loop: int | None = None,
    backbone_weights: str | None = None,
) -> TrainResult:
    fusion, sod = build_networks(fusion_cfg, sod_cfg, seed, backbone_weights)
    trainer = Trainer(fusion, sod, train, test, schedule, seed, loss_cfg, run_dir)
    if resume:
        trainer.resume()
    return trainer.run(stop_after_loop=stop_after_loop)


def one_stage_baseline(
    train: DatasetManifest,
    test: Optional[DatasetManifest],
    schedule: LoopSchedule = LoopSchedule(),
    fusion_cfg: FusionNetConfig = FusionNetConfig(),
    sod_cfg: SodNetConfig = SodNetConfig(),
    seed: int = 0,
    loss_cfg: LossConfig = LossConfig(),
    run_dir=None,
    backbone_weights: str | None = None,
) -> TrainResult:
    """Joint update of both networks every step with the overall loss.

    Uses the same data, seed and total epoch budget m * (n_f + n_s) as the
    interactive schedule; eta stays at ``eta_start`` and the SOD learning
    rate anneals once over the whole run.
    """
    fusion, sod = build_networks(fusion_cfg, sod_cfg, seed, backbone_weights)
    trainer = Trainer(fusion, sod, train, test, schedule, seed, loss_cfg, run_dir)
    total = schedule.m * (schedule.n_f + schedule.n_s)
    _set_trainable(fusion, True)
    _set_trainable(sod, True)
    state = LoopState(0, "joint", schedule.eta_start, rng_seed=seed)
    for epoch in range(total):
        t = epoch / (total - 1) if total > 1 else 0.0
        lr = schedule.lr_sod_floor + 0.5 * (schedule.lr_sod_init - schedule.lr_sod_floor) * (1 + math.cos(math.pi * t))
        for group in trainer.opt_sod.param_groups:
            group["lr"] = lr
        sums = {"loss": 0.0, "fusion": 0.0, "sod": 0.0}
        n = 0
        for step, batch in enumerate(trainer.batches("joint", 0, epoch)):
            loss, lf, ls = trainer._joint_forward(batch, state.eta_current)
            trainer._check_finite(loss, state, step, {"fusion": lf.total, "sod": ls.total})
            trainer.opt_fusion.zero_grad(set_to_none=True)
            trainer.opt_sod.zero_grad(set_to_none=True)
            loss.backward()
            trainer.opt_fusion.step()
            trainer.opt_sod.step()
            k = len(batch)
            sums["loss"] += loss.item() * k
            sums["fusion"] += lf.total.item() * k
            sums["sod"] += ls.total.item() * k
            n += k
        trainer.trace.append(trainer._row(state, "joint", epoch, lr, {k: v / n for k, v in sums.items()}))
    report = trainer.evaluate()
    report.dataset = f"{report.dataset}@one-stage"
    trainer.reports.append(report)
    if trainer.run_dir is not None:
        trainer._write_manifest()
        d = trainer.run_dir / "one_stage"
        ckpt.save_checkpoint(d / "fusion.ckpt", "fusion", fusion.cfg, fusion, trainer.opt_fusion)
        ckpt.save_checkpoint(d / "sod.ckpt", "sod", sod.cfg, sod, trainer.opt_sod)
        (d / "metrics.json").write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True))
        write_run_outputs(trainer.run_dir, trainer.reports, trainer.trace)
    return TrainResult(fusion, sod, list(trainer.reports), list(trainer.trace))
