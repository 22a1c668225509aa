"""Shared value types and shape contracts.

Arrays cross the I/O boundary channel-last (H x W x C) and are converted to
channel-first tensors (N x C x H x W) exactly once, in :func:`to_chw`.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Mapping, Optional

import numpy as np


class ShapeMismatchError(ValueError):
    """Raised when arrays that must share a shape do not."""

    def __init__(self, name: str, expected, got):
        self.field = name
        super().__init__(f"shape mismatch in '{name}': expected {tuple(expected)}, got {tuple(got)}")


class RangeError(ValueError):
    """Raised when pixel values leave their allowed range."""

    def __init__(self, name: str, message: str):
        self.field = name
        super().__init__(f"range error in '{name}': {message}")


def check_same_shape(**arrays) -> tuple:
    """Raise ShapeMismatchError unless all keyword arrays share one shape."""
    items = list(arrays.items())
    ref_name, ref = items[0]
    for name, arr in items[1:]:
        if tuple(arr.shape) != tuple(ref.shape):
            raise ShapeMismatchError(name, ref.shape, arr.shape)
    return tuple(ref.shape)


def check_unit_range(name: str, arr) -> None:
    a = np.asarray(arr)
    if a.size and (not np.all(np.isfinite(a)) or a.min() < 0.0 or a.max() > 1.0):
        raise RangeError(name, f"values must lie in [0, 1] (min={a.min():.4g}, max={a.max():.4g})")


def to_chw(image: np.ndarray):
    """H x W x C array -> 1 x C x H x W float tensor (the single layout conversion)."""
    import torch

    arr = np.asarray(image)
    if arr.ndim == 2:
        arr = arr[..., None]
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(2, 0, 1)))[None]


def to_hwc(tensor) -> np.ndarray:
    """Inverse of :func:`to_chw` for a single image (C x H x W or 1 x C x H x W)."""
    t = tensor.detach().cpu()
    if t.dim() == 4:
        assert t.shape[0] == 1, "to_hwc expects a single image"
        t = t[0]
    return t.numpy().transpose(1, 2, 0)


@dataclass(frozen=True)
class MultimodalSample:
    """Registered visible/infrared pair with optional binary saliency mask."""

    visible: np.ndarray
    infrared: np.ndarray
    mask: Optional[np.ndarray] = None
    id: str = ""

    def __post_init__(self):
        vis = np.asarray(self.visible, dtype=np.float64)
        if vis.ndim == 2:
            vis = vis[..., None]
        if vis.ndim == 3 and vis.shape[2] == 1:
            vis = np.repeat(vis, 3, axis=2)
        ir = np.asarray(self.infrared, dtype=np.float64)
        if ir.ndim == 2:
            ir = ir[..., None]
        object.__setattr__(self, "visible", vis)
        object.__setattr__(self, "infrared", ir)
        if self.mask is not None:
            m = np.asarray(self.mask)
            if m.ndim == 3 and m.shape[2] == 1:
                m = m[..., 0]
            object.__setattr__(self, "mask", m)

    @property
    def shape(self) -> tuple[int, int]:
        return self.visible.shape[:2]


def validate_sample(sample: MultimodalSample) -> MultimodalSample:
    """Check every invariant of a sample and return it unchanged.

    Raises ShapeMismatchError naming the offending field, or RangeError for
    pixels outside [0, 1] and non-binary masks.
    """
    vis, ir = sample.visible, sample.infrared
    if vis.ndim != 3 or vis.shape[2] != 3:
        raise ShapeMismatchError("visible", ("H", "W", 3), vis.shape)
    if ir.ndim != 3 or ir.shape[2] != 1:
        raise ShapeMismatchError("infrared", ("H", "W", 1), ir.shape)
    h, w = vis.shape[:2]
    if ir.shape[:2] != (h, w):
        raise ShapeMismatchError("infrared", (h, w, 1), ir.shape)
    if sample.mask is not None:
        if sample.mask.shape != (h, w):
            raise ShapeMismatchError("mask", (h, w), sample.mask.shape)
        if not np.all((sample.mask == 0) | (sample.mask == 1)):
            raise RangeError("mask", "mask values must be 0 or 1")
    check_unit_range("visible", vis)
    check_unit_range("infrared", ir)
    return sample


@dataclass(frozen=True)
class FusedImage:
    y_channel: np.ndarray  # H x W x 1
    rgb: np.ndarray  # H x W x 3
    provenance: str = ""


@dataclass(frozen=True)
class FeaturePyramid:
    """Per-modality multi-scale features, stages keyed 1..5 (tensors C x H x W, batched)."""

    stages: Mapping[int, object]
    modality: str

    def __post_init__(self):
        if self.modality not in ("visible", "infrared", "fused"):
            raise ValueError(f"unknown modality {self.modality!r}")
        sizes = [tuple(self.stages[i].shape[-2:]) for i in sorted(self.stages)]
        for a, b in zip(sizes, sizes[1:]):
            if b[0] > a[0] or b[1] > a[1]:
                raise ShapeMismatchError(f"{self.modality}.stages", a, b)

    def __getitem__(self, i: int):
        return self.stages[i]

    def channels(self) -> list[int]:
        return [int(self.stages[i].shape[-3]) for i in sorted(self.stages)]


COARSE_KEYS = ("visible", "infrared", "fused")
PRECISE_KEYS = ("visible", "infrared")


@dataclass(frozen=True)
class SaliencyOutputs:
    """Probability maps (N x 1 x H x W tensors) emitted by the group decoder.

    ``coarse`` holds M_r^c, M_t^c, M_u^c keyed visible/infrared/fused;
    ``precise`` holds M_r^p and M_t^p; ``final`` is the aggregated map.
    """

    coarse: Mapping[str, object]
    precise: Mapping[str, object]
    final: object

    def all_maps(self) -> dict:
        maps = {f"coarse_{k}": v for k, v in self.coarse.items()}
        maps.update({f"precise_{k}": v for k, v in self.precise.items()})
        maps["final"] = self.final
        return maps


@dataclass(frozen=True)
class LoopSchedule:
    m: int = 10
    n_f: int = 3
    n_s: int = 10
    lr_fusion: float = 1e-3
    lr_sod_init: float = 5e-5
    lr_sod_floor: float = 1e-6
    tau: float = 1.0
    eta_start: float = 1.0
    eta_end: float = 10.0
    batch_size: int = 8
    crop: int = 352

    def __post_init__(self):
        for name in ("m", "n_f", "n_s", "batch_size", "crop"):
            v = getattr(self, name)
            if not isinstance(v, int) or v <= 0:
                raise ValueError(f"LoopSchedule.{name} must be a positive integer, got {v!r}")
        for name in ("lr_fusion", "lr_sod_init", "lr_sod_floor", "tau", "eta_start", "eta_end"):
            if not getattr(self, name) > 0:
                raise ValueError(f"LoopSchedule.{name} must be positive")
        if self.eta_end < self.eta_start:
            raise ValueError("eta must be non-decreasing: eta_end < eta_start")
        if self.lr_sod_floor > self.lr_sod_init:
            raise ValueError("lr_sod_floor exceeds lr_sod_init")

    def eta(self, loop: int) -> float:
        """Linear ramp eta_start -> eta_end over loops 0..m-1."""
        if not 0 <= loop < self.m:
            raise IndexError(f"loop {loop} outside [0, {self.m})")
        if self.m == 1:
            return float(self.eta_start)
        return float(self.eta_start + (self.eta_end - self.eta_start) * loop / (self.m - 1))

    def sod_lr(self, epoch: int) -> float:
        """Cosine-annealed SOD learning rate for epoch 0..n_s-1 of a loop."""
        if self.n_s == 1:
            return float(self.lr_sod_init)
        t = epoch / (self.n_s - 1)
        return float(self.lr_sod_floor + 0.5 * (self.lr_sod_init - self.lr_sod_floor) * (1 + np.cos(np.pi * t)))

    def replace(self, **changes) -> "LoopSchedule":
        return dataclasses.replace(self, **changes)


@dataclass
class MetricReport:
    fusion: dict = field(default_factory=lambda: {"mi": float("nan"), "vif": float("nan"), "cc": float("nan")})
    sod: dict = field(
        default_factory=lambda: {"s_alpha": float("nan"), "f_beta": float("nan"), "e_xi": float("nan"), "mae": float("nan")}
    )
    dataset: str = ""
    n_samples: int = 0
    flags: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricReport":
        return cls(**d)
