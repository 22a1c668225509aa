"""Feature-screening fusion network (FSFNet).

Visible Y channel and infrared each pass a two-conv coarse extractor, are
screened by dual (spatial + channel) attention, summed, and decoded by a
stack of residual blocks into the fused Y channel.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .types import (
    FusedImage,
    MultimodalSample,
    ShapeMismatchError,
    check_unit_range,
    to_chw,
    to_hwc,
    validate_sample,
)

# ITU-R BT.601 full range (JFIF); rows give Y, Cb, Cr without the 0.5 chroma offset.
_RGB2YCC = torch.tensor(
    [
        [0.299, 0.587, 0.114],
        [-0.168735891647856, -0.331264108352144, 0.5],
        [0.5, -0.418687589158345, -0.081312410841655],
    ],
    dtype=torch.float64,
)
_YCC2RGB = torch.linalg.inv(_RGB2YCC)
_OFFSET = torch.tensor([0.0, 0.5, 0.5], dtype=torch.float64)


def rgb_to_ycbcr(x: torch.Tensor) -> torch.Tensor:
    """N x 3 x H x W RGB -> N x 3 x H x W YCbCr (differentiable)."""
    m = _RGB2YCC.to(x)
    return torch.einsum("ij,njhw->nihw", m, x) + _OFFSET.to(x).view(1, 3, 1, 1)


def ycbcr_to_rgb(x: torch.Tensor) -> torch.Tensor:
    m = _YCC2RGB.to(x)
    return torch.einsum("ij,njhw->nihw", m, x - _OFFSET.to(x).view(1, 3, 1, 1))


def to_ycbcr(visible: np.ndarray):
    """H x W x 3 RGB in [0, 1] -> (y, cb, cr), each H x W x 1."""
    check_unit_range("visible", visible)
    out = to_hwc(rgb_to_ycbcr(to_chw(np.asarray(visible, dtype=np.float64))))
    return out[..., 0:1], out[..., 1:2], out[..., 2:3]


def to_rgb(y: np.ndarray, cb: np.ndarray, cr: np.ndarray) -> np.ndarray:
    """Inverse of :func:`to_ycbcr`; no clamping."""
    h, w = np.shape(y)[:2]
    ycc = np.concatenate([np.asarray(a, dtype=np.float64).reshape(h, w, 1) for a in (y, cb, cr)], axis=2)
    return to_hwc(ycbcr_to_rgb(to_chw(ycc)))


@dataclass(frozen=True)
class FusionNetConfig:
    base_channels: int = 16
    n_res_blocks: int = 4
    sa_kernel: int = 7
    ca_reduction: int = 4
    shared_branches: bool = False
    negative_slope: float = 0.2

    def __post_init__(self):
        if self.base_channels < 4:
            raise ValueError("base_channels must be >= 4")
        if self.n_res_blocks < 1:
            raise ValueError("n_res_blocks must be >= 1")
        if self.sa_kernel < 1 or self.sa_kernel % 2 == 0:
            raise ValueError("sa_kernel must be an odd positive integer")
        if self.ca_reduction < 1 or self.base_channels // self.ca_reduction < 1:
            raise ValueError("ca_reduction must be in [1, base_channels]")


@dataclass(frozen=True)
class CoarseFeatures:
    f_r: torch.Tensor
    f_t: torch.Tensor

    def __post_init__(self):
        if self.f_r.shape != self.f_t.shape:
            raise ShapeMismatchError("f_t", self.f_r.shape, self.f_t.shape)


@dataclass(frozen=True)
class PreciseFeatures:
    p_r: torch.Tensor
    p_t: torch.Tensor
    fused: torch.Tensor

    def __post_init__(self):
        if not torch.equal(self.fused, self.p_r + self.p_t):
            raise ValueError("PreciseFeatures.fused must equal p_r + p_t")


class CoarseExtractor(nn.Module):
    """conv3x3 -> LeakyReLU -> conv3x3, stride 1, size preserving."""

    def __init__(self, out_channels: int, negative_slope: float = 0.2):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(1, out_channels, 3, padding=1),
            nn.LeakyReLU(negative_slope),
            nn.Conv2d(out_channels, out_channels, 3, padding=1),
        )

    def forward(self, x):
        return self.body(x)


class SpatialAttention(nn.Module):
    def __init__(self, kernel_size: int = 7):
        super().__init__()
        self.conv = nn.Conv2d(2, 1, kernel_size, padding=kernel_size // 2)

    def gate(self, x):
        avg = x.mean(dim=1, keepdim=True)
        mx = x.amax(dim=1, keepdim=True)
        return torch.sigmoid(self.conv(torch.cat([avg, mx], dim=1)))

    def forward(self, x):
        return x * self.gate(x)


class ChannelAttention(nn.Module):
    def __init__(self, channels: int, reduction: int = 4):
        super().__init__()
        hidden = max(1, channels // reduction)
        self.mlp = nn.Sequential(nn.Conv2d(channels, hidden, 1), nn.ReLU(), nn.Conv2d(hidden, channels, 1))

    def gate(self, x):
        avg = self.mlp(x.mean(dim=(2, 3), keepdim=True))
        mx = self.mlp(x.amax(dim=(2, 3), keepdim=True))
        return torch.sigmoid(avg + mx)

    def forward(self, x):
        return x * self.gate(x)


class DAFS(nn.Module):
    """Dual attention feature screening: 1x1 conv over [SA(x), CA(x)]."""

    def __init__(self, channels: int, sa_kernel: int = 7, ca_reduction: int = 4):
        super().__init__()
        self.channels = channels
        self.sa = SpatialAttention(sa_kernel)
        self.ca = ChannelAttention(channels, ca_reduction)
        self.merge = nn.Conv2d(2 * channels, channels, 1)

    def forward(self, x):
        if x.shape[1] != self.channels:
            raise ShapeMismatchError("coarse", (self.channels, "H", "W"), tuple(x.shape[1:]))
        return self.merge(torch.cat([self.sa(x), self.ca(x)], dim=1))


class ResidualBlock(nn.Module):
    def __init__(self, channels: int, negative_slope: float = 0.2):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(channels, channels, 3, padding=1),
            nn.LeakyReLU(negative_slope),
            nn.Conv2d(channels, channels, 3, padding=1),
        )

    def forward(self, x):
        return x + self.body(x)


class Reconstructor(nn.Module):
    """Residual blocks, 1-channel projection, then (tanh + 1) / 2 clamped to [0, 1]."""

    def __init__(self, channels: int, n_blocks: int, negative_slope: float = 0.2):
        super().__init__()
        self.channels = channels
        self.blocks = nn.Sequential(*[ResidualBlock(channels, negative_slope) for _ in range(n_blocks)])
        self.project = nn.Conv2d(channels, 1, 3, padding=1)

    def forward(self, x):
        if x.shape[1] != self.channels:
            raise ShapeMismatchError("fused", (self.channels, "H", "W"), tuple(x.shape[1:]))
        y = 0.5 * (torch.tanh(self.project(self.blocks(x))) + 1.0)
        return y.clamp(0.0, 1.0)


def fuse_features(p_r: torch.Tensor, p_t: torch.Tensor) -> torch.Tensor:
    if p_r.shape != p_t.shape:
        raise ShapeMismatchError("p_t", p_r.shape, p_t.shape)
    return p_r + p_t


class FSFNet(nn.Module):
    def __init__(self, cfg: FusionNetConfig | None = None):
        super().__init__()
        cfg = cfg or FusionNetConfig()
        self.cfg = cfg
        c = cfg.base_channels
        self.coarse_r = CoarseExtractor(c, cfg.negative_slope)
        self.dafs_r = DAFS(c, cfg.sa_kernel, cfg.ca_reduction)
        if cfg.shared_branches:
            self.coarse_t, self.dafs_t = self.coarse_r, self.dafs_r
        else:
            self.coarse_t = CoarseExtractor(c, cfg.negative_slope)
            self.dafs_t = DAFS(c, cfg.sa_kernel, cfg.ca_reduction)
        self.reconstruct = Reconstructor(c, cfg.n_res_blocks, cfg.negative_slope)

    def extract_coarse(self, y_vis, ir) -> CoarseFeatures:
        if y_vis.shape != ir.shape:
            raise ShapeMismatchError("ir", y_vis.shape, ir.shape)
        return CoarseFeatures(self.coarse_r(y_vis), self.coarse_t(ir))

    def screen(self, coarse: CoarseFeatures) -> PreciseFeatures:
        p_r, p_t = self.dafs_r(coarse.f_r), self.dafs_t(coarse.f_t)
        return PreciseFeatures(p_r, p_t, fuse_features(p_r, p_t))

    def forward(self, y_vis: torch.Tensor, ir: torch.Tensor) -> torch.Tensor:
        """N x 1 x H x W visible Y and infrared -> N x 1 x H x W fused Y."""
        coarse = self.extract_coarse(y_vis, ir)
        p_r, p_t = self.dafs_r(coarse.f_r), self.dafs_t(coarse.f_t)
        return self.reconstruct(fuse_features(p_r, p_t))

    def fuse_rgb(self, visible: torch.Tensor, ir: torch.Tensor):
        """N x 3 RGB visible + N x 1 infrared -> (fused Y, fused RGB), both in [0, 1]."""
        ycc = rgb_to_ycbcr(visible)
        y_f = self(ycc[:, :1], ir)
        rgb = ycbcr_to_rgb(torch.cat([y_f, ycc[:, 1:]], dim=1)).clamp(0.0, 1.0)
        return y_f, rgb


def fuse_pair(sample: MultimodalSample, net: FSFNet) -> FusedImage:
    """Run a trained or freshly built FSFNet on one validated sample."""
    validate_sample(sample)
    param = next(net.parameters())
    vis = to_chw(sample.visible).to(param)
    ir = to_chw(sample.infrared).to(param)
    with torch.no_grad():
        y_f, rgb = net.fuse_rgb(vis, ir)
    return FusedImage(y_channel=to_hwc(y_f).astype(np.float64), rgb=to_hwc(rgb).astype(np.float64), provenance=sample.id)


def config_dict(cfg) -> dict:
    return dataclasses.asdict(cfg)
