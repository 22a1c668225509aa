"""Fusion-guided cross-complementary SOD network (FGC2Net).

A single backbone is applied to the visible, fused and infrared streams.
After each backbone stage an FGSE block lets the fused stream gate the two
source streams (SEM), mixes them with cross-modal attention (C2FTL) and
re-weights them per channel (LFS). The fused stream itself is never
modified. Three decoder branches then emit the coarse, precise and final
saliency maps.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .types import FeaturePyramid, SaliencyOutputs, ShapeMismatchError

RESNET34_CHANNELS = (64, 64, 128, 256, 512)


class TokenOverflowError(ValueError):
    pass


@dataclass(frozen=True)
class SodNetConfig:
    backbone: str = "toy"
    stage_channels: tuple = (16, 32, 64, 128, 256)
    attn_heads: int = 1
    msgd_stages: tuple = (3, 4, 5)
    gcm_dilations: tuple = (1, 2, 4)
    decoder_channels: int = 32
    aggregation: str = "mean"
    fgse_stages: tuple = (1, 2, 3, 4, 5)
    use_sem: bool = True
    use_c2ftl: bool = True
    use_lfs: bool = True
    shared_modality_weights: bool = False
    se_reduction: int = 4
    max_tokens: int = 4096
    guidance: str = "fused"

    def __post_init__(self):
        object.__setattr__(self, "stage_channels", tuple(int(c) for c in self.stage_channels))
        object.__setattr__(self, "msgd_stages", tuple(sorted(int(s) for s in self.msgd_stages)))
        object.__setattr__(self, "fgse_stages", tuple(sorted(int(s) for s in self.fgse_stages)))
        object.__setattr__(self, "gcm_dilations", tuple(int(d) for d in self.gcm_dilations))
        if self.backbone not in ("toy", "resnet34"):
            raise ValueError(f"unknown backbone {self.backbone!r}")
        if len(self.stage_channels) != 5 or min(self.stage_channels) <= 0:
            raise ValueError("stage_channels must list 5 positive widths")
        if self.backbone == "resnet34" and self.stage_channels != RESNET34_CHANNELS:
            raise ValueError(f"resnet34 backbone requires stage_channels {RESNET34_CHANNELS}")
        if not self.msgd_stages or not set(self.msgd_stages) <= {1, 2, 3, 4, 5}:
            raise ValueError("msgd_stages must be a non-empty subset of 1..5")
        if not set(self.fgse_stages) <= {1, 2, 3, 4, 5}:
            raise ValueError("fgse_stages must be a subset of 1..5")
        if any(c % self.attn_heads for c in self.stage_channels):
            raise ValueError("attn_heads must divide every stage width")
        if self.aggregation not in ("mean", "max", "learned"):
            raise ValueError(f"unknown aggregation {self.aggregation!r}")
        if self.guidance not in ("fused", "average"):
            raise ValueError(f"unknown guidance {self.guidance!r}")


# ---------------------------------------------------------------------------
# FGSE components


class SEM(nn.Module):
    """bar = f + CR(f) * CS(f_u), with CR conv+ReLU and CS conv+sigmoid."""

    def __init__(self, channels: int, shared: bool = False):
        super().__init__()
        self.cr_r = nn.Sequential(nn.Conv2d(channels, channels, 3, padding=1), nn.ReLU())
        self.cr_t = self.cr_r if shared else nn.Sequential(nn.Conv2d(channels, channels, 3, padding=1), nn.ReLU())
        self.cs = nn.Sequential(nn.Conv2d(channels, channels, 3, padding=1), nn.Sigmoid())

    def forward(self, f_r, f_t, f_u):
        if not (f_r.shape == f_t.shape == f_u.shape):
            raise ShapeMismatchError("sem inputs", f_r.shape, f_t.shape if f_t.shape != f_r.shape else f_u.shape)
        gate = self.cs(f_u)
        return f_r + self.cr_r(f_r) * gate, f_t + self.cr_t(f_t) * gate


def cross_attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, heads: int = 1, return_map: bool = False):
    """Sigmoid-affinity attention over spatial tokens.

    q, k, v are N x C x H x W; the affinity is sigmoid(Q K^T / sqrt(C/heads))
    and is *not* normalised over keys.
    """
    n, c, h, w = q.shape
    d = c // heads
    # N*heads x HW x d
    qt = q.reshape(n, heads, d, h * w).transpose(2, 3)
    kt = k.reshape(n, heads, d, h * w).transpose(2, 3)
    vt = v.reshape(n, heads, d, h * w).transpose(2, 3)
    attn = torch.sigmoid(qt @ kt.transpose(2, 3) / math.sqrt(d))
    out = (attn @ vt).transpose(2, 3).reshape(n, c, h, w)
    return (out, attn) if return_map else out


class C2FTL(nn.Module):
    """tilde_r = S(Q_r K_t^T) V_t + f_r, tilde_t = S(Q_t K_r^T) V_r + f_t."""

    def __init__(self, channels: int, heads: int = 1, shared: bool = False, max_tokens: int = 4096):
        super().__init__()
        self.heads = heads
        self.max_tokens = max_tokens
        self.qkv_r = nn.Conv2d(channels, 3 * channels, 1)
        self.qkv_t = self.qkv_r if shared else nn.Conv2d(channels, 3 * channels, 1)

    def forward(self, bar_r, bar_t, f_r, f_t):
        if not (bar_r.shape == bar_t.shape == f_r.shape == f_t.shape):
            raise ShapeMismatchError("c2ftl inputs", bar_r.shape, bar_t.shape)
        tokens = bar_r.shape[2] * bar_r.shape[3]
        if tokens > self.max_tokens:
            raise TokenOverflowError(f"C2FTL token count {tokens} exceeds max_tokens={self.max_tokens}")
        q_r, k_r, v_r = self.qkv_r(bar_r).chunk(3, dim=1)
        q_t, k_t, v_t = self.qkv_t(bar_t).chunk(3, dim=1)
        tilde_r = cross_attention(q_r, k_t, v_t, self.heads) + f_r
        tilde_t = cross_attention(q_t, k_r, v_r, self.heads) + f_t
        return tilde_r, tilde_t


class LFS(nn.Module):
    """Learnable feature selector.

    Pooled descriptors of both streams go through a squeeze-excitation MLP;
    a softmax over the two modalities gives per-channel weights w_r + w_t = 1.
    The re-weighted streams are concatenated, reduced by a 1x1 conv and
    added back to each stream.
    """

    def __init__(self, channels: int, reduction: int = 4, shared: bool = False):
        super().__init__()
        self.channels = channels
        self.shared = shared
        hidden = max(1, 2 * channels // reduction)
        out = channels if shared else 2 * channels
        self.se = nn.Sequential(nn.Linear(2 * channels, hidden), nn.ReLU(), nn.Linear(hidden, out))
        self.reduce = nn.Conv2d(channels if shared else 2 * channels, channels, 1)

    def weights(self, tilde_r, tilde_t):
        p_r, p_t = tilde_r.mean(dim=(2, 3)), tilde_t.mean(dim=(2, 3))
        if self.shared:
            logits = torch.stack([self.se(torch.cat([p_r, p_t], 1)), self.se(torch.cat([p_t, p_r], 1))], dim=1)
        else:
            logits = self.se(torch.cat([p_r, p_t], 1)).view(-1, 2, self.channels)
        w = torch.softmax(logits, dim=1)
        return w[:, 0], w[:, 1]

    def forward(self, tilde_r, tilde_t):
        if tilde_r.shape != tilde_t.shape:
            raise ShapeMismatchError("tilde_t", tilde_r.shape, tilde_t.shape)
        w_r, w_t = self.weights(tilde_r, tilde_t)
        a = w_r[..., None, None] * tilde_r
        b = w_t[..., None, None] * tilde_t
        z = self.reduce(a + b) if self.shared else self.reduce(torch.cat([a, b], dim=1))
        return z + tilde_r, z + tilde_t


class FGSE(nn.Module):
    def __init__(self, channels: int, cfg: SodNetConfig):
        super().__init__()
        shared = cfg.shared_modality_weights
        self.channels = channels
        self.sem = SEM(channels, shared) if cfg.use_sem else None
        self.c2ftl = C2FTL(channels, cfg.attn_heads, shared, cfg.max_tokens) if cfg.use_c2ftl else None
        self.lfs = LFS(channels, cfg.se_reduction, shared) if cfg.use_lfs else None

    def forward(self, f_r, f_t, f_u):
        if f_r.shape[1] != self.channels:
            raise ShapeMismatchError("fgse", (self.channels, "H", "W"), tuple(f_r.shape[1:]))
        bar_r, bar_t = self.sem(f_r, f_t, f_u) if self.sem is not None else (f_r, f_t)
        if self.c2ftl is not None:
            bar_r, bar_t = self.c2ftl(bar_r, bar_t, f_r, f_t)
        if self.lfs is not None:
            bar_r, bar_t = self.lfs(bar_r, bar_t)
        return bar_r, bar_t


# ---------------------------------------------------------------------------
# Backbones: both expose five stages with a /2 stride plan.


def _conv_bn_relu(cin, cout, stride=1, dilation=1):
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride=stride, padding=dilation, dilation=dilation, bias=False),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=False),
    )


class ToyBackbone(nn.Module):
    def __init__(self, channels=(16, 32, 64, 128, 256)):
        super().__init__()
        widths = (3,) + tuple(channels)
        self.stages = nn.ModuleList(
            nn.Sequential(_conv_bn_relu(widths[i], widths[i + 1], stride=2), _conv_bn_relu(widths[i + 1], widths[i + 1]))
            for i in range(5)
        )


class ResNet34Backbone(nn.Module):
    def __init__(self, weights_path: str | None = None):
        super().__init__()
        from torchvision.models import resnet34

        net = resnet34(weights=None)
        if weights_path:
            net.load_state_dict(torch.load(weights_path, map_location="cpu"))
        self.stages = nn.ModuleList(
            [
                nn.Sequential(net.conv1, net.bn1, net.relu),
                nn.Sequential(net.maxpool, net.layer1),
                net.layer2,
                net.layer3,
                net.layer4,
            ]
        )


# ---------------------------------------------------------------------------
# Decoder


class GCM(nn.Module):
    """Global context: parallel dilated 3x3 conv+BN branches, summed, ReLU."""

    def __init__(self, cin: int, cout: int, dilations=(1, 2, 4)):
        super().__init__()
        self.branches = nn.ModuleList(
            nn.Sequential(nn.Conv2d(cin, cout, 3, padding=d, dilation=d, bias=False), nn.BatchNorm2d(cout))
            for d in dilations
        )

    def forward(self, x):
        return F.relu(sum(b(x) for b in self.branches))


class BranchDecoder(nn.Module):
    """Top-down decoder for one modality.

    The coarse head sits on the deepest decoded stage; the precise head (if
    any) on the finest stage after cascaded CBR refinement.
    """

    def __init__(self, in_channels: dict, width: int, dilations, precise: bool):
        super().__init__()
        self.stages = sorted(in_channels, reverse=True)
        self.gcm = nn.ModuleDict({str(s): GCM(in_channels[s], width, dilations) for s in self.stages})
        self.cbr = nn.ModuleDict({str(s): _conv_bn_relu(width, width) for s in self.stages})
        self.coarse_head = nn.Conv2d(width, 1, 1)
        self.precise_head = nn.Conv2d(width, 1, 1) if precise else None

    def forward(self, feats: dict):
        top = self.stages[0]
        d = self.cbr[str(top)](self.gcm[str(top)](feats[top]))
        coarse = self.coarse_head(d)
        if self.precise_head is None:
            return coarse, None
        for s in self.stages[1:]:
            x = self.gcm[str(s)](feats[s])
            d = self.cbr[str(s)](x + F.interpolate(d, size=x.shape[-2:], mode="bilinear", align_corners=False))
        return coarse, self.precise_head(d)


class MSGD(nn.Module):
    def __init__(self, cfg: SodNetConfig):
        super().__init__()
        self.cfg = cfg
        chans = {s: cfg.stage_channels[s - 1] for s in cfg.msgd_stages}
        deepest = {max(chans): chans[max(chans)]}
        w, dil = cfg.decoder_channels, cfg.gcm_dilations
        self.visible = BranchDecoder(chans, w, dil, precise=True)
        self.infrared = BranchDecoder(chans, w, dil, precise=True)
        self.fused = BranchDecoder(deepest, w, dil, precise=False)
        if cfg.aggregation == "learned":
            self.aggregate = nn.Conv2d(2, 1, 1)
            nn.init.constant_(self.aggregate.weight, 0.5)
            nn.init.zeros_(self.aggregate.bias)

    def forward(self, pyramids: dict, size) -> tuple[SaliencyOutputs, dict]:
        """pyramids: {'visible','infrared','fused'} -> FeaturePyramid. Returns (probabilities, logits)."""
        feats = {}
        for name, pyr in pyramids.items():
            missing = [s for s in self.cfg.msgd_stages if s not in pyr.stages]
            if missing:
                raise KeyError(f"{name} pyramid lacks decoder stages {missing}")
            feats[name] = {s: pyr[s] for s in self.cfg.msgd_stages}

        def up(x):
            return F.interpolate(x, size=size, mode="bilinear", align_corners=False)

        c_r, p_r = self.visible(feats["visible"])
        c_t, p_t = self.infrared(feats["infrared"])
        c_u, _ = self.fused(feats["fused"])
        p_r, p_t = up(p_r), up(p_t)
        if self.cfg.aggregation == "mean":
            final = 0.5 * (p_r + p_t)
        elif self.cfg.aggregation == "max":
            final = torch.maximum(p_r, p_t)
        else:
            final = self.aggregate(torch.cat([p_r, p_t], dim=1))
        logits = {
            "coarse_visible": up(c_r),
            "coarse_infrared": up(c_t),
            "coarse_fused": up(c_u),
            "precise_visible": p_r,
            "precise_infrared": p_t,
            "final": final,
        }
        probs = {k: torch.sigmoid(v) for k, v in logits.items()}
        out = SaliencyOutputs(
            coarse={"visible": probs["coarse_visible"], "infrared": probs["coarse_infrared"], "fused": probs["coarse_fused"]},
            precise={"visible": probs["precise_visible"], "infrared": probs["precise_infrared"]},
            final=probs["final"],
        )
        return out, logits


# ---------------------------------------------------------------------------


class FGC2Net(nn.Module):
    def __init__(self, cfg: SodNetConfig | None = None, backbone_weights: str | None = None):
        super().__init__()
        cfg = cfg or SodNetConfig()
        self.cfg = cfg
        if cfg.backbone == "toy":
            self.backbone = ToyBackbone(cfg.stage_channels)
        else:
            self.backbone = ResNet34Backbone(backbone_weights)
        self.fgse = nn.ModuleDict({str(s): FGSE(cfg.stage_channels[s - 1], cfg) for s in cfg.fgse_stages})
        self.decoder = MSGD(cfg)

    def guidance_input(self, visible, fused, ir3):
        if self.cfg.guidance == "average":
            return 0.5 * (visible + ir3)
        return fused

    def encode(self, visible, fused, ir3) -> dict:
        """Siamese encoding of the three RGB-shaped streams -> FeaturePyramids."""
        if not (visible.shape == fused.shape == ir3.shape) or visible.shape[1] != 3:
            raise ShapeMismatchError("encoder inputs", visible.shape, ir3.shape)
        f_r, f_u, f_t = visible, self.guidance_input(visible, fused, ir3), ir3
        pyr_r, pyr_t, pyr_u = {}, {}, {}
        n = visible.shape[0]
        for i, stage in enumerate(self.backbone.stages, start=1):
            # one call on the stacked streams: shared BatchNorm then sees the
            # same pooled statistics in training as its running estimates at eval
            f_r, f_t, f_u = stage(torch.cat([f_r, f_t, f_u])).split(n)
            if str(i) in self.fgse:
                f_r, f_t = self.fgse[str(i)](f_r, f_t, f_u)
            pyr_r[i], pyr_t[i], pyr_u[i] = f_r, f_t, f_u
        return {
            "visible": FeaturePyramid(pyr_r, "visible"),
            "infrared": FeaturePyramid(pyr_t, "infrared"),
            "fused": FeaturePyramid(pyr_u, "fused"),
        }

    def forward(self, visible, fused, ir, return_logits: bool = False):
        """visible N x 3, fused N x 3, ir N x 1 or N x 3 -> SaliencyOutputs at input size."""
        ir3 = ir.expand(-1, 3, -1, -1) if ir.shape[1] == 1 else ir
        pyramids = self.encode(visible, fused, ir3)
        out, logits = self.decoder(pyramids, visible.shape[-2:])
        return (out, logits) if return_logits else out
