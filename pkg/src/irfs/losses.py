"""Training objectives for the fusion and SOD subnetworks.

All functions take N x 1 x H x W tensors unless stated otherwise and return
scalar tensors, so they can sit directly in an autograd graph.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .types import SaliencyOutputs, ShapeMismatchError

MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
LAPLACIAN = ((0.0, 1.0, 0.0), (1.0, -4.0, 1.0), (0.0, 1.0, 0.0))
WEIGHT_EPS = 1e-8


def _as_nchw(x: torch.Tensor) -> torch.Tensor:
    if x.dim() == 2:
        return x[None, None]
    if x.dim() == 3:  # H x W x 1
        return x.permute(2, 0, 1)[None]
    return x


def _check(**tensors):
    items = list(tensors.items())
    for name, t in items[1:]:
        if t.shape != items[0][1].shape:
            raise ShapeMismatchError(name, items[0][1].shape, t.shape)


# ---------------------------------------------------------------------------
# Saliency-weighted intensity target


def saliency_matrix(img: torch.Tensor, normalize: bool = True) -> torch.Tensor:
    """Histogram-contrast saliency per image.

    Pixels are quantised to 256 levels with histogram ``h``; each pixel scores
    S(p) = sum_i h(i) |I(p) - i/255|. With ``normalize`` the map is min-max
    scaled to [0, 1] per image; a constant image maps to all zeros.
    Returns N x 1 x H x W (no gradient).
    """
    x = _as_nchw(img).detach()
    n = x.shape[0]
    q = (x.clamp(0, 1) * 255).round().long().view(n, -1)
    levels = torch.arange(256, dtype=torch.float64, device=x.device) / 255.0
    dist = (levels[:, None] - levels[None, :]).abs()  # 256 x 256
    out = torch.empty(q.shape, dtype=torch.float64, device=x.device)
    for b in range(n):
        hist = torch.bincount(q[b], minlength=256).to(torch.float64)
        table = dist @ hist
        out[b] = table[q[b]]
    out = out.view(x.shape)
    if normalize:
        lo = out.amin(dim=(1, 2, 3), keepdim=True)
        hi = out.amax(dim=(1, 2, 3), keepdim=True)
        span = hi - lo
        out = torch.where(span > 0, (out - lo) / torch.where(span > 0, span, torch.ones_like(span)), torch.zeros_like(out))
    return out.to(x.dtype)


def weight_maps(ir: torch.Tensor, y_vis: torch.Tensor, eps: float = WEIGHT_EPS):
    """Sum-normalised saliency weights (w_t, w_r) with w_t + w_r = 1."""
    ir, y_vis = _as_nchw(ir), _as_nchw(y_vis)
    _check(ir=ir, y_vis=y_vis)
    s_t, s_r = saliency_matrix(ir), saliency_matrix(y_vis)
    w_t = s_t / (s_t + s_r + eps)
    return w_t, 1.0 - w_t


def intensity_target(ir, y_vis):
    w_t, w_r = weight_maps(ir, y_vis)
    return w_t * _as_nchw(ir) + w_r * _as_nchw(y_vis)


# ---------------------------------------------------------------------------
# SSIM / MS-SSIM


def _gaussian_window(size: int, sigma: float, dtype, device) -> torch.Tensor:
    coords = torch.arange(size, dtype=dtype, device=device) - (size - 1) / 2
    g = torch.exp(-(coords**2) / (2 * sigma**2))
    g = g / g.sum()
    return (g[:, None] * g[None, :])[None, None]


def _ssim_components(x, y, win, data_range=1.0):
    c1, c2 = (0.01 * data_range) ** 2, (0.03 * data_range) ** 2
    mu_x, mu_y = F.conv2d(x, win), F.conv2d(y, win)
    sxx = F.conv2d(x * x, win) - mu_x**2
    syy = F.conv2d(y * y, win) - mu_y**2
    sxy = F.conv2d(x * y, win) - mu_x * mu_y
    cs = (2 * sxy + c2) / (sxx + syy + c2)
    lum = (2 * mu_x * mu_y + c1) / (mu_x**2 + mu_y**2 + c1)
    return (lum * cs).mean(dim=(1, 2, 3)), cs.mean(dim=(1, 2, 3))


def ms_ssim(x, y, win_size: int = 11, sigma: float = 1.5, max_scales: int = 5) -> torch.Tensor:
    """Multi-scale SSIM averaged over the batch.

    The number of scales shrinks until the coarsest level still holds a full
    window; one scale is plain SSIM. The window itself shrinks (odd size) for
    images smaller than ``win_size``.
    """
    x, y = _as_nchw(x), _as_nchw(y)
    _check(x=x, y=y)
    side = min(x.shape[-2:])
    win_size = min(win_size, side if side % 2 else side - 1)
    n_scales = 1
    while n_scales < max_scales and side // 2**n_scales >= win_size:
        n_scales += 1
    win = _gaussian_window(win_size, sigma, x.dtype, x.device)
    if n_scales == 1:
        return _ssim_components(x, y, win)[0].mean()
    weights = torch.tensor(MS_SSIM_WEIGHTS[:n_scales], dtype=x.dtype, device=x.device)
    weights = weights / weights.sum()
    values = []
    for level in range(n_scales):
        ssim_val, cs = _ssim_components(x, y, win)
        if level < n_scales - 1:
            values.append(F.relu(cs))
            x, y = F.avg_pool2d(x, 2), F.avg_pool2d(y, 2)
        else:
            values.append(F.relu(ssim_val))
    stacked = torch.stack(values, dim=0)  # scales x N
    return torch.prod(stacked ** weights[:, None], dim=0).mean()


# ---------------------------------------------------------------------------
# Fusion losses


@dataclass(frozen=True)
class FusionLossTerms:
    intensity: torch.Tensor
    gradient: torch.Tensor
    total: torch.Tensor
    lam: float = 0.5
    gamma: float = 20.0


def intensity_loss(ir, y_vis, fused, gamma: float = 20.0) -> torch.Tensor:
    """Mean L1 to the saliency-weighted target plus gamma * (1 - MS-SSIM)."""
    if not gamma > 0:
        raise ValueError("gamma must be positive")
    ir, y_vis, fused = _as_nchw(ir), _as_nchw(y_vis), _as_nchw(fused)
    _check(ir=ir, y_vis=y_vis, fused=fused)
    target = intensity_target(ir, y_vis)
    return (target - fused).abs().mean() + gamma * (1.0 - ms_ssim(target, fused))


def laplacian(x: torch.Tensor) -> torch.Tensor:
    x = _as_nchw(x)
    k = torch.tensor(LAPLACIAN, dtype=x.dtype, device=x.device)[None, None]
    return F.conv2d(F.pad(x, (1, 1, 1, 1), mode="reflect"), k)


def max_abs_select(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Per pixel, the response of larger magnitude (ties go to ``a``)."""
    return torch.where(a.abs() >= b.abs(), a, b)


def gradient_loss(ir, y_vis, fused) -> torch.Tensor:
    ir, y_vis, fused = _as_nchw(ir), _as_nchw(y_vis), _as_nchw(fused)
    _check(ir=ir, y_vis=y_vis, fused=fused)
    target = max_abs_select(laplacian(y_vis), laplacian(ir)).detach()
    return (laplacian(fused) - target).abs().mean()


def fusion_loss(ir, y_vis, fused, lam: float = 0.5, gamma: float = 20.0) -> FusionLossTerms:
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    l_int = intensity_loss(ir, y_vis, fused, gamma)
    l_grad = gradient_loss(ir, y_vis, fused)
    return FusionLossTerms(l_int, l_grad, l_int + lam * l_grad, lam, gamma)


# ---------------------------------------------------------------------------
# SOD losses


@dataclass(frozen=True)
class SodLossTerms:
    coarse: torch.Tensor
    precise: torch.Tensor
    total: torch.Tensor


def boundary_weights(gt: torch.Tensor, pool: int = 15) -> torch.Tensor:
    """1 + 5 |avgpool(gt) - gt|; pool=1 gives uniform weights."""
    gt = _as_nchw(gt)
    if pool <= 1:
        return torch.ones_like(gt)
    return 1.0 + 5.0 * (F.avg_pool2d(gt, pool, stride=1, padding=pool // 2) - gt).abs()


def wbce_wiou(pred, gt, pool: int = 15, clamp: float = 1e-7, iou_eps: float = 1e-6) -> torch.Tensor:
    """Boundary-weighted BCE plus weighted IoU, averaged over the batch."""
    pred, gt = _as_nchw(pred), _as_nchw(gt).to(_as_nchw(pred).dtype)
    _check(pred=pred, gt=gt)
    w = boundary_weights(gt, pool)
    p = pred.clamp(clamp, 1.0 - clamp)
    bce = -(gt * torch.log(p) + (1 - gt) * torch.log(1 - p))
    wbce = (w * bce).sum(dim=(2, 3)) / w.sum(dim=(2, 3))
    inter = (w * pred * gt).sum(dim=(2, 3))
    union = (w * (pred + gt)).sum(dim=(2, 3))
    wiou = 1.0 - (inter + iou_eps) / (union - inter + iou_eps)
    return (wbce + wiou).mean()


def sod_loss(outputs: SaliencyOutputs, gt, reduction: str = "sum", pool: int = 15) -> SodLossTerms:
    """Coarse term over the three coarse maps, precise term over the two precise maps."""
    gt = _as_nchw(gt)
    for name, m in outputs.all_maps().items():
        if m.shape[-2:] != gt.shape[-2:]:
            raise ShapeMismatchError(name, gt.shape, m.shape)
    coarse = [wbce_wiou(m, gt, pool) for m in outputs.coarse.values()]
    precise = [wbce_wiou(m, gt, pool) for m in outputs.precise.values()]
    if reduction == "sum":
        c, p = sum(coarse), sum(precise)
    elif reduction == "mean":
        c, p = sum(coarse) / len(coarse), sum(precise) / len(precise)
    else:
        raise ValueError(f"unknown reduction {reduction!r}")
    return SodLossTerms(c, p, c + p)


def overall_loss(fusion: FusionLossTerms, sod: SodLossTerms, tau: float = 1.0, eta: float = 1.0):
    if not (tau > 0 and eta > 0):
        raise ValueError("tau and eta must be positive")
    return tau * fusion.total + eta * sod.total


TAU_SWEEP = (0.1, 0.5, 1.0, 2.0, 5.0, 10.0)
