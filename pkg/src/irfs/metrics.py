"""Fusion quality (MI, VIF, CC) and saliency (S-measure, F-measure,
E-measure, MAE) metrics.

Images are numpy arrays in [0, 1], either H x W or H x W x 1.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .types import MetricReport, ShapeMismatchError

log = logging.getLogger(__name__)

BINS = 256
BETA2 = 0.3
ALPHA = 0.5
VIF_SIGMA_NSQ = 2.0
VIF_SCALES = 4
EPS = np.finfo(np.float64).eps

METRIC_CONFIG = {
    "mi": {"bins": BINS, "log_base": 2, "normalization": "min-max then round(x*255)"},
    "vif": {"domain": "pixel", "scales": VIF_SCALES, "sigma_nsq": VIF_SIGMA_NSQ, "sources": "sum"},
    "cc": {"sources": "mean", "zero_variance": "r=0 (flagged)"},
    "f_beta": {"beta2": BETA2, "threshold": "min(2*mean(pred), 1)"},
    "s_alpha": {"alpha": ALPHA},
    "e_xi": {"threshold": "min(2*mean(pred), 1)", "normalization": "mean over pixels"},
}


def _gray(a) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 3:
        if a.shape[2] != 1:
            raise ShapeMismatchError("image", ("H", "W", 1), a.shape)
        a = a[..., 0]
    return a


def _same(**arrays):
    items = list(arrays.items())
    for name, a in items[1:]:
        if a.shape != items[0][1].shape:
            raise ShapeMismatchError(name, items[0][1].shape, a.shape)


# ---------------------------------------------------------------------------
# Mutual information


def quantize(img) -> np.ndarray:
    """Min-max normalise then map to integer levels 0..255 (constant -> 0)."""
    a = _gray(img)
    lo, hi = a.min(), a.max()
    if hi <= lo:
        return np.zeros(a.shape, dtype=np.int64)
    return np.clip(np.rint((a - lo) / (hi - lo) * (BINS - 1)), 0, BINS - 1).astype(np.int64)


@dataclass(frozen=True)
class HistogramPair:
    joint: np.ndarray
    marg_a: np.ndarray
    marg_b: np.ndarray

    def __post_init__(self):
        if not np.allclose(self.joint.sum(axis=1), self.marg_a, atol=1e-9) or not np.allclose(
            self.joint.sum(axis=0), self.marg_b, atol=1e-9
        ):
            raise ValueError("marginals disagree with the joint histogram")

    @classmethod
    def from_images(cls, a, b) -> "HistogramPair":
        qa, qb = quantize(a).ravel(), quantize(b).ravel()
        joint = np.bincount(qa * BINS + qb, minlength=BINS * BINS).reshape(BINS, BINS).astype(np.float64)
        joint /= joint.sum()
        return cls(joint, joint.sum(axis=1), joint.sum(axis=0))


def entropy(img) -> float:
    p = np.bincount(quantize(img).ravel(), minlength=BINS) / quantize(img).size
    p = p[p > 0]
    return float(-(p * np.log2(p)).sum())


def mutual_information(a, b) -> float:
    h = HistogramPair.from_images(a, b)
    nz = h.joint > 0
    outer = np.outer(h.marg_a, h.marg_b)
    return float((h.joint[nz] * np.log2(h.joint[nz] / outer[nz])).sum())


def mi(ir, vis, fused) -> float:
    ir, vis, fused = _gray(ir), _gray(vis), _gray(fused)
    _same(ir=ir, vis=vis, fused=fused)
    return mutual_information(ir, fused) + mutual_information(vis, fused)


# ---------------------------------------------------------------------------
# Correlation coefficient


def pearson(a, b) -> tuple[float, bool]:
    """Pearson r and a validity flag; zero variance gives (0.0, False)."""
    a, b = _gray(a).ravel(), _gray(b).ravel()
    da, db = a - a.mean(), b - b.mean()
    den = np.sqrt((da * da).mean()) * np.sqrt((db * db).mean())
    if den == 0:
        return 0.0, False
    return float((da * db).mean() / den), True


def cc(ir, vis, fused, flags: list | None = None) -> float:
    ir, vis, fused = _gray(ir), _gray(vis), _gray(fused)
    _same(ir=ir, vis=vis, fused=fused)
    r_ir, ok_ir = pearson(ir, fused)
    r_vis, ok_vis = pearson(vis, fused)
    if flags is not None:
        if not ok_ir:
            flags.append("cc: zero variance in (ir, fused)")
        if not ok_vis:
            flags.append("cc: zero variance in (vis, fused)")
    return 0.5 * (r_ir + r_vis)


# ---------------------------------------------------------------------------
# Visual information fidelity


def gaussian_kernel(size: int, sigma: float) -> np.ndarray:
    """MATLAB fspecial('gaussian') equivalent."""
    r = (size - 1) / 2.0
    y, x = np.ogrid[-r : r + 1, -r : r + 1]
    h = np.exp(-(x * x + y * y) / (2.0 * sigma * sigma))
    h[h < EPS * h.max()] = 0
    return h / h.sum()


def _filter(img, win):
    return ndimage.correlate(img, win, mode="reflect")


def vif_single(ref, dist) -> float:
    """Pixel-domain VIF of ``dist`` against ``ref`` over four scales.

    Windows are applied with same-size reflected borders so images down to
    8 x 8 are accepted.
    """
    ref = _gray(ref) * 255.0
    dist = _gray(dist) * 255.0
    num = den = 0.0
    for scale in range(1, VIF_SCALES + 1):
        n = 2 ** (VIF_SCALES - scale + 1) + 1
        win = gaussian_kernel(n, n / 5.0)
        if scale > 1:
            ref = _filter(ref, win)[::2, ::2]
            dist = _filter(dist, win)[::2, ::2]
        mu1, mu2 = _filter(ref, win), _filter(dist, win)
        s1 = _filter(ref * ref, win) - mu1 * mu1
        s2 = _filter(dist * dist, win) - mu2 * mu2
        s12 = _filter(ref * dist, win) - mu1 * mu2
        s1 = np.maximum(s1, 0)
        s2 = np.maximum(s2, 0)
        g = s12 / (s1 + 1e-10)
        sv = s2 - g * s12
        low1 = s1 < 1e-10
        g[low1] = 0
        sv[low1] = s2[low1]
        s1[low1] = 0
        low2 = s2 < 1e-10
        g[low2] = 0
        sv[low2] = 0
        neg = g < 0
        sv[neg] = s2[neg]
        g[neg] = 0
        sv = np.maximum(sv, 1e-10)
        num += np.sum(np.log10(1 + g * g * s1 / (sv + VIF_SIGMA_NSQ)))
        den += np.sum(np.log10(1 + s1 / VIF_SIGMA_NSQ))
    if den == 0:
        return 0.0
    return float(num / den)


def vif(ir, vis, fused) -> float:
    ir, vis, fused = _gray(ir), _gray(vis), _gray(fused)
    _same(ir=ir, vis=vis, fused=fused)
    if min(fused.shape) < 8:
        raise ValueError(f"VIF needs images of at least 8 x 8, got {fused.shape}")
    return vif_single(ir, fused) + vif_single(vis, fused)


# ---------------------------------------------------------------------------
# Saliency metrics


def _pred_gt(pred, gt):
    pred, gt = _gray(pred), _gray(gt)
    _same(pred=pred, gt=gt)
    return pred, gt > 0.5


def mae(pred, gt) -> float:
    pred, gt = _pred_gt(pred, gt)
    return float(np.abs(pred - gt).mean())


def adaptive_threshold(pred) -> float:
    return min(2.0 * float(np.mean(pred)), 1.0)


def f_beta(pred, gt, beta2: float = BETA2, flags: list | None = None) -> float:
    pred, gt = _pred_gt(pred, gt)
    binary = pred >= adaptive_threshold(pred)
    tp = np.count_nonzero(binary & gt)
    if binary.sum() == 0 or tp == 0:
        if flags is not None and binary.sum() == 0:
            flags.append("f_beta: empty prediction after thresholding")
        return 0.0
    precision = tp / binary.sum()
    recall = tp / gt.sum()
    return float((1 + beta2) * precision * recall / (beta2 * precision + recall))


def _object_score(x, mask) -> float:
    vals = x[mask]
    mu = vals.mean()
    sigma = vals.std(ddof=1) if vals.size > 1 else 0.0
    return 2.0 * mu / (mu * mu + 1.0 + sigma + EPS)


def _s_object(pred, gt) -> float:
    u = gt.mean()
    fg = _object_score(pred, gt) if gt.any() else 0.0
    bg = _object_score(1.0 - pred, ~gt) if (~gt).any() else 0.0
    return u * fg + (1 - u) * bg


def _centroid(gt):
    h, w = gt.shape
    if not gt.any():
        return int(round(w / 2)), int(round(h / 2))
    ys, xs = np.nonzero(gt)
    return int(round(xs.mean())) + 1, int(round(ys.mean())) + 1


def _ssim_region(pred, gt) -> float:
    n = pred.size
    if n == 0:
        return 0.0
    x, y = pred.mean(), gt.mean()
    if n > 1:
        sx = ((pred - x) ** 2).sum() / (n - 1)
        sy = ((gt - y) ** 2).sum() / (n - 1)
        sxy = ((pred - x) * (gt - y)).sum() / (n - 1)
    else:
        sx = sy = sxy = 0.0
    alpha = 4 * x * y * sxy
    beta = (x * x + y * y) * (sx + sy)
    if alpha != 0:
        return alpha / (beta + EPS)
    return 1.0 if beta == 0 else 0.0


def _s_region(pred, gt) -> float:
    h, w = gt.shape
    cx, cy = _centroid(gt)
    area = h * w
    g = gt.astype(np.float64)
    blocks = [(slice(0, cy), slice(0, cx)), (slice(0, cy), slice(cx, w)), (slice(cy, h), slice(0, cx)), (slice(cy, h), slice(cx, w))]
    score = 0.0
    for rows, cols in blocks:
        p, q = pred[rows, cols], g[rows, cols]
        score += p.size / area * _ssim_region(p, q)
    return score


def s_measure(pred, gt, alpha: float = ALPHA) -> float:
    """Structure measure: alpha * object-aware + (1 - alpha) * region-aware similarity."""
    pred, gt = _pred_gt(pred, gt)
    y = gt.mean()
    if y == 0:
        q = 1.0 - pred.mean()
    elif y == 1:
        q = pred.mean()
    else:
        q = alpha * _s_object(pred, gt) + (1 - alpha) * _s_region(pred, gt)
    return float(max(q, 0.0))


def e_measure(pred, gt) -> float:
    """Enhanced-alignment measure with the adaptive threshold, averaged over pixels."""
    pred, gt = _pred_gt(pred, gt)
    fm = (pred >= adaptive_threshold(pred)).astype(np.float64)
    g = gt.astype(np.float64)
    if g.sum() == 0:
        enhanced = 1.0 - fm
    elif g.sum() == g.size:
        enhanced = fm
    else:
        dfm, dgt = fm - fm.mean(), g - g.mean()
        align = 2 * dgt * dfm / (dgt * dgt + dfm * dfm + EPS)
        enhanced = (align + 1) ** 2 / 4
    return float(enhanced.mean())


# ---------------------------------------------------------------------------

FUSION_METRICS = {"mi": mi, "vif": vif, "cc": cc}
SOD_METRICS = {"s_alpha": s_measure, "f_beta": f_beta, "e_xi": e_measure, "mae": mae}


def sod_scores(pred, gt, flags: list | None = None, keys=None) -> dict:
    """All four SOD metrics, or only ``keys``."""
    fns = {
        "s_alpha": lambda: s_measure(pred, gt),
        "f_beta": lambda: f_beta(pred, gt, flags=flags),
        "e_xi": lambda: e_measure(pred, gt),
        "mae": lambda: mae(pred, gt),
    }
    return {k: float(fn()) for k, fn in fns.items() if keys is None or k in keys}


def fusion_scores(ir, vis, fused, flags: list | None = None, keys=None) -> dict:
    fns = {"mi": lambda: mi(ir, vis, fused), "vif": lambda: vif(ir, vis, fused), "cc": lambda: cc(ir, vis, fused, flags=flags)}
    return {k: float(fn()) for k, fn in fns.items() if keys is None or k in keys}


def aggregate_report(fusion_rows: list, sod_rows: list, dataset: str, flags: list | None = None) -> MetricReport:
    report = MetricReport(dataset=dataset, n_samples=max(len(fusion_rows), len(sod_rows)), flags=sorted(set(flags or [])))
    if fusion_rows:
        report.fusion = {k: float(np.mean([r[k] for r in fusion_rows])) for k in fusion_rows[0]}
    if sod_rows:
        report.sod = {k: float(np.mean([r[k] for r in sod_rows])) for k in sod_rows[0]}
    return report
