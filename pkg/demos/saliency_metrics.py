"""How the saliency scores react to common failure modes of a predicted map.

Starts from a perfect prediction of a generated mask and degrades it by
blurring, shifting, shrinking and adding clutter. Run from anywhere:

    python demos/saliency_metrics.py
"""
import numpy as np
from scipy import ndimage

from irfs import metrics
from irfs.data import SynthConfig, synth_sample


def main():
    sample = synth_sample(SynthConfig(n_samples=1, size=96, seed=3), np.random.default_rng(3), "demo")
    gt = sample.mask
    rng = np.random.default_rng(0)
    cases = {
        "perfect": gt.astype(float),
        "blurred": ndimage.gaussian_filter(gt.astype(float), 3),
        "shifted 6px": np.roll(gt, 6, axis=1).astype(float),
        "eroded": ndimage.binary_erosion(gt, iterations=4).astype(float),
        "clutter": np.clip(gt + 0.6 * (rng.random(gt.shape) > 0.9), 0, 1),
        "all zero": np.zeros_like(gt, dtype=float),
    }
    print(f"{'prediction':<12} {'S':>7} {'F':>7} {'E':>7} {'MAE':>7}")
    for name, pred in cases.items():
        s = metrics.sod_scores(pred, gt)
        print(f"{name:<12} {s['s_alpha']:7.3f} {s['f_beta']:7.3f} {s['e_xi']:7.3f} {s['mae']:7.3f}")


if __name__ == "__main__":
    main()
