"""Paired infrared/visible datasets on disk and a synthetic generator.

Layout: ``{root}[/{split}]/{RGB,T,GT}/{id}.png``. The split subdirectory is
used when it exists, otherwise ``root`` itself holds the modality folders.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image, ImageDraw
from scipy import ndimage

from .types import MultimodalSample

log = logging.getLogger(__name__)

IMAGE_EXTS = (".png", ".jpg", ".jpeg", ".bmp")
DEFAULT_SUBDIRS = {"visible": "RGB", "infrared": "T", "mask": "GT"}
CACHE_NAME = ".irfs_manifest_{split}.json"


class DatasetError(Exception):
    """Missing, empty or undecodable dataset content."""


class EmptyDatasetError(DatasetError):
    pass


@dataclass(frozen=True)
class ManifestEntry:
    id: str
    visible: str
    infrared: str
    mask: Optional[str] = None


@dataclass(frozen=True)
class DatasetManifest:
    root: str
    split: str
    entries: tuple
    resize: int = 352

    def __len__(self):
        return len(self.entries)

    def ids(self) -> list[str]:
        return [e.id for e in self.entries]

    def to_dict(self) -> dict:
        return {
            "root": self.root,
            "split": self.split,
            "resize": self.resize,
            "entries": [dataclasses.asdict(e) for e in self.entries],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetManifest":
        return cls(d["root"], d["split"], tuple(ManifestEntry(**e) for e in d["entries"]), d.get("resize", 352))


def _index(folder: Path) -> dict:
    if not folder.is_dir():
        return {}
    return {p.stem: p for p in sorted(folder.iterdir()) if p.suffix.lower() in IMAGE_EXTS}


def _content_hash(paths: Sequence[Path]) -> str:
    h = hashlib.sha256()
    for p in paths:
        st = p.stat()
        h.update(f"{p.name}:{st.st_size}:{st.st_mtime_ns}".encode())
    return h.hexdigest()


def load_manifest(root, split: str = "train", subdirs: dict | None = None, resize: int = 352, use_cache: bool = True) -> DatasetManifest:
    """Scan a paired dataset directory into a sorted, validated manifest.

    Every entry needs visible and infrared images; the train split also needs
    masks. All problems are collected and reported together.
    """
    if split not in ("train", "test"):
        raise ValueError(f"split must be 'train' or 'test', got {split!r}")
    subdirs = {**DEFAULT_SUBDIRS, **(subdirs or {})}
    root = Path(root)
    base = root / split if (root / split).is_dir() else root
    if not base.is_dir():
        raise DatasetError(f"dataset directory not found: {base}")
    vis, ir, gt = (_index(base / subdirs[k]) for k in ("visible", "infrared", "mask"))
    ids = sorted(set(vis) | set(ir) | set(gt))
    if not ids:
        raise EmptyDatasetError(f"empty dataset: no images under {base}")

    cache = base / CACHE_NAME.format(split=split)
    digest = _content_hash([p for d in (vis, ir, gt) for p in d.values()])
    if use_cache and cache.is_file():
        try:
            cached = json.loads(cache.read_text())
            if cached.get("hash") == digest and cached["manifest"].get("resize") == resize:
                return DatasetManifest.from_dict(cached["manifest"])
        except (ValueError, KeyError):
            log.warning("ignoring unreadable manifest cache %s", cache)

    problems, entries = [], []
    for i in ids:
        missing = [k for k, d in (("visible", vis), ("infrared", ir)) if i not in d]
        if split == "train" and i not in gt:
            missing.append("mask")
        if missing:
            problems.append(f"{i}: missing {', '.join(missing)}")
            continue
        entries.append(ManifestEntry(i, str(vis[i]), str(ir[i]), str(gt[i]) if i in gt else None))
    if problems:
        raise DatasetError("broken dataset entries:\n  " + "\n  ".join(problems))
    manifest = DatasetManifest(str(root), split, tuple(entries), resize)
    if use_cache:
        try:
            cache.write_text(json.dumps({"hash": digest, "manifest": manifest.to_dict()}, indent=1))
        except OSError:
            log.debug("manifest cache not writable at %s", cache)
    return manifest


def read_image(path, mode: str = "RGB", size: int | None = None, resample=Image.BILINEAR) -> np.ndarray:
    """Decode one image to float32 H x W x C in [0, 1], optionally resized to size x size."""
    try:
        with Image.open(path) as im:
            im = im.convert(mode)
            if size is not None and im.size != (size, size):
                im = im.resize((size, size), resample)
            arr = np.asarray(im, dtype=np.float32) / 255.0
    except (OSError, ValueError) as e:
        raise DatasetError(f"cannot decode {path}: {e}") from e
    return arr if arr.ndim == 3 else arr[..., None]


def read_sample(entry: ManifestEntry, size: int | None = None) -> MultimodalSample:
    vis = read_image(entry.visible, "RGB", size, Image.BILINEAR)
    ir = read_image(entry.infrared, "L", size, Image.BILINEAR)
    mask = None
    if entry.mask is not None:
        mask = (read_image(entry.mask, "L", size, Image.NEAREST)[..., 0] > 0.5).astype(np.float32)
    return MultimodalSample(vis, ir, mask, entry.id)


@dataclass
class Batch:
    visible: np.ndarray  # N x H x W x 3
    infrared: np.ndarray  # N x H x W x 1
    mask: Optional[np.ndarray]  # N x H x W
    ids: list = field(default_factory=list)
    flipped: Optional[np.ndarray] = None

    def __len__(self):
        return len(self.ids)

    def tensors(self, dtype=None):
        """Channel-first torch tensors (vis, ir, mask-or-None)."""
        import torch

        dtype = dtype or torch.float32
        vis = torch.from_numpy(np.ascontiguousarray(self.visible.transpose(0, 3, 1, 2))).to(dtype)
        ir = torch.from_numpy(np.ascontiguousarray(self.infrared.transpose(0, 3, 1, 2))).to(dtype)
        mask = None if self.mask is None else torch.from_numpy(np.ascontiguousarray(self.mask[:, None])).to(dtype)
        return vis, ir, mask


def num_workers() -> int:
    try:
        return max(1, int(os.environ.get("IRFS_NUM_WORKERS", "1")))
    except ValueError:
        return 1


def make_batch(manifest: DatasetManifest, indices: Sequence[int], train: bool, crop: int | None = None, rng: np.random.Generator | None = None) -> Batch:
    """Load, resize and (in train mode) flip a batch.

    One flip decision per sample is drawn from ``rng`` up front and applied to
    visible, infrared and mask together, so the result does not depend on
    worker scheduling.
    """
    size = crop if crop is not None else manifest.resize
    entries = [manifest.entries[i] for i in indices]
    if train:
        rng = rng if rng is not None else np.random.default_rng()
        flips = rng.random(len(entries)) < 0.5
    else:
        flips = np.zeros(len(entries), dtype=bool)
    workers = min(num_workers(), max(1, len(entries)))
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            samples = list(pool.map(lambda e: read_sample(e, size), entries))
    else:
        samples = [read_sample(e, size) for e in entries]
    vis = np.stack([s.visible for s in samples]).astype(np.float32)
    ir = np.stack([s.infrared for s in samples]).astype(np.float32)
    has_mask = all(s.mask is not None for s in samples)
    mask = np.stack([s.mask for s in samples]).astype(np.float32) if has_mask else None
    for k in np.nonzero(flips)[0]:
        vis[k], ir[k] = vis[k][:, ::-1], ir[k][:, ::-1]
        if mask is not None:
            mask[k] = mask[k][:, ::-1]
    return Batch(vis, ir, mask, [s.id for s in samples], flips)


def hflip(arr: np.ndarray) -> np.ndarray:
    return arr[:, ::-1].copy()


# ---------------------------------------------------------------------------
# Synthetic data


@dataclass(frozen=True)
class SynthConfig:
    n_samples: int = 16
    size: int = 96
    n_shapes: tuple = (1, 3)
    radius_range: tuple = (0.08, 0.22)
    ir_hotspot_gain: float = 0.55
    noise_sigma: float = 0.03
    seed: int = 0

    def __post_init__(self):
        if self.n_samples <= 0 or self.size <= 0:
            raise ValueError("n_samples and size must be positive")
        lo, hi = self.n_shapes
        if not 1 <= lo <= hi:
            raise ValueError("n_shapes must be a range (lo, hi) with 1 <= lo <= hi")
        if not 0 < self.radius_range[0] <= self.radius_range[1] < 0.5:
            raise ValueError("radius_range must satisfy 0 < lo <= hi < 0.5")

    def area_bounds(self) -> tuple[float, float]:
        """Bounds on the GT foreground fraction implied by the shape sizes.

        The smallest possible object is a rectangle/ellipse with both half-axes
        at the minimum radius; the union of objects can never exceed
        ``n_max`` full bounding squares at the maximum radius.
        """
        r_lo = max(1, int(round(self.radius_range[0] * self.size)))
        r_hi = max(1, int(round(self.radius_range[1] * self.size)))
        lower = 0.7 * np.pi * r_lo**2 / self.size**2
        upper = min(1.0, self.n_shapes[1] * (2 * r_hi + 1) ** 2 / self.size**2)
        return float(lower), float(upper)


def fractal_noise(size: int, rng: np.random.Generator, octaves: int = 4) -> np.ndarray:
    """Perlin-style value noise in [0, 1]: smoothed random grids summed over octaves."""
    out = np.zeros((size, size))
    amp, total = 1.0, 0.0
    for o in range(octaves):
        cells = 2 ** (o + 2)
        grid = rng.random((cells + 1, cells + 1))
        layer = ndimage.zoom(grid, size / (cells + 1), order=3, mode="reflect", grid_mode=True)[:size, :size]
        out += amp * layer
        total += amp
        amp *= 0.5
    out /= total
    lo, hi = out.min(), out.max()
    return (out - lo) / (hi - lo + 1e-12)


def _draw_objects(cfg: SynthConfig, rng: np.random.Generator):
    size = cfg.size
    mask = Image.new("L", (size, size), 0)
    draw = ImageDraw.Draw(mask)
    count = int(rng.integers(cfg.n_shapes[0], cfg.n_shapes[1] + 1))
    r_lo = max(1, int(round(cfg.radius_range[0] * size)))
    r_hi = max(r_lo, int(round(cfg.radius_range[1] * size)))
    for _ in range(count):
        rx, ry = int(rng.integers(r_lo, r_hi + 1)), int(rng.integers(r_lo, r_hi + 1))
        cx = int(rng.integers(rx, size - rx))
        cy = int(rng.integers(ry, size - ry))
        box = (cx - rx, cy - ry, cx + rx, cy + ry)
        if rng.random() < 0.5:
            draw.ellipse(box, fill=255)
        else:
            draw.rectangle(box, fill=255)
    return np.asarray(mask) > 0


def synth_sample(cfg: SynthConfig, rng: np.random.Generator, sample_id: str) -> MultimodalSample:
    size = cfg.size
    gt = _draw_objects(cfg, rng)
    # visible: coloured texture everywhere, objects only slightly tinted
    tex = fractal_noise(size, rng)
    tint = rng.uniform(0.3, 0.7, size=3)
    vis = 0.25 + 0.5 * tex[..., None] * tint[None, None] / tint.max()
    obj_shift = rng.uniform(0.05, 0.12) * rng.choice([-1.0, 1.0])
    vis = vis + obj_shift * gt[..., None]
    vis = vis + rng.normal(0, cfg.noise_sigma / 2, vis.shape)
    # infrared: dark smooth background, hot objects, sensor noise
    bg = 0.15 + 0.15 * fractal_noise(size, rng, octaves=2)
    ir = bg + cfg.ir_hotspot_gain * ndimage.gaussian_filter(gt.astype(np.float64), 1.0)
    ir = ir + rng.normal(0, cfg.noise_sigma, ir.shape)
    vis = np.clip(vis, 0, 1)
    ir = np.clip(ir, 0, 1)[..., None]
    return MultimodalSample(vis, ir, gt.astype(np.float64), sample_id)


def _to_uint8(a: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(a * 255.0), 0, 255).astype(np.uint8)


def write_sample(sample: MultimodalSample, base: Path, subdirs: dict | None = None) -> None:
    subdirs = {**DEFAULT_SUBDIRS, **(subdirs or {})}
    for key in ("visible", "infrared", "mask"):
        (base / subdirs[key]).mkdir(parents=True, exist_ok=True)
    Image.fromarray(_to_uint8(sample.visible), "RGB").save(base / subdirs["visible"] / f"{sample.id}.png")
    Image.fromarray(_to_uint8(sample.infrared[..., 0]), "L").save(base / subdirs["infrared"] / f"{sample.id}.png")
    if sample.mask is not None:
        Image.fromarray(_to_uint8(sample.mask), "L").save(base / subdirs["mask"] / f"{sample.id}.png")


def generate_synthetic(cfg: SynthConfig, root, split: str = "train") -> DatasetManifest:
    """Write ``cfg.n_samples`` synthetic triples under ``root/split`` and return their manifest."""
    base = Path(root) / split
    rng = np.random.default_rng(cfg.seed)
    for k in range(cfg.n_samples):
        write_sample(synth_sample(cfg, rng, f"{k:05d}"), base)
    return load_manifest(root, split, resize=cfg.size, use_cache=False)
