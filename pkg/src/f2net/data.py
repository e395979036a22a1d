"""Synthetic video sequences and on-disk image layout.

Each sequence shows one textured, moving ellipse (the foreground object) on
a smooth noisy background. Scenario variants add a look-alike distractor
(``similarity``), a sweeping occluder bar (``occlusion``) or a gradual color
and texture drift (``appearance-change``).

Disk layout::

    ROOT/frames/SEQ/00000.png   24-bit RGB
    ROOT/masks/SEQ/00000.png    8-bit, 0 / 255
    ROOT/sequences.csv          name,scenario,seed,length
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

import numpy as np
from PIL import Image
from scipy.ndimage import zoom

SCENARIOS = ("similarity", "occlusion", "appearance-change", "plain")


class DataError(Exception):
    """Unreadable, malformed or inconsistent data on disk."""


@dataclass
class GenConfig:
    count: int = 20
    size: int = 64
    length: int = 8
    scenarios: Tuple[str, ...] = ("similarity", "occlusion", "appearance-change", "plain")
    static: bool = False  # freeze object motion

    def validate(self) -> None:
        if self.count < 1 or self.length < 1:
            raise ValueError("GenConfig: count and length must be >= 1")
        if self.size < 16 or self.size % 8:
            raise ValueError(f"GenConfig: size must be a multiple of 8 and >= 16, got {self.size}")
        bad = [s for s in self.scenarios if s not in SCENARIOS]
        if bad or not self.scenarios:
            raise ValueError(f"GenConfig: unknown scenarios {bad}; choose from {SCENARIOS}")


@dataclass
class SequenceSample:
    name: str
    frames: List[np.ndarray]          # H x W x 3 floats in [0, 1]
    gt_masks: List[np.ndarray]        # H x W bool
    gt_centers: List[Tuple[float, float]]  # mask centroids (x, y), full resolution
    scenario: str
    seed: int

    def __len__(self) -> int:
        return len(self.frames)

    def grid_centers(self, stride: int = 4) -> List[Tuple[int, int]]:
        h, w = self.gt_masks[0].shape
        return [to_grid(c, stride, (h // stride, w // stride)) for c in self.gt_centers]


def centroid(mask: np.ndarray) -> Tuple[float, float]:
    ys, xs = np.nonzero(mask)
    if xs.size == 0:
        raise ValueError("centroid of an empty mask")
    return float(xs.mean()), float(ys.mean())


def to_grid(point, stride: int, grid_shape) -> Tuple[int, int]:
    """Nearest stride-``stride`` cell to a full-resolution point (cell i is centred at stride*i + (stride-1)/2)."""
    gh, gw = grid_shape
    off = (stride - 1) / 2.0
    gx = int(math.floor((point[0] - off) / stride + 0.5))
    gy = int(math.floor((point[1] - off) / stride + 0.5))
    return min(max(gx, 0), gw - 1), min(max(gy, 0), gh - 1)


# -- generation ------------------------------------------------------------

def _background(rng, size: int) -> np.ndarray:
    coarse = rng.uniform(0.15, 0.85, size=(size // 8 + 1, size // 8 + 1, 3))
    smooth = zoom(coarse, (size / coarse.shape[0], size / coarse.shape[1], 1), order=1)[:size, :size]
    return np.clip(smooth + rng.normal(0.0, 0.04, size=(size, size, 3)), 0.0, 1.0)


def _ellipse_mask(size: int, cx: float, cy: float, a: float, b: float, theta: float) -> np.ndarray:
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    dx, dy = xs - cx, ys - cy
    c, s = math.cos(theta), math.sin(theta)
    u = (dx * c + dy * s) / a
    v = (-dx * s + dy * c) / b
    return u * u + v * v <= 1.0


def _stripes(size: int, color_a, color_b, freq: float, phase: float, angle: float) -> np.ndarray:
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    wave = 0.5 * (1.0 + np.sin(freq * (xs * math.cos(angle) + ys * math.sin(angle)) + phase))
    ca, cb = np.asarray(color_a), np.asarray(color_b)
    return ca[None, None, :] + (cb - ca)[None, None, :] * wave[:, :, None]


class _Mover:
    """Ellipse that moves at constant velocity and bounces inside the frame."""

    def __init__(self, rng, size: int, static: bool):
        self.size = size
        self.a = rng.uniform(0.14, 0.22) * size
        self.b = rng.uniform(0.14, 0.22) * size
        self.theta = rng.uniform(0, math.pi)
        self.margin = max(self.a, self.b) + 1.0
        self.x = rng.uniform(self.margin, size - self.margin)
        self.y = rng.uniform(self.margin, size - self.margin)
        speed = 0.0 if static else rng.uniform(0.03, 0.06) * size
        heading = rng.uniform(0, 2 * math.pi)
        self.vx, self.vy = speed * math.cos(heading), speed * math.sin(heading)

    def step(self) -> None:
        lo, hi = self.margin, self.size - self.margin
        self.x += self.vx
        self.y += self.vy
        if not lo <= self.x <= hi:
            self.vx = -self.vx
            self.x = min(max(self.x, lo), hi)
        if not lo <= self.y <= hi:
            self.vy = -self.vy
            self.y = min(max(self.y, lo), hi)

    def mask(self) -> np.ndarray:
        return _ellipse_mask(self.size, self.x, self.y, self.a, self.b, self.theta)


def _generate_one(name: str, scenario: str, seed: int, cfg: GenConfig) -> SequenceSample:
    rng = np.random.default_rng(seed)
    size = cfg.size
    bg = _background(rng, size)
    obj = _Mover(rng, size, cfg.static)
    color_a = rng.uniform(0.6, 1.0, size=3) * rng.permutation([1.0, 0.35, 0.1])
    color_b = color_a * 0.35
    freq = rng.uniform(0.6, 1.0)
    angle = rng.uniform(0, math.pi)
    target_a = color_a[::-1].copy()
    target_freq = freq * 0.5

    distractor = None
    if scenario == "similarity":
        distractor = _Mover(rng, size, cfg.static)
        d_shift = rng.uniform(-0.12, 0.12, size=3)
        d_colors = (np.clip(color_a + d_shift, 0, 1), np.clip(color_b + d_shift, 0, 1))
    bar_w = 0.12 * size
    bar_color = rng.uniform(0.2, 0.5, size=3)

    frames, masks, centers = [], [], []
    for t in range(cfg.length):
        frac = t / max(cfg.length - 1, 1)
        img = bg.copy()
        if distractor is not None:
            dm = distractor.mask()
            tex = _stripes(size, d_colors[0], d_colors[1], freq, 0.0, angle)
            img[dm] = tex[dm]
        if scenario == "appearance-change":
            ca = (1 - frac) * color_a + frac * target_a
            tex = _stripes(size, ca, ca * 0.35, (1 - frac) * freq + frac * target_freq, 0.0, angle)
        else:
            tex = _stripes(size, color_a, color_b, freq, 0.0, angle)
        fm = obj.mask()
        img[fm] = tex[fm]
        mask = fm.copy()
        if scenario == "occlusion":
            left = -bar_w + frac * (size + bar_w)
            cols = np.arange(size)
            bar = (cols >= left) & (cols < left + bar_w)
            occluded = np.zeros_like(mask)
            occluded[:, bar] = True
            img[occluded] = bar_color
            mask &= ~occluded
        frames.append(np.clip(img, 0.0, 1.0))
        masks.append(mask)
        centers.append(centroid(mask))
        obj.step()
        if distractor is not None:
            distractor.step()
    return SequenceSample(name=name, frames=frames, gt_masks=masks, gt_centers=centers,
                          scenario=scenario, seed=seed)


def gen_synthetic(cfg: GenConfig, seed: int = 0) -> List[SequenceSample]:
    """Deterministic list of ``cfg.count`` sequences, scenarios assigned round-robin."""
    cfg.validate()
    out = []
    for i in range(cfg.count):
        scenario = cfg.scenarios[i % len(cfg.scenarios)]
        sub_seed = int(np.random.SeedSequence([seed, i]).generate_state(1)[0])
        out.append(_generate_one(f"{scenario}-{i:03d}", scenario, sub_seed, cfg))
    return out


def static_pairs(samples: Sequence[SequenceSample]) -> List[Tuple[np.ndarray, np.ndarray]]:
    """Every (frame, mask) pair, usable as single saliency images."""
    return [(f, m) for s in samples for f, m in zip(s.frames, s.gt_masks)]


# -- image I/O -------------------------------------------------------------

def write_mask(path, mask: np.ndarray) -> None:
    m = np.asarray(mask)
    if m.ndim == 3:
        m = m[:, :, 0]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.where(m > 0.5 if m.dtype != bool else m, 255, 0).astype(np.uint8), mode="L").save(path)


def read_mask(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("L"))
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read mask {path}: {exc}") from exc
    return arr > 127


def write_heatmap_png(path, heatmap) -> None:
    """8-bit grayscale with linear [0, 1] -> [0, 255] scaling."""
    arr = heatmap.data if hasattr(heatmap, "data") and not isinstance(heatmap, np.ndarray) else np.asarray(heatmap)
    if arr.ndim == 3:
        arr = arr[:, :, 0]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.round(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8), mode="L").save(path)


def write_frame(path, frame: np.ndarray) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.round(np.clip(frame, 0, 1) * 255.0).astype(np.uint8), mode="RGB").save(path)


def read_frame(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read frame {path}: {exc}") from exc


def frame_name(index: int) -> str:
    return f"{index:05d}.png"


def save_dataset(root, samples: Sequence[SequenceSample]) -> None:
    root = Path(root)
    for s in samples:
        for t, (frame, mask) in enumerate(zip(s.frames, s.gt_masks)):
            write_frame(root / "frames" / s.name / frame_name(t), frame)
            write_mask(root / "masks" / s.name / frame_name(t), mask)
    with open(root / "sequences.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["name", "scenario", "seed", "length"])
        for s in samples:
            w.writerow([s.name, s.scenario, s.seed, len(s)])


def list_sequences(root, kind: str = "masks") -> List[str]:
    base = Path(root) / kind
    if not base.is_dir():
        raise DataError(f"{base} is not a directory")
    return sorted(p.name for p in base.iterdir() if p.is_dir())


def read_mask_sequence(root, name: str) -> List[np.ndarray]:
    files = sorted((Path(root) / "masks" / name).glob("*.png"))
    if not files:
        raise DataError(f"no masks for sequence {name} under {root}")
    return [read_mask(f) for f in files]


def read_frame_sequence(seq_dir) -> List[np.ndarray]:
    files = sorted(Path(seq_dir).glob("*.png"))
    if not files:
        raise DataError(f"no frames in {seq_dir}")
    return [read_frame(f) for f in files]


def load_dataset(root) -> List[SequenceSample]:
    """Read a dataset written by :func:`save_dataset` (centers recomputed from masks)."""
    root = Path(root)
    meta: Dict[str, Tuple[str, int]] = {}
    index = root / "sequences.csv"
    if index.exists():
        with open(index, newline="") as fh:
            for row in csv.DictReader(fh):
                meta[row["name"]] = (row["scenario"], int(row["seed"]))
    samples = []
    for name in list_sequences(root, "frames"):
        frames = read_frame_sequence(root / "frames" / name)
        masks = read_mask_sequence(root, name)
        if len(frames) != len(masks):
            raise DataError(f"sequence {name}: {len(frames)} frames but {len(masks)} masks")
        if any(not m.any() for m in masks):
            raise DataError(f"sequence {name}: empty ground-truth mask")
        scenario, seed = meta.get(name, ("plain", -1))
        samples.append(SequenceSample(name=name, frames=frames, gt_masks=masks,
                                      gt_centers=[centroid(m) for m in masks], scenario=scenario, seed=seed))
    if not samples:
        raise DataError(f"no sequences under {root}")
    return samples
