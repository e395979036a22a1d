"""Center prediction branch: heatmap estimation and center-point selection.

All maps are quarter-resolution, channel-last ``h x w x 1``. Points are
``(x, y)`` pairs with ``x`` the column and ``y`` the row.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.ndimage import maximum_filter

from . import ops
from .tensor import ShapeError, Tensor, make_op

Point = Tuple[float, float]
Candidate = Tuple[Tuple[int, int], float]

LOSS_EPS = 1e-6


@dataclass
class CenterConfig:
    k: int = 5
    n: int = 10
    nms_window: int = 3
    sigma_gt: Optional[float] = None  # None -> default_sigma_gt(grid)

    def __post_init__(self):
        if self.k < 1 or self.n < 1:
            raise ValueError("CenterConfig: k and n must be >= 1")
        if self.nms_window < 1 or self.nms_window % 2 == 0:
            raise ValueError("CenterConfig: nms_window must be a positive odd number")

    def sigma_for(self, shape) -> float:
        return self.sigma_gt if self.sigma_gt is not None else default_sigma_gt(shape)


def default_sigma_gt(shape) -> float:
    h, w = shape[:2]
    return max(2.0, 0.1 * min(h, w))


@dataclass
class CenterTrack:
    """Ordered history of selected centers, one per processed frame."""

    n: int = 10
    centers: List[Point] = field(default_factory=list)

    def append(self, point: Point) -> None:
        self.centers.append((float(point[0]), float(point[1])))

    def predict(self) -> Point:
        return motion_predict(self.centers, self.n)

    def __len__(self) -> int:
        return len(self.centers)


# -- heatmap estimation ----------------------------------------------------

def upsample_merge(pyramid, proj8: Tensor, proj4: Tensor) -> Tensor:
    """Merge stride-8 and stride-4 features into the stride-4 map ``U_t``.

    Both levels go through bias-free 1x1 projections to ``D`` channels; the
    deeper one is upsampled x2 and added to the shallower one.
    """
    level8 = getattr(pyramid, "level8", None)
    level4 = getattr(pyramid, "level4", None)
    if level8 is None or level4 is None:
        raise ValueError("upsample_merge: pyramid must provide level8 and level4 features")
    deep = ops.conv2d(level8, proj8)
    skip = ops.conv2d(level4, proj4)
    if deep.shape[0] * 2 != skip.shape[0] or deep.shape[1] * 2 != skip.shape[1]:
        raise ShapeError(f"upsample_merge: level8 {level8.shape} is not half of level4 {level4.shape}")
    return ops.add(ops.bilinear_upsample(deep, 2), skip)


def prior_scale_bias(u: Tensor, g_prev: Tensor, w_scale: Tensor, b_scale: Tensor,
                     w_bias: Tensor, b_bias: Tensor) -> Tuple[Tensor, Tensor]:
    """Scale and bias logits ``S`` and ``b``, two independent convs over [U, G_prev]."""
    if g_prev.shape != (u.shape[0], u.shape[1], 1):
        raise ShapeError(f"modulate_prior: prior {g_prev.shape} does not match features {u.shape}")
    joint = ops.concat([u, g_prev], axis=2)
    s = ops.conv2d(joint, w_scale, b_scale, pad=w_scale.shape[0] // 2)
    b = ops.conv2d(joint, w_bias, b_bias, pad=w_bias.shape[0] // 2)
    return s, b


def modulate_prior(u: Tensor, g_prev: Tensor, w_scale: Tensor, b_scale: Tensor,
                   w_bias: Tensor, b_bias: Tensor) -> Tensor:
    """``Sigmoid(S) * G_prev + Sigmoid(b)``."""
    s, b = prior_scale_bias(u, g_prev, w_scale, b_scale, w_bias, b_bias)
    return ops.add(ops.mul(ops.sigmoid(s), g_prev), ops.sigmoid(b))


def semantic_heatmap(u: Tensor, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor) -> Tensor:
    """3x3 conv + ReLU then 1x1 conv; returns pre-sigmoid logits."""
    hidden = ops.relu(ops.conv2d(u, w1, b1, pad=w1.shape[0] // 2))
    return ops.conv2d(hidden, w2, b2)


def combine_heatmap(g_hat: Tensor, f: Tensor) -> Tensor:
    if g_hat.shape != f.shape:
        raise ShapeError(f"combine_heatmap: {g_hat.shape} vs {f.shape}")
    return ops.sigmoid(ops.add(g_hat, f))


# -- candidate selection ---------------------------------------------------

def _as_map(h) -> np.ndarray:
    arr = h.data if isinstance(h, Tensor) else np.asarray(h, dtype=np.float64)
    if arr.ndim == 3:
        arr = arr[:, :, 0]
    if arr.ndim != 2:
        raise ShapeError(f"expected a single-channel map, got shape {arr.shape}")
    return arr


def topk_nms(h, k: int, window: int = 3) -> List[Candidate]:
    """Top-``k`` local maxima of a heatmap, best first.

    A pixel survives if it equals the maximum of its ``window`` neighbourhood
    and no earlier pixel (row-major) in that neighbourhood shares the value.
    Ties in score are ordered by ``(y, x)``.
    """
    if k < 1:
        raise ValueError("topk_nms: k must be >= 1")
    m = _as_map(h)
    rows, cols = m.shape
    r = window // 2
    pooled = maximum_filter(m, size=window, mode="constant", cval=-np.inf)
    peaks = []
    for y, x in zip(*np.nonzero(m == pooled)):
        v = m[y, x]
        block = m[max(0, y - r):y + 1, max(0, x - r):min(cols, x + r + 1)]
        # entries in the window that precede (y, x) in row-major order
        earlier = block[:-1].ravel().tolist() + block[-1, :x - max(0, x - r)].tolist()
        if v in earlier:
            continue
        peaks.append(((int(x), int(y)), float(v)))
    peaks.sort(key=lambda c: (-c[1], c[0][1], c[0][0]))
    return peaks[:k]


def motion_predict(track: Sequence[Point], n: int) -> Point:
    """Coarse next center from the mean velocity over the last ``n`` steps.

    With fewer than ``n + 1`` points all available steps are used; a single
    point predicts itself.
    """
    pts = track.centers if isinstance(track, CenterTrack) else list(track)
    if not pts:
        raise ValueError("motion_predict: empty track")
    if n < 1:
        raise ValueError("motion_predict: n must be >= 1")
    last = pts[-1]
    steps = min(n, len(pts) - 1)
    if steps == 0:
        return (float(last[0]), float(last[1]))
    first = pts[-1 - steps]
    return (last[0] + (last[0] - first[0]) / steps, last[1] + (last[1] - first[1]) / steps)


def select_center(candidates: Sequence[Candidate], p_t: Optional[Point] = None,
                  strategy: str = "motion") -> Tuple[int, int]:
    """Pick the candidate nearest to ``p_t`` (``motion``) or the best scored (``maximum``)."""
    if not candidates:
        raise ValueError("select_center: no candidates")
    if strategy == "maximum" or p_t is None:
        return min(candidates, key=lambda c: (-c[1], c[0][1], c[0][0]))[0]
    if strategy != "motion":
        raise ValueError(f"select_center: unknown strategy {strategy!r}")
    px, py = p_t

    def rank(c):
        (x, y), score = c
        return (math.hypot(x - px, y - py), -score, y, x)

    return min(candidates, key=rank)[0]


# -- targets and loss ------------------------------------------------------

def round_point(center: Point) -> Tuple[int, int]:
    return int(math.floor(center[0] + 0.5)), int(math.floor(center[1] + 0.5))


def gaussian(center: Point, shape, sigma: float) -> np.ndarray:
    """Unnormalized gaussian ``h x w x 1`` peaking at 1 on the rounded center cell."""
    h, w = shape[:2]
    cx, cy = round_point(center)
    if not (0 <= cx < w and 0 <= cy < h):
        raise ValueError(f"center {center} outside {h}x{w} grid")
    ys = np.arange(h, dtype=np.float64)[:, None]
    xs = np.arange(w, dtype=np.float64)[None, :]
    g = np.exp(-((xs - cx) ** 2 + (ys - cy) ** 2) / (2.0 * sigma * sigma))
    return g[:, :, None]


def gt_heatmap(center: Point, shape, sigma: float) -> np.ndarray:
    return gaussian(center, shape, sigma)


def focal_loss(h: Tensor, target, alpha: float = 2.0, beta: float = 4.0,
               eps: float = LOSS_EPS) -> Tensor:
    """Penalty-reduced pixel focal loss, summed over pixels (non-negative).

    Pixels whose target is exactly 1 use ``-(1-H)^a log H``; all others use
    ``-(1-T)^b H^a log(1-H)``. ``H`` is clamped to ``[eps, 1-eps]``.
    """
    t = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=h.data.dtype)
    if t.shape != h.shape:
        raise ShapeError(f"focal_loss: heatmap {h.shape} vs target {t.shape}")
    p = np.clip(h.data, eps, 1.0 - eps)
    ops.note_branch(np.stack([h.data < eps, h.data > 1.0 - eps]))
    pos = t == 1.0
    neg_w = (1.0 - t) ** beta
    lp = -((1.0 - p) ** alpha) * np.log(p)
    ln = -neg_w * (p ** alpha) * np.log(1.0 - p)
    total = np.where(pos, lp, ln).sum()

    def bw(g):
        dp = alpha * (1.0 - p) ** (alpha - 1.0) * np.log(p) - (1.0 - p) ** alpha / p
        dn = -neg_w * (alpha * p ** (alpha - 1.0) * np.log(1.0 - p) - p ** alpha / (1.0 - p))
        # taken at the clamped value, as in bce_loss
        return (g * np.where(pos, dp, dn),)

    return make_op(np.array(total, dtype=h.data.dtype), (h,), bw)
