"""Center-guided non-local appearance matching.

The current-frame keys are weighted by a gaussian prior around the object
center before the softmax affinity is formed, so the diffused features are
pulled toward pixels that resemble the foreground.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from . import ops
from .center import gaussian, round_point
from .tensor import ShapeError, Tensor


@dataclass
class GaussMap:
    values: Tensor  # h x w x 1
    stride: int
    center: Tuple[int, int]
    sigma: float


@dataclass
class MatchFlows:
    original: Tensor
    intra: Tensor
    inter: Tensor

    def as_list(self):
        return [self.original, self.intra, self.inter]


def default_sigma_match(shape) -> float:
    h, w = shape[:2]
    return 0.15 * min(h, w)


def gauss_map(center, shape, sigma: float, stride: int = 8) -> GaussMap:
    """Gaussian prior on an ``h x w`` grid, exactly 1 at the (rounded) center."""
    values = Tensor(gaussian(center, shape, sigma))
    return GaussMap(values=values, stride=stride, center=round_point(center), sigma=float(sigma))


def uniform_map(shape, stride: int = 8) -> GaussMap:
    h, w = shape[:2]
    return GaussMap(values=Tensor(np.ones((h, w, 1))), stride=stride,
                    center=(w // 2, h // 2), sigma=math.inf)


def guided_correlation(query: Tensor, keys: Tensor, prior: Tensor) -> Tensor:
    """Row-stochastic ``N x N`` affinity ``Softmax(query (keys * prior)^T / sqrt(C))``."""
    if query.ndim != 2 or query.shape != keys.shape:
        raise ShapeError(f"guided_correlation: query {query.shape} vs keys {keys.shape}")
    if prior.shape != (keys.shape[0], 1):
        raise ShapeError(f"guided_correlation: prior {prior.shape} vs keys {keys.shape}")
    c = keys.shape[1]
    weighted = ops.mul(keys, prior)
    logits = ops.scale(ops.matmul(query, ops.transpose(weighted)), 1.0 / math.sqrt(c))
    return ops.softmax(logits, axis=-1)


def diffuse(m: Tensor, values: Tensor) -> Tensor:
    if m.ndim != 2 or m.shape[0] != m.shape[1] or m.shape[1] != values.shape[0]:
        raise ShapeError(f"diffuse: affinity {m.shape} vs values {values.shape}")
    return ops.matmul(m, values)


def run_matching(v0: Tensor, vt: Tensor, prior: Optional[GaussMap] = None) -> MatchFlows:
    """Intra- and inter-frame diffusion of ``vt`` under a spatial prior.

    ``prior`` is a stride-8 :class:`GaussMap`; ``None`` means a uniform prior,
    which reduces both matchings to plain non-local affinities.
    """
    if v0.shape != vt.shape or vt.ndim != 3:
        raise ShapeError(f"run_matching: reference {v0.shape} vs current {vt.shape}")
    h, w, c = vt.shape
    if prior is None:
        prior = uniform_map((h, w))
    if prior.values.shape != (h, w, 1):
        raise ShapeError(f"run_matching: prior {prior.values.shape} vs features {vt.shape}")
    n = h * w
    vt_flat = ops.reshape(vt, (n, c))
    v0_flat = ops.reshape(v0, (n, c))
    g_flat = ops.reshape(prior.values, (n, 1))
    m_intra = guided_correlation(vt_flat, vt_flat, g_flat)
    m_inter = guided_correlation(v0_flat, vt_flat, g_flat)
    intra = ops.reshape(diffuse(m_intra, vt_flat), (h, w, c))
    inter = ops.reshape(diffuse(m_inter, vt_flat), (h, w, c))
    return MatchFlows(original=vt, intra=intra, inter=inter)


def match_grid_center(center_q, stride_ratio: int = 2) -> Tuple[int, int]:
    """Map a quarter-resolution cell to the stride-8 cell that contains it."""
    x, y = round_point(center_q)
    return x // stride_ratio, y // stride_ratio
