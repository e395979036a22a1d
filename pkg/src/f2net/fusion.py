"""Dynamic information fusion of the three matched flows, decoder and losses."""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Mapping, Sequence

import numpy as np

from . import ops
from .tensor import ShapeError, Tensor, make_op

FUSION_MODES = ("concat", "SA", "CA", "SCA", "CSA")
BCE_EPS = 1e-6


@dataclass
class MaskLogits:
    logits: Tensor  # H x W x 1, pre-sigmoid
    prob: Tensor    # sigmoid(logits), the soft mask R_t

    def binary(self, threshold: float = 0.5) -> np.ndarray:
        return self.prob.data[:, :, 0] > threshold


def fuse_sum(flows: Sequence[Tensor]) -> Tensor:
    out = flows[0]
    for f in flows[1:]:
        if f.shape != out.shape:
            raise ShapeError(f"fuse_sum: flow shapes {[t.shape for t in flows]} differ")
        out = ops.add(out, f)
    return out


def channel_gates(flows: Sequence[Tensor], p: Mapping[str, Tensor]) -> List[Tensor]:
    """Per-channel softmax weights ``W_i`` (each ``1 x 1 x C``) over the flows.

    Squeeze the summed flows by global average pooling, pass through a shared
    guidance FC + ReLU, then one FC per flow gives the logits ``Z_i``.
    """
    squeezed = ops.global_avg_pool(fuse_sum(flows))
    guide = ops.relu(ops.fully_connected(squeezed, p["ca.guide.w"], p["ca.guide.b"]))
    logits = [ops.fully_connected(guide, p[f"ca.z{i}.w"], p[f"ca.z{i}.b"]) for i in range(len(flows))]
    return gate_softmax(logits)


def gate_softmax(logits: Sequence[Tensor]) -> List[Tensor]:
    """Softmax across flows independently for each channel."""
    stacked = ops.softmax(ops.concat(list(logits), axis=0), axis=0)
    return [ops.slice(stacked, 0, i, i + 1) for i in range(len(logits))]


def channel_attention(flows: Sequence[Tensor], p: Mapping[str, Tensor]) -> List[Tensor]:
    gates = channel_gates(flows, p)
    return [ops.mul(f, w) for f, w in zip(flows, gates)]


def spatial_weights(flows: Sequence[Tensor], p: Mapping[str, Tensor]) -> List[Tensor]:
    """Per-pixel softmax weights ``alpha_i`` (each ``H x W x 1``) over the flows."""
    scores = ops.conv2d(fuse_sum(flows), p["sa.w"], p["sa.b"])
    alphas = ops.softmax(scores, axis=2)
    return [ops.slice(alphas, 2, i, i + 1) for i in range(len(flows))]


def spatial_gate(flows: Sequence[Tensor], p: Mapping[str, Tensor]) -> List[Tensor]:
    return [ops.mul(f, a) for f, a in zip(flows, spatial_weights(flows, p))]


def spatial_attention(flows: Sequence[Tensor], p: Mapping[str, Tensor]) -> Tensor:
    return fuse_sum(spatial_gate(flows, p))


def fuse(flows: Sequence[Tensor], mode: str, p: Mapping[str, Tensor]) -> Tensor:
    """Aggregate the flows into one ``h x w x C`` map according to ``mode``.

    ``concat`` is a channel concatenation followed by a 1x1 conv. ``SA`` and
    ``CA`` apply one attention then sum; ``SCA``/``CSA`` feed the gated flows
    of the first attention into the second.
    """
    if mode not in FUSION_MODES:
        raise ValueError(f"unknown fusion mode {mode!r}; expected one of {FUSION_MODES}")
    flows = list(flows)
    if mode == "concat":
        return ops.conv2d(ops.concat(flows, axis=2), p["cat.w"], p["cat.b"])
    if mode == "SA":
        return spatial_attention(flows, p)
    if mode == "CA":
        return fuse_sum(channel_attention(flows, p))
    if mode == "SCA":
        return fuse_sum(channel_attention(spatial_gate(flows, p), p))
    return spatial_attention(channel_attention(flows, p), p)


def decode(fused: Tensor, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor, factor: int = 8) -> MaskLogits:
    """3x3 conv + ReLU, 1x1 conv to one channel, bilinear upsample, sigmoid."""
    hidden = ops.relu(ops.conv2d(fused, w1, b1, pad=w1.shape[0] // 2))
    coarse = ops.conv2d(hidden, w2, b2)
    logits = ops.bilinear_upsample(coarse, factor)
    return MaskLogits(logits=logits, prob=ops.sigmoid(logits))


def bce_loss(r: Tensor, target, eps: float = BCE_EPS) -> Tensor:
    """Summed binary cross entropy of probabilities ``r`` clamped to [eps, 1-eps].

    Outside the clamp range the gradient is taken at the clamp boundary rather
    than zeroed.
    """
    t = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=r.data.dtype)
    if t.shape != r.shape:
        raise ShapeError(f"bce_loss: prediction {r.shape} vs target {t.shape}")
    p = np.clip(r.data, eps, 1.0 - eps)
    ops.note_branch(np.stack([r.data < eps, r.data > 1.0 - eps]))
    total = -(t * np.log(p) + (1.0 - t) * np.log(1.0 - p)).sum()

    def bw(g):
        # evaluated at the clamped value so saturated pixels keep a gradient
        return (g * (-(t / p) + (1.0 - t) / (1.0 - p)),)

    return make_op(np.array(total, dtype=r.data.dtype), (r,), bw)


def total_loss(loss_f: Tensor, loss_b: Tensor) -> Tensor:
    return ops.add(loss_f, loss_b)
