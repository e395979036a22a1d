"""Shared fixtures-as-functions for the model, training and acceptance tests."""

from __future__ import annotations

import numpy as np

from f2net import ops
from f2net.gradcheck import grad_check_smooth
from f2net.model import F2Net, ModelConfig
from f2net.tensor import Tensor

TINY = dict(c2=4, c4=4, channels=4, center_channels=4, decoder_channels=4)


def tiny_config(**overrides) -> ModelConfig:
    return ModelConfig(**{**TINY, **overrides})


def composed_check(seed: int, fusion: str = "CSA", step: float = 1e-3):
    """Finite-difference check of every parameter of a tiny model on 8x8 frames.

    The objective is a fixed random projection of the heatmap and mask
    logits, so its magnitude stays O(1) and round-off in the differences stays
    far below the 1e-4 tolerance. Coordinates whose probes flip a ReLU mask
    are reported as skipped.
    """
    rng = np.random.default_rng(seed)
    model = F2Net(tiny_config(fusion=fusion), seed=seed)
    f0, f1 = rng.uniform(size=(8, 8, 3)), rng.uniform(size=(8, 8, 3))
    g_prev = Tensor(rng.uniform(size=(2, 2, 1)))
    r_heat = Tensor(rng.normal(size=(2, 2, 1)))
    r_mask = Tensor(rng.normal(size=(8, 8, 1)) / 8.0)
    names = sorted(model.params)
    seen = []

    def objective(*values):
        model.params.update(zip(names, values))
        with ops.record_branches() as log:
            res = model.forward(f0, f1, g_prev=g_prev, center=(1, 0))
        seen[:] = [log]
        return ops.add(ops.sum(ops.mul(res.heatmap, r_heat)), ops.sum(ops.mul(res.mask.logits, r_mask)))

    def pattern():
        return b"".join(m.tobytes() for m in seen[0])

    return grad_check_smooth(objective, [model.params[n] for n in names], pattern, step=step)
