"""Central finite-difference gradient checking."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Hashable, Optional, Sequence

import numpy as np

from .tensor import Tensor, backward, zero_grads


def numeric_grad(f: Callable[[], Tensor], x: Tensor, step: float = 1e-3,
                 indices: Optional[Sequence[int]] = None) -> np.ndarray:
    """(f(x+h) - f(x-h)) / 2h for each (selected) flat coordinate of ``x``."""
    flat = x.data.reshape(-1)
    out = np.zeros(flat.shape, dtype=np.float64)
    idx = range(flat.size) if indices is None else indices
    for i in idx:
        orig = flat[i]
        flat[i] = orig + step
        fp = f().item()
        flat[i] = orig - step
        fm = f().item()
        flat[i] = orig
        out[i] = (fp - fm) / (2.0 * step)
    return out.reshape(x.shape)


def grad_check(f: Callable[..., Tensor], x, step: float = 1e-3,
               indices: Optional[Sequence[int]] = None) -> float:
    """Max relative error between backward gradients and central differences.

    ``f`` maps the tensor(s) ``x`` to a scalar tensor. ``x`` may be a single
    tensor or a sequence; every one must have ``requires_grad`` set. The
    relative error per coordinate is ``|a - n| / max(|a|, |n|, 1e-8)``.
    ``indices`` restricts the finite-difference probes to those flat
    coordinates (applied to every input) to keep large checks affordable.
    """
    inputs = [x] if isinstance(x, Tensor) else list(x)

    def call():
        return f(*inputs) if not isinstance(x, Tensor) else f(x)

    zero_grads(inputs)
    loss = call()
    backward(loss)
    worst = 0.0
    for t in inputs:
        analytic = np.zeros(t.shape) if t.grad is None else t.grad.astype(np.float64)
        numeric = numeric_grad(call, t, step, indices)
        sel = slice(None) if indices is None else np.asarray(indices)
        a = analytic.reshape(-1)[sel]
        n = numeric.reshape(-1)[sel]
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)
        if a.size:
            worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    zero_grads(inputs)
    return worst


@dataclass
class CheckReport:
    max_rel_error: float
    checked: int
    skipped: int        # coordinates whose probes changed the activation pattern
    worst: Optional[tuple] = None   # (input index, flat index, analytic, numeric)


def grad_check_smooth(f: Callable[..., Tensor], inputs: Sequence[Tensor], pattern: Callable[[], Hashable],
                      step: float = 1e-3) -> CheckReport:
    """Like :func:`grad_check` but skips coordinates where ``f`` is not smooth.

    ``pattern()`` is read right after each evaluation of ``f`` and should
    summarise every piecewise choice the evaluation made (ReLU masks, clamp
    regions). A coordinate whose +h or -h probe yields a different pattern
    than the base point straddles a kink; central differences are
    meaningless there, so it is counted as skipped instead of compared.
    """
    inputs = list(inputs)
    zero_grads(inputs)
    loss = f(*inputs)
    base = pattern()
    backward(loss)
    analytic = [np.zeros(t.shape) if t.grad is None else t.grad.astype(np.float64) for t in inputs]
    zero_grads(inputs)
    report = CheckReport(0.0, 0, 0)
    for k, t in enumerate(inputs):
        flat = t.data.reshape(-1)
        a_flat = analytic[k].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = f(*inputs).item()
            same = pattern() == base
            flat[i] = orig - step
            fm = f(*inputs).item()
            same = same and pattern() == base
            flat[i] = orig
            if not same:
                report.skipped += 1
                continue
            a = float(a_flat[i])
            n = (fp - fm) / (2.0 * step)
            err = abs(a - n) / max(abs(a), abs(n), 1e-8)
            report.checked += 1
            if err > report.max_rel_error or report.worst is None:
                report.max_rel_error = max(err, report.max_rel_error)
                if err >= report.max_rel_error:
                    report.worst = (k, i, a, n)
    return report
