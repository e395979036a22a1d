"""Alternated static-image / dynamic-video SGD training with staged centers.

Every epoch interleaves dynamic steps (reference frame 0 paired with a random
frame of a training sequence) and static steps (a single image used as both
reference and current frame). Matching receives ground-truth centers for the
first ``gt_center_epochs`` epochs and predicted centers afterwards.

Randomness is drawn from ``default_rng([seed, epoch])``, so resuming at an
epoch boundary reproduces an uninterrupted run exactly.
"""

from __future__ import annotations

import csv
import logging
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .center import CenterTrack, focal_loss, gaussian, gt_heatmap
from .config import dump_flat, read_flat
from .data import SequenceSample, centroid, to_grid
from .fusion import bce_loss, total_loss
from .metrics import region_similarity
from .model import F2Net, load_checkpoint, read_container, save_checkpoint, write_container
from .optim import MomentumSGD
from .tensor import Tensor, backward

log = logging.getLogger(__name__)

ENCODER_AND_CENTER = ("enc.", "center.")


@dataclass
class TrainConfig:
    lr: float = 2.5e-4
    momentum: float = 0.9
    lr_schedule: str = "poly"   # or "constant"
    lr_power: float = 0.9
    clip_norm: float = 5000.0   # global gradient norm cap, 0 disables
    batch_size: int = 4
    epochs: int = 30
    gt_center_epochs: int = 20
    static_steps: int = 1   # static:dynamic alternation ratio per epoch
    dynamic_steps: int = 1
    seed: int = 0
    precision: str = "float64"
    static_loss: str = "full"   # or "lf_only"
    val_every: int = 1

    def __post_init__(self):
        if min(self.batch_size, self.static_steps + self.dynamic_steps, self.val_every) < 1:
            raise ValueError("TrainConfig: counts must be positive")
        if not 0 <= self.gt_center_epochs <= self.epochs:
            raise ValueError("TrainConfig: need 0 <= gt_center_epochs <= epochs")
        if self.static_loss not in ("full", "lf_only"):
            raise ValueError(f"static_loss must be 'full' or 'lf_only', got {self.static_loss!r}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.clip_norm < 0.0:
            raise ValueError(f"clip_norm must be >= 0, got {self.clip_norm}")
        if self.lr_schedule not in ("poly", "constant"):
            raise ValueError(f"lr_schedule must be 'poly' or 'constant', got {self.lr_schedule!r}")
        if self.precision not in ("float64", "float32"):
            raise ValueError(f"precision must be float64 or float32, got {self.precision!r}")


def seed_from_env(cfg: TrainConfig) -> TrainConfig:
    """Apply the ``F2NET_SEED`` environment override."""
    env = os.environ.get("F2NET_SEED")
    if env is not None and env.strip():
        cfg.seed = int(env)
    return cfg


@dataclass
class StepLosses:
    loss_f: float
    loss_b: float

    @property
    def total(self) -> float:
        return self.loss_f + self.loss_b


def _quarter(shape) -> Tuple[int, int]:
    return shape[0] // 4, shape[1] // 4


def _sample_losses(model: F2Net, frame0, frame_t, mask, center_q, g_prev, use_lb: bool,
                   track: Optional[CenterTrack] = None, use_gt_center: bool = True,
                   probe: Optional[Callable] = None):
    qshape = _quarter(frame_t.shape)
    sigma = model.config.center.sigma_for(qshape)
    res = model.forward(frame0, frame_t, g_prev=g_prev, track=track,
                        center=center_q if use_gt_center else None, probe=probe)
    lf = focal_loss(res.heatmap, gt_heatmap(center_q, qshape, sigma))
    if not use_lb:
        return lf, lf, None, res
    lb = bce_loss(res.mask.prob, mask.astype(np.float64)[:, :, None])
    return total_loss(lf, lb), lf, lb, res


def _optimizer(cfg: TrainConfig, opt: Optional[MomentumSGD]) -> MomentumSGD:
    return opt if opt is not None else MomentumSGD(cfg.lr, cfg.momentum, clip_norm=cfg.clip_norm)


def train_static_step(model: F2Net, images: Sequence[Tuple[np.ndarray, np.ndarray]], cfg: TrainConfig,
                      opt: Optional[MomentumSGD] = None) -> StepLosses:
    """One SGD step over a batch of saliency images (each used as both frames).

    The zero map is the previous prior and matching uses the mask centroid.
    With ``static_loss='lf_only'`` only the encoder and center branch move.
    """
    full = cfg.static_loss == "full"
    lf_sum = lb_sum = 0.0
    for image, mask in images:
        center_q = to_grid(centroid(mask), 4, _quarter(image.shape))
        loss, lf, lb, _ = _sample_losses(model, image, image, mask, center_q, None, full)
        backward(loss)
        lf_sum += lf.item()
        lb_sum += lb.item() if lb is not None else 0.0
    names = [n for n in model.params if full or n.startswith(ENCODER_AND_CENTER)]
    _optimizer(cfg, opt).step({n: model.params[n] for n in names})
    return StepLosses(lf_sum, lb_sum)


def train_dynamic_step(model: F2Net, pairs: Sequence[Tuple[SequenceSample, int]], cfg: TrainConfig, epoch: int,
                       probe: Optional[Callable] = None, opt: Optional[MomentumSGD] = None) -> StepLosses:
    """One SGD step on ``L_f + L_b`` over a batch of (sequence, frame index) pairs.

    The previous prior is the gauss map of the ground-truth center of frame
    ``t-1`` (zero map for ``t = 0``). Before ``gt_center_epochs`` matching
    sees the ground-truth center, afterwards the center selected from the
    predicted heatmap with the ground-truth history as motion track.
    """
    use_gt = epoch < cfg.gt_center_epochs
    lf_sum = lb_sum = 0.0
    for seq, t in pairs:
        qshape = _quarter(seq.frames[0].shape)
        grid = seq.grid_centers(4)
        g_prev = None
        if t > 0:
            g_prev = Tensor(gaussian(grid[t - 1], qshape, model.config.center.sigma_for(qshape)))
        track = None
        if not use_gt:
            track = CenterTrack(n=model.config.n, centers=[tuple(map(float, c)) for c in grid[:t]])

        def tagged(source, center):
            if probe is not None:
                probe("gt" if use_gt else "predicted", center)

        loss, lf, lb, _ = _sample_losses(model, seq.frames[0], seq.frames[t], seq.gt_masks[t], grid[t],
                                         g_prev, True, track=track, use_gt_center=use_gt, probe=tagged)
        backward(loss)
        lf_sum += lf.item()
        lb_sum += lb.item()
    _optimizer(cfg, opt).step(model.params)
    return StepLosses(lf_sum, lb_sum)


def predict_masks(model: F2Net, seq: SequenceSample) -> List[np.ndarray]:
    return [r.mask.binary() for r in model.segment_sequence(seq.frames)]


def validation_j(model: F2Net, sequences: Sequence[SequenceSample]) -> float:
    """Mean over sequences of the per-sequence mean J from full tracking inference."""
    if not sequences:
        return float("nan")
    per_seq = []
    for seq in sequences:
        preds = predict_masks(model, seq)
        per_seq.append(np.mean([region_similarity(p, g) for p, g in zip(preds, seq.gt_masks)]))
    return float(np.mean(per_seq))


@dataclass
class EpochLog:
    epoch: int
    phase: str
    loss_f: float
    loss_b: float
    val_j: Optional[float]


def step_lr(cfg: TrainConfig, step: int, total: int) -> float:
    """Learning rate for optimizer step ``step`` of ``total``: constant or polynomial decay."""
    if cfg.lr_schedule == "constant" or total <= 0:
        return cfg.lr
    return cfg.lr * (1.0 - min(step, total) / total) ** cfg.lr_power


def _steps_per_epoch(n_seq: int, batch: int, static_pool: int, cfg: TrainConfig) -> int:
    n_batches = -(-n_seq // batch)
    return n_batches * ((cfg.static_steps if static_pool else 0) + cfg.dynamic_steps)


def _epoch_plan(rng, n_seq: int, batch: int, static_pool: int, cfg: TrainConfig, lengths: Sequence[int]):
    order = rng.permutation(n_seq)
    batches = [order[i:i + batch] for i in range(0, n_seq, batch)]
    plan = []
    for b in batches:
        for _ in range(cfg.static_steps):
            if static_pool:
                plan.append(("static", rng.integers(0, static_pool, size=batch)))
        for _ in range(cfg.dynamic_steps):
            plan.append(("dynamic", [(int(i), int(rng.integers(0, lengths[i]))) for i in b]))
    return plan


def train(model: F2Net, static_set: Sequence[Tuple[np.ndarray, np.ndarray]], video_set: Sequence[SequenceSample],
          cfg: TrainConfig, val_set: Sequence[SequenceSample] = (), start_epoch: int = 0,
          log_path=None, checkpoint_path=None, probe: Optional[Callable] = None,
          velocity: Optional[Dict[str, np.ndarray]] = None) -> List[EpochLog]:
    """Train ``model`` in place for epochs ``start_epoch .. cfg.epochs - 1``.

    Appends ``epoch,phase,loss_f,loss_b,val_J`` rows to ``log_path`` and
    rewrites ``checkpoint_path`` after every epoch when given, together with
    the optimizer velocities (``CKPT.velocity``) and the next epoch
    (``CKPT.state``) so :func:`resume` can continue bit-exactly.
    """
    opt = MomentumSGD(cfg.lr, cfg.momentum, velocity, cfg.clip_norm)
    per_epoch = _steps_per_epoch(len(video_set), cfg.batch_size, len(static_set), cfg)
    total_steps = per_epoch * cfg.epochs
    if not video_set:
        raise ValueError("train: empty video dataset")
    history: List[EpochLog] = []
    lengths = [len(s) for s in video_set]
    log_file = None
    if log_path is not None:
        log_path = Path(log_path)
        new = not log_path.exists() or log_path.stat().st_size == 0
        log_path.parent.mkdir(parents=True, exist_ok=True)
        log_file = open(log_path, "a", newline="")
        if new:
            csv.writer(log_file).writerow(["epoch", "phase", "loss_f", "loss_b", "val_J"])
    try:
        for epoch in range(start_epoch, cfg.epochs):
            rng = np.random.default_rng([cfg.seed, epoch])
            sums = {"static": [0.0, 0.0, 0], "dynamic": [0.0, 0.0, 0]}
            plan = _epoch_plan(rng, len(video_set), cfg.batch_size, len(static_set), cfg, lengths)
            for j, (phase, items) in enumerate(plan):
                opt.lr = step_lr(cfg, epoch * per_epoch + j, total_steps)
                if phase == "static":
                    out = train_static_step(model, [static_set[i] for i in items], cfg, opt)
                else:
                    out = train_dynamic_step(model, [(video_set[i], t) for i, t in items], cfg, epoch, probe, opt)
                acc = sums[phase]
                acc[0] += out.loss_f
                acc[1] += out.loss_b
                acc[2] += 1
            val = None
            if val_set and ((epoch + 1) % cfg.val_every == 0 or epoch == cfg.epochs - 1):
                val = validation_j(model, val_set)
            for phase in ("static", "dynamic"):
                lf, lb, n = sums[phase]
                if n == 0:
                    continue
                entry = EpochLog(epoch, phase, lf / n, lb / n, val if phase == "dynamic" else None)
                history.append(entry)
                if log_file is not None:
                    csv.writer(log_file).writerow([
                        epoch, phase, repr(entry.loss_f), repr(entry.loss_b),
                        "" if entry.val_j is None else repr(entry.val_j)])
            if log_file is not None:
                log_file.flush()
            log.info("epoch %d: dynamic L_f=%.4g L_b=%.4g val_J=%s", epoch, sums["dynamic"][0] / max(sums["dynamic"][2], 1),
                     sums["dynamic"][1] / max(sums["dynamic"][2], 1), val)
            if checkpoint_path is not None:
                save_checkpoint(checkpoint_path, model)
                write_container(str(checkpoint_path) + ".velocity", "kind = velocity\n", opt.velocity)
                Path(str(checkpoint_path) + ".state").write_text(dump_flat({"epoch": epoch + 1, "seed": cfg.seed}))
    finally:
        if log_file is not None:
            log_file.close()
    return history


def resume(checkpoint_path) -> Tuple[F2Net, int, Dict[str, np.ndarray]]:
    """Model, next epoch and optimizer velocities saved by :func:`train`."""
    model = load_checkpoint(checkpoint_path)
    state = read_flat(str(checkpoint_path) + ".state")
    velocity_path = Path(str(checkpoint_path) + ".velocity")
    velocity = read_container(velocity_path)[1] if velocity_path.exists() else {}
    return model, int(state["epoch"]), velocity
