import csv
import importlib

import numpy as np
import pytest

from helpers import tiny_config
from f2net.data import GenConfig, gen_synthetic, static_pairs
from f2net.model import F2Net, ModelConfig
from f2net.train import (
    TrainConfig,
    resume,
    seed_from_env,
    step_lr,
    train_dynamic_step,
    train_static_step,
    validation_j,
)

train = importlib.import_module("f2net.train").train

SMALL = dict(c2=4, c4=8, channels=8, center_channels=8, decoder_channels=8)


@pytest.fixture(scope="module")
def videos():
    return gen_synthetic(GenConfig(count=3, size=32, length=4), seed=11)


def small_model(seed=0, **kw):
    return F2Net(ModelConfig(**{**SMALL, **kw}), seed=seed)


def snapshot(model):
    return {k: v.data.copy() for k, v in model.params.items()}


def same_params(a, b):
    return set(a) == set(b) and all(a[k].tobytes() == b[k].tobytes() for k in a)


# -- config ---------------------------------------------------------------------------

def test_train_config_validation():
    TrainConfig()
    for bad in ({"batch_size": 0}, {"epochs": 3, "gt_center_epochs": 4}, {"static_loss": "lb_only"},
                {"momentum": 1.0}, {"clip_norm": -1.0}, {"lr_schedule": "cosine"}, {"precision": "float16"}):
        with pytest.raises(ValueError):
            TrainConfig(**bad)


def test_seed_env_override(monkeypatch):
    monkeypatch.setenv("F2NET_SEED", "17")
    assert seed_from_env(TrainConfig(seed=3)).seed == 17
    monkeypatch.delenv("F2NET_SEED")
    assert seed_from_env(TrainConfig(seed=3)).seed == 3


def test_learning_rate_schedule():
    cfg = TrainConfig(lr=0.1, lr_power=1.0)
    assert step_lr(cfg, 0, 10) == 0.1
    assert step_lr(cfg, 5, 10) == pytest.approx(0.05)
    assert step_lr(cfg, 10, 10) == 0.0
    assert step_lr(TrainConfig(lr=0.1, lr_schedule="constant"), 9, 10) == 0.1


# -- single steps ---------------------------------------------------------------------------

def test_zero_lr_step_leaves_params(videos):
    model = small_model()
    before = snapshot(model)
    train_static_step(model, static_pairs(videos)[:2], TrainConfig(lr=0.0))
    train_dynamic_step(model, [(videos[0], 2)], TrainConfig(lr=0.0), epoch=0)
    assert same_params(before, snapshot(model))


def test_static_step_is_deterministic(videos):
    images = static_pairs(videos)[:2]
    losses = []
    for _ in range(2):
        model = small_model(seed=4)
        losses.append([train_static_step(model, images, TrainConfig(lr=1e-3)) for _ in range(3)])
    assert losses[0] == losses[1]


def test_lf_only_static_step_freezes_the_head(videos):
    model = small_model()
    before = snapshot(model)
    out = train_static_step(model, static_pairs(videos)[:1], TrainConfig(lr=1e-2, static_loss="lf_only"))
    after = snapshot(model)
    assert out.loss_b == 0.0
    moved = {k for k in before if before[k].tobytes() != after[k].tobytes()}
    assert moved and all(k.startswith(("enc.", "center.")) for k in moved)


def test_static_overfit_single_image(videos):
    image = static_pairs(videos)[:1]
    model = small_model(seed=1)
    cfg = TrainConfig(lr=1e-3, lr_schedule="constant")
    first = train_static_step(model, image, cfg).total
    last = None
    for _ in range(199):
        last = train_static_step(model, image, cfg).total
    assert np.isfinite(last) and last < 0.5 * first


def test_center_schedule_switches_at_boundary(videos):
    cfg = TrainConfig(gt_center_epochs=2, epochs=4, lr=0.0)
    model = small_model()
    for epoch, expected in ((0, "gt"), (1, "gt"), (2, "predicted"), (3, "predicted")):
        seen = []
        train_dynamic_step(model, [(videos[1], 3)], cfg, epoch, probe=lambda s, c: seen.append(s))
        assert seen == [expected]


def test_train_reports_schedule_per_epoch(videos):
    seen = []
    cfg = TrainConfig(epochs=3, gt_center_epochs=1, batch_size=3, static_steps=0, lr=1e-4)
    train(small_model(), [], videos, cfg, probe=lambda s, c: seen.append(s))
    assert seen == ["gt"] * 3 + ["predicted"] * 6


# -- full loop ------------------------------------------------------------------------------

def test_zero_epochs_leave_params(videos):
    model = small_model()
    before = snapshot(model)
    assert train(model, static_pairs(videos), videos, TrainConfig(epochs=0, gt_center_epochs=0)) == []
    assert same_params(before, snapshot(model))


def test_empty_video_set_is_rejected():
    with pytest.raises(ValueError):
        train(small_model(), [], [], TrainConfig(epochs=1, gt_center_epochs=0))


def test_log_and_checkpoint_files(videos, tmp_path):
    ckpt, log_path = tmp_path / "m.f2nt", tmp_path / "log.csv"
    cfg = TrainConfig(epochs=2, gt_center_epochs=1, batch_size=2)
    history = train(small_model(), static_pairs(videos), videos, cfg, val_set=videos[:1],
                    log_path=log_path, checkpoint_path=ckpt)
    rows = list(csv.reader(open(log_path)))
    assert rows[0] == ["epoch", "phase", "loss_f", "loss_b", "val_J"]
    assert [r[:2] for r in rows[1:]] == [["0", "static"], ["0", "dynamic"], ["1", "static"], ["1", "dynamic"]]
    assert rows[2][4] != "" and rows[1][4] == ""
    assert [h.phase for h in history] == ["static", "dynamic"] * 2
    assert ckpt.exists() and (tmp_path / "m.f2nt.velocity").exists()
    assert resume(ckpt)[1] == 2


def test_identical_seeds_give_identical_checkpoints(videos, tmp_path):
    cfg = TrainConfig(epochs=2, gt_center_epochs=1, batch_size=2, seed=5)
    for name in ("a", "b"):
        train(small_model(seed=2), static_pairs(videos), videos, cfg, checkpoint_path=tmp_path / name)
    assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()


class Interrupt(Exception):
    pass


def test_resume_matches_uninterrupted_run(videos, tmp_path):
    cfg = TrainConfig(epochs=4, gt_center_epochs=2, batch_size=2, seed=9)
    static = static_pairs(videos)
    full = small_model(seed=3)
    train(full, static, videos, cfg, checkpoint_path=tmp_path / "full")

    calls = []

    def stop_in_epoch_two(source, center):
        calls.append(source)
        if len(calls) > 2 * 2 * 2:  # two dynamic steps of two samples per epoch
            raise Interrupt

    with pytest.raises(Interrupt):
        train(small_model(seed=3), static, videos, cfg, checkpoint_path=tmp_path / "part", probe=stop_in_epoch_two)
    model, start, velocity = resume(tmp_path / "part")
    assert start == 2 and velocity
    train(model, static, videos, cfg, start_epoch=start, checkpoint_path=tmp_path / "part", velocity=velocity)
    assert (tmp_path / "part").read_bytes() == (tmp_path / "full").read_bytes()


def test_loss_trends_down(videos):
    cfg = TrainConfig(epochs=12, gt_center_epochs=12, batch_size=3, static_steps=0, dynamic_steps=2, seed=1)
    history = train(small_model(seed=1), [], videos, cfg)
    totals = [h.loss_f + h.loss_b for h in history]
    assert all(np.isfinite(totals))
    assert np.median(totals[-5:]) < np.median(totals[:5])


def test_validation_j_of_empty_set_is_nan():
    assert np.isnan(validation_j(small_model(), []))


def test_float32_training_runs(videos):
    from f2net.tensor import set_default_dtype

    set_default_dtype(np.float32)
    try:
        model = F2Net(tiny_config(), seed=0)
        assert model.params["dec.conv1.w"].data.dtype == np.float32
        out = train_dynamic_step(model, [(videos[0], 1)], TrainConfig(precision="float32"), epoch=0)
        assert np.isfinite(out.total)
    finally:
        set_default_dtype(np.float64)
