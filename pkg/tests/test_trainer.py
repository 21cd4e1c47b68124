import csv
import math

import numpy as np
import pytest

from reciptrack.assignment import SamplerConfig
from reciptrack.diffmath import NonFiniteError
from reciptrack.losses import LossConfig
from reciptrack.model import HeadConfig, init_params
from reciptrack.simulator import make_benchmark
from reciptrack import trainer
from reciptrack.trainer import (
    LOG_COLUMNS,
    TrainConfig,
    TrainingDiverged,
    load_checkpoint,
    loss_and_grads,
    lr_at,
    make_batch,
    overfit,
    sgd_step,
    train,
)

SMALL = HeadConfig(backbone_channels=[4, 4, 4], exemplar_size=16, search_size=48)


@pytest.fixture(scope="module")
def dataset():
    return [c.to_sequence() for c in make_benchmark(3, seed=11, frames=8, frame_size=(64, 64))]


def short_cfg(**kw):
    base = dict(epochs=4, warmup_epochs=1, steps_per_epoch=2, batch_size=2, lr_peak=0.01, freeze_epochs=2)
    base.update(kw)
    return TrainConfig(**base)


# -- schedule ---------------------------------------------------------------------------------


def test_lr_schedule_endpoints():
    cfg = TrainConfig()
    spe = cfg.steps_per_epoch
    assert lr_at(0, spe, cfg) == pytest.approx(1e-6, rel=1e-12)
    assert lr_at(5 * spe, spe, cfg) == pytest.approx(0.1, rel=1e-12)
    assert lr_at(cfg.total_steps - 1, spe, cfg) == pytest.approx(1e-4, rel=1e-12)


@pytest.mark.parametrize("mode", ["linear", "log"])
def test_lr_schedule_continuous_at_warmup_boundary(mode):
    cfg = TrainConfig(warmup_mode=mode)
    spe = cfg.steps_per_epoch
    w = cfg.warmup_epochs * spe
    before, at = lr_at(w - 1, spe, cfg), lr_at(w, spe, cfg)
    # one warm-up increment at most
    if mode == "linear":
        assert at - before == pytest.approx((cfg.lr_peak - cfg.lr_start) / w, rel=1e-9)
    else:
        assert math.log(at / before) == pytest.approx(math.log(cfg.lr_peak / cfg.lr_start) / w, rel=1e-9)


def test_lr_schedule_monotone_in_each_phase():
    cfg = TrainConfig()
    spe = cfg.steps_per_epoch
    w = cfg.warmup_epochs * spe
    lrs = np.array([lr_at(s, spe, cfg) for s in range(cfg.total_steps)])
    assert np.all(np.diff(lrs[:w + 1]) > 0)
    assert np.all(np.diff(lrs[w:]) < 0)


def test_lr_rejects_negative_step():
    with pytest.raises(ValueError):
        lr_at(-1, 10, TrainConfig())


@pytest.mark.parametrize(
    "kwargs",
    [dict(epochs=0), dict(warmup_epochs=20), dict(freeze_epochs=21), dict(lr_peak=0.0), dict(momentum=1.0),
     dict(warmup_mode="cubic")],
)
def test_invalid_train_configs(kwargs):
    with pytest.raises(ValueError):
        TrainConfig(**kwargs)


# -- optimizer ---------------------------------------------------------------------------------


def test_sgd_momentum_examples():
    p, v = {"w": np.array([0.0])}, {"w": np.array([0.0])}
    p, v = sgd_step(p, {"w": np.array([1.0])}, v, 1.0, 0.9)
    assert p["w"][0] == -1.0
    p, v = sgd_step(p, {"w": np.array([1.0])}, v, 1.0, 0.9)
    assert p["w"][0] == pytest.approx(-2.9, abs=1e-15)


def test_sgd_zero_gradient_without_momentum_is_identity():
    p = {"w": np.arange(3.0)}
    new, _ = sgd_step(p, {"w": np.zeros(3)}, {"w": np.zeros(3)}, 0.5, 0.9)
    assert np.array_equal(new["w"], p["w"])


def test_sgd_per_name_rates_and_untouched_names():
    p = {"a": np.ones(2), "b": np.ones(2)}
    v = {k: np.zeros(2) for k in p}
    new, _ = sgd_step(p, {"a": np.ones(2)}, v, {"a": 0.25}, 0.0)
    assert np.all(new["a"] == 0.75) and new["b"] is p["b"]


def test_sgd_non_finite_gradient_aborts_whole_step():
    p = {"a": np.ones(2), "b": np.ones(2)}
    v = {k: np.zeros(2) for k in p}
    with pytest.raises(NonFiniteError):
        sgd_step(p, {"a": np.ones(2), "b": np.array([1.0, np.nan])}, v, 0.1, 0.9)
    assert np.all(p["a"] == 1.0)


def test_sgd_shape_mismatch():
    with pytest.raises(ValueError):
        sgd_step({"a": np.ones(2)}, {"a": np.ones(3)}, {"a": np.zeros(2)}, 0.1, 0.9)


# -- training loop ---------------------------------------------------------------------------------


def test_fixed_batch_loss_decreases_at_small_rate(dataset):
    """20 plain gradient steps at lr 1e-3 on one batch; median over seeds is monotone."""
    sampler = SamplerConfig(exemplar_size=16, search_size=48)
    monotone = []
    for seed in range(5):
        rng = np.random.default_rng(seed)
        batch = make_batch(dataset, rng, 4, SMALL, sampler, 2.0)
        params = {k: t.data.copy() for k, t in init_params(SMALL, seed).items()}
        vel = {k: np.zeros_like(v) for k, v in params.items()}
        totals = []
        for step in range(20):
            bundle, grads = loss_and_grads(params, batch, SMALL, LossConfig(), step)
            totals.append(bundle.total.item())
            params, vel = sgd_step(params, grads, vel, 1e-3, 0.0)
        monotone.append(bool(np.all(np.diff(totals) < 0)))
    assert sum(monotone) >= 3, monotone


def test_freeze_keeps_backbone_fixed(dataset):
    cfg = short_cfg()
    init = init_params(SMALL, cfg.seed)
    frozen = train(dataset, cfg, SMALL, max_steps=cfg.freeze_steps)
    for k, t in frozen.params.items():
        if k.startswith("backbone."):
            assert np.array_equal(t.data, init[k].data), k
    assert any(not np.array_equal(t.data, init[k].data) for k, t in frozen.params.items() if k.startswith("cls_"))
    full = train(dataset, cfg, SMALL)
    assert any(not np.array_equal(full.params[k].data, init[k].data) for k in init if k.startswith("backbone."))


def test_training_is_deterministic(dataset):
    a = train(dataset, short_cfg(), SMALL)
    b = train(dataset, short_cfg(), SMALL)
    assert all(np.array_equal(a.params[k].data, b.params[k].data) for k in a.params)
    assert a.log == b.log


def test_resume_is_bit_exact(dataset, tmp_path):
    cfg = short_cfg(checkpoint_every=1)
    straight = train(dataset, cfg, SMALL, out_dir=tmp_path / "a")
    train(dataset, cfg, SMALL, out_dir=tmp_path / "b", max_steps=3)
    resumed = train(dataset, cfg, SMALL, out_dir=tmp_path / "b", resume=tmp_path / "b" / "checkpoint")
    assert resumed.steps == straight.steps == cfg.total_steps
    for k in straight.params:
        assert np.array_equal(straight.params[k].data, resumed.params[k].data), k
    assert (tmp_path / "a" / "train_log.csv").read_text() == (tmp_path / "b" / "train_log.csv").read_text()


def test_log_and_checkpoint_layout(dataset, tmp_path):
    cfg = short_cfg()
    res = train(dataset, cfg, SMALL, out_dir=tmp_path)
    with open(tmp_path / "train_log.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert tuple(rows[0]) == LOG_COLUMNS and len(rows) == cfg.total_steps
    ck = load_checkpoint(res.checkpoint)
    assert ck.step == cfg.total_steps and ck.seed == cfg.seed
    assert ck.manifest["config"]["model"]["search_size"] == 48
    assert set(ck.params) == set(res.params)


def test_missing_checkpoint_is_reported(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path)


def test_divergence_saves_last_good_state(dataset, tmp_path, monkeypatch):
    real = trainer.loss_and_grads

    def flaky(params, batch, model_cfg, loss_cfg, step=0, trainable=None):
        bundle, grads = real(params, batch, model_cfg, loss_cfg, step, trainable)
        if step == 2:
            grads = {k: np.full_like(g, np.inf) for k, g in grads.items()}
        return bundle, grads

    monkeypatch.setattr(trainer, "loss_and_grads", flaky)
    with pytest.raises(TrainingDiverged) as info:
        train(dataset, short_cfg(), SMALL, out_dir=tmp_path)
    assert info.value.step == 2
    assert load_checkpoint(info.value.checkpoint).step == 2


def test_sampler_model_size_mismatch(dataset):
    with pytest.raises(ValueError):
        train(dataset, short_cfg(), SMALL, sampler_cfg=SamplerConfig(exemplar_size=32, search_size=64))


def test_overfit_without_links_reaches_ninety_percent():
    seq = make_benchmark(1, seed=1)[0].to_sequence()
    cfg = LossConfig(reciprocal=False, localization=False)
    reductions = [overfit(seq, steps=200, seed=s, loss_cfg=cfg).reduction for s in range(3)]
    assert np.median(reductions) >= 0.9, reductions


def test_overfit_needs_two_windows():
    seq = make_benchmark(1, seed=0, frames=4, frame_size=(64, 64))[0].to_sequence()
    with pytest.raises(ValueError):
        overfit(seq, steps=10)
