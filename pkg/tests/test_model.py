import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from reciptrack import checks
from reciptrack.diffmath import DimensionError, Tape, Tensor, no_tape
from reciptrack.losses import LossConfig, TargetBatch, head_loss
from reciptrack.assignment import assign
from reciptrack.geometry import Box
from reciptrack.model import (
    HeadConfig,
    count_params,
    extract_features,
    forward,
    forward_head,
    head_output_channels,
    _xcorr,
    init_params,
)

CFG = HeadConfig()


def images(rng, n=None, size=64):
    shape = (size, size, 3) if n is None else (n, size, size, 3)
    return rng.integers(0, 256, size=shape, dtype=np.uint8)


def test_default_shapes():
    rng = np.random.default_rng(0)
    p = init_params(CFG, 0)
    z = extract_features(images(rng, size=32), p, CFG)
    x = extract_features(images(rng, size=64), p, CFG)
    assert z.shape == (32, 4, 4) and x.shape == (32, 8, 8)
    out = forward_head(z, x, p, CFG)
    assert out.p_cls.shape == (5, 5) and out.p_loc.shape == (5, 5) and out.t_reg.shape == (4, 5, 5)
    assert CFG.score_size == 5


def test_batched_forward_matches_per_sample():
    rng = np.random.default_rng(1)
    p = init_params(CFG, 1)
    ex, se = images(rng, 3, 32), images(rng, 3, 64)
    with no_tape():
        batched = forward(ex, se, p, CFG)
        for i in range(3):
            single = forward(ex[i], se[i], p, CFG)
            assert np.allclose(batched.p_cls.data[i], single.p_cls.data, atol=1e-12)
            assert np.allclose(batched.t_reg.data[i], single.t_reg.data, atol=1e-10)


def test_same_image_through_both_paths_gives_identical_features():
    rng = np.random.default_rng(2)
    p = init_params(CFG, 2)
    img = images(rng, size=64)
    assert np.array_equal(extract_features(img, p, CFG).data, extract_features(img.copy(), p, CFG).data)


def test_zero_final_layers_give_half_probabilities_and_ln2_sizes():
    rng = np.random.default_rng(3)
    p = init_params(CFG, 3)
    for name in ("cls_head", "reg_head", "loc_head"):
        p[f"{name}.weight"] = Tensor(np.zeros(p[f"{name}.weight"].shape))
        p[f"{name}.bias"] = Tensor(np.zeros(p[f"{name}.bias"].shape))
    out = forward(images(rng, size=32), images(rng, size=64), p, CFG)
    assert np.all(out.p_cls.data == 0.5) and np.all(out.p_loc.data == 0.5)
    assert np.allclose(out.t_reg.data[:2], 8 * math.log(2), atol=1e-15)
    assert np.all(out.t_reg.data[2:] == 0)


def test_init_is_deterministic_and_has_small_prior():
    a, b = init_params(CFG, 7), init_params(CFG, 7)
    assert a.keys() == b.keys()
    assert all(np.array_equal(a[k].data, b[k].data) for k in a)
    assert not np.array_equal(init_params(CFG, 8)["cls_tower.0.weight"].data, a["cls_tower.0.weight"].data)


def test_initial_p_cls_mean_near_prior():
    means = []
    for seed in range(20):
        rng = np.random.default_rng(seed)
        out = forward(images(rng, size=32), images(rng, size=64), init_params(CFG, seed), CFG)
        means.append(out.p_cls.data.mean())
    assert 0.005 <= np.mean(means) <= 0.02


def test_anchor_free_head_is_five_times_smaller_than_five_anchors():
    assert head_output_channels(5) / head_output_channels() == 5
    assert count_params(init_params(CFG, 0)) > 0


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(-50, 50))
def test_output_ranges_for_any_parameters(seed, scale):
    rng = np.random.default_rng(seed)
    cfg = checks.TINY_MODEL
    p = init_params(cfg, seed)
    p["reg_head.bias"] = Tensor(p["reg_head.bias"].data + scale)
    p["cls_head.bias"] = Tensor(p["cls_head.bias"].data + scale / 5)
    out = forward(images(rng, size=4), images(rng, size=8), p, cfg)
    assert np.all(out.t_reg.data[:2] > 0)
    for prob in (out.p_cls.data, out.p_loc.data):
        assert np.all((prob > 0) & (prob < 1))


def test_correlation_is_translation_equivariant():
    rng = np.random.default_rng(4)
    z = Tensor(rng.normal(size=(4, 3, 3)))
    x = rng.normal(size=(4, 12, 12))
    shifted = np.roll(x, 1, axis=2)
    a = _xcorr(z, Tensor(x), False).data
    b = _xcorr(z, Tensor(shifted), False).data
    assert np.allclose(b[:, :, 1:], a[:, :, :-1], atol=1e-12)


def test_template_larger_than_search_rejected():
    p = init_params(CFG, 0)
    with pytest.raises(DimensionError):
        forward_head(Tensor(np.zeros((32, 9, 9))), Tensor(np.zeros((32, 8, 8))), p, CFG)


def test_image_extent_must_be_divisible_by_stride():
    with pytest.raises(DimensionError):
        extract_features(np.zeros((30, 30, 3), np.uint8), init_params(CFG, 0), CFG)


@pytest.mark.parametrize(
    "kwargs",
    [
        dict(total_stride=6),
        dict(search_size=32),
        dict(exemplar_size=30),
        dict(backbone_channels=[8, 8], total_stride=8),
    ],
)
def test_invalid_head_configs(kwargs):
    with pytest.raises(ValueError):
        HeadConfig(**kwargs)


def test_separate_xcorr_option_builds_adjust_layers():
    cfg = HeadConfig(separate_xcorr=True)
    p = init_params(cfg, 0)
    assert "adjust_cls.weight" in p and "adjust_reg.weight" in p
    rng = np.random.default_rng(0)
    out = forward(images(rng, size=32), images(rng, size=64), p, cfg)
    assert out.p_cls.shape == (5, 5)


def test_every_parameter_gets_gradient_from_total_loss():
    cfg = HeadConfig(backbone_channels=[4, 4, 4], exemplar_size=16, search_size=48)
    rng = np.random.default_rng(5)
    p = init_params(cfg, 5)
    for k in ("cls_head.weight", "reg_head.weight", "loc_head.weight"):
        p[k] = Tensor(rng.normal(size=p[k].shape) * 0.3, requires_grad=True)
    grid = cfg.grid()
    cx, cy = grid.locations()[0][0, 2], grid.locations()[1][2, 0]
    gt = Box.from_center(cx + 1.3, cy - 0.7, 14, 12)
    lx, ly = grid.locations()
    tb = TargetBatch.from_label_maps([assign(gt, grid, 2.0)], [gt], lx, ly)
    with Tape() as tape:
        out = forward(images(rng, 1, 16), images(rng, 1, 48), p, cfg)
        bundle = head_loss(out, tb, LossConfig())
    tape.backward(bundle.total)
    # tower biases feed a per-channel normalization, which cancels them exactly
    dead = {k for k in p if "_tower." in k and k.endswith(".bias")}
    for k, t in p.items():
        if k in dead:
            assert np.max(np.abs(t.grad)) < 1e-9, k
        else:
            assert np.any(t.grad != 0), k


def test_tiny_model_gradcheck():
    assert checks.run_case("head.forward", seeds=3, tol=1e-4).passed
