import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from reciptrack import checks
from reciptrack.diffmath import Tape, Tensor, no_tape, ops
from reciptrack.geometry import Box, encode
from reciptrack.losses import (
    LossConfig,
    TargetBatch,
    bce,
    bce_map,
    detached_terms,
    focal,
    focal_map,
    head_loss,
    loss_cls,
    loss_loc,
    loss_reg,
    total_loss,
)

LN2 = math.log(2.0)


def single_cell(gt: Box, loc=(10.0, 10.0), positive=True) -> TargetBatch:
    """One pair on a 1x1 grid."""
    return TargetBatch(
        cls_label=np.array([[[1.0 if positive else 0.0]]]),
        pos_mask=np.array([[[positive]]]),
        gt=gt.as_array()[None] if positive else np.full((1, 4), np.nan),
        loc_x=np.array([[loc[0]]]),
        loc_y=np.array([[loc[1]]]),
    )


def t_grid(t) -> Tensor:
    return Tensor(np.asarray(t, dtype=np.float64).reshape(1, 4, 1, 1), requires_grad=True)


# -- primitives --------------------------------------------------------------------------


def test_focal_examples():
    assert focal(0.5, 1) == pytest.approx(0.25 * 0.25 * LN2, abs=1e-15)
    assert focal(0.5, 1) == pytest.approx(0.043322, abs=1e-6)
    assert focal(0.5, 0) == pytest.approx(0.75 * 0.25 * LN2, abs=1e-15)
    assert focal(0.5, 0) == pytest.approx(0.129965, abs=1e-6)
    assert focal(1.0, 1) == pytest.approx(0.0, abs=1e-15)
    assert focal(0.0, 0) == pytest.approx(0.0, abs=1e-15)


@settings(max_examples=100, deadline=None)
@given(st.floats(0, 1), st.sampled_from([0, 1]))
def test_focal_map_matches_scalar_and_is_non_negative(p, y):
    v = focal_map(Tensor(np.array([p])), np.array([y])).data[0]
    assert v >= 0
    assert v == pytest.approx(focal(p, y), rel=1e-12, abs=1e-300)


def test_bce_entropy_floor_example():
    assert bce(0.7, 0.7) == pytest.approx(-(0.7 * math.log(0.7) + 0.3 * math.log(0.3)), abs=1e-15)
    assert bce(0.7, 0.7) == pytest.approx(0.610864, abs=1e-6)
    assert bce(1.0, 1.0) == pytest.approx(0.0, abs=1e-6)


@pytest.mark.parametrize("target", [0.1, 0.35, 0.7, 0.93])
def test_bce_minimized_at_target(target):
    grid = np.linspace(0.01, 0.99, 99)
    values = bce_map(Tensor(grid), np.full(99, target)).data
    assert grid[np.argmin(values)] == pytest.approx(target, abs=0.005)


# -- classification --------------------------------------------------------------------------


def test_loss_cls_single_positive_with_iou_weight():
    tb = single_cell(Box(0, 0, 20, 20))
    got = loss_cls(Tensor(np.full((1, 1, 1), 0.5)), tb, np.array([0.5])).item()
    assert got == pytest.approx(0.5 * 0.25 * 0.25 * LN2, abs=1e-15)
    assert got == pytest.approx(0.021661, abs=1e-6)


def test_loss_cls_perfect_prediction_is_zero():
    rng = np.random.default_rng(0)
    _, tb = checks.toy_batch(rng)
    p = Tensor(tb.cls_label.copy())
    assert loss_cls(p, tb, np.full(tb.n_pos, 0.3)).item() == pytest.approx(0.0, abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_unit_weight_equals_plain_focal(seed):
    rng = np.random.default_rng(seed)
    _, tb = checks.toy_batch(rng)
    p = Tensor(rng.uniform(0, 1, size=tb.cls_label.shape))
    weighted = loss_cls(p, tb, np.ones(tb.n_pos)).item()
    plain = loss_cls(p, tb, None).item()
    oracle = sum(
        focal(float(pv), int(y)) for pv, y in zip(p.data.ravel(), tb.cls_label.ravel())
    ) / max(tb.n_pos, 1)
    assert weighted == pytest.approx(plain, abs=1e-12)
    assert plain == pytest.approx(oracle, rel=1e-12)


def test_negatives_only_normalized_by_one():
    tb = single_cell(Box(0, 0, 1, 1), positive=False)
    got = loss_cls(Tensor(np.full((1, 1, 1), 0.5)), tb).item()
    assert got == pytest.approx(0.75 * 0.25 * LN2, abs=1e-15)
    assert tb.normalizer == 1.0


# -- regression --------------------------------------------------------------------------


def test_loss_reg_perfect_prediction_is_zero():
    gt = Box(3, 4, 17, 15)
    tb = single_cell(gt)
    l_reg, clamped = loss_reg(t_grid(encode(gt, (10, 10)).as_array()), tb)
    assert l_reg.item() == pytest.approx(0.0, abs=1e-15) and clamped == 0


def test_loss_reg_iou_one_over_e_gives_one():
    # same center, width scaled by 1/e: IoU = 1/e exactly
    gt = Box(0, 0, 20, 20)
    tb = single_cell(gt)
    l_reg, _ = loss_reg(t_grid([20 / math.e, 20, 0, 0]), tb, np.array([1.0]))
    assert l_reg.item() == pytest.approx(1.0, abs=1e-12)


def test_loss_reg_zero_weight_annihilates_gradient():
    gt = Box(0, 0, 20, 20)
    tb = single_cell(gt)
    t = t_grid([14, 25, 1, -2])
    with Tape() as tape:
        l_reg, _ = loss_reg(t, tb, np.array([0.0]))
    tape.backward(l_reg)
    assert l_reg.item() == 0.0
    assert np.all(t.grad == 0.0)


def test_loss_reg_clamps_disjoint_prediction():
    tb = single_cell(Box(0, 0, 10, 10))
    l_reg, clamped = loss_reg(t_grid([4, 4, 30, 30]), tb)
    assert clamped == 1
    assert l_reg.item() == pytest.approx(-math.log(1e-7), rel=1e-12)


# -- localization -------------------------------------------------------------------------------


def test_loss_loc_at_entropy_floor():
    tb = single_cell(Box(0, 0, 20, 20))
    got = loss_loc(Tensor(np.full((1, 1, 1), 0.7)), tb, np.array([0.7])).item()
    assert got == pytest.approx(0.610864, abs=1e-6)


def test_loss_loc_perfect_at_target_one():
    tb = single_cell(Box(0, 0, 20, 20))
    assert loss_loc(Tensor(np.full((1, 1, 1), 1.0)), tb, np.array([1.0])).item() < 1e-6


# -- total -------------------------------------------------------------------------------------


def test_total_loss_example():
    b = total_loss(Tensor(0.1), Tensor(0.2), Tensor(0.3))
    assert b.total.item() == pytest.approx(0.6, abs=1e-15)
    assert (b.lambda1, b.lambda2) == (1.0, 1.0)


def toy_grads(cfg, part="total", seed=0, perturb_reg=0.0):
    rng = np.random.default_rng(seed)
    feats, tb = checks.toy_batch(rng)
    params = [Tensor(p, requires_grad=True) for p in checks.toy_head_params(rng)]
    if perturb_reg:
        params[3] = Tensor(params[3].data + perturb_reg, requires_grad=True)
    with Tape() as tape:
        bundle = head_loss(checks.toy_head_output(feats, *params), tb, cfg)
    tape.backward(getattr(bundle, part))
    return bundle, [p.grad for p in params]


def test_lambda1_zero_removes_regression_gradient():
    _, grads = toy_grads(LossConfig(lambda1=0.0))
    assert np.all(grads[2] == 0) and np.all(grads[3] == 0)


def test_detach_contract_cls_path():
    base, grads = toy_grads(LossConfig(), part="l_cls")
    moved, _ = toy_grads(LossConfig(), part="l_cls", perturb_reg=0.3)
    assert moved.l_cls.item() != base.l_cls.item()  # the IoU weight depends on the regression
    assert np.max(np.abs(grads[2])) <= 1e-12 and np.max(np.abs(grads[3])) <= 1e-12


def test_detach_contract_reg_path():
    _, grads = toy_grads(LossConfig(), part="l_reg")
    for g in (grads[0], grads[1], grads[4], grads[5]):
        assert np.max(np.abs(g)) <= 1e-12


def test_loc_target_is_detached():
    _, grads = toy_grads(LossConfig(), part="l_loc")
    for g in grads[:4]:
        assert np.max(np.abs(g)) <= 1e-12


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.booleans(), st.booleans(), st.sampled_from(["iou", "centerness"]))
def test_bundle_invariants(seed, reciprocal, localization, target):
    cfg = LossConfig(reciprocal=reciprocal, localization=localization, loc_target=target, lambda1=0.7, lambda2=1.3)
    rng = np.random.default_rng(seed)
    feats, tb = checks.toy_batch(rng)
    with no_tape():
        b = head_loss(checks.toy_head_output(feats, *(Tensor(p) for p in checks.toy_head_params(rng))), tb, cfg)
    v = b.values()
    assert abs(v["total"] - (v["l_cls"] + 0.7 * v["l_reg"] + 1.3 * v["l_loc"])) <= 1e-12
    assert all(math.isfinite(x) and x >= 0 for x in v.values())
    if not localization:
        assert v["l_loc"] == 0.0


def test_unlinked_loss_ignores_weights():
    rng = np.random.default_rng(4)
    feats, tb = checks.toy_batch(rng)
    with no_tape():
        out = checks.toy_head_output(feats, *(Tensor(p) for p in checks.toy_head_params(rng)))
        plain = head_loss(out, tb, LossConfig(reciprocal=False))
        linked = head_loss(out, tb, LossConfig())
        d = detached_terms(out, tb)
        manual = loss_cls(out.p_cls, tb, d.iou)
    assert plain.l_cls.item() == pytest.approx(loss_cls(out.p_cls, tb).item(), abs=1e-15)
    assert linked.l_cls.item() == pytest.approx(manual.item(), abs=1e-15)
    assert linked.l_cls.item() < plain.l_cls.item()  # IoU weights are < 1


def test_reciprocal_start_step_delays_the_links():
    rng = np.random.default_rng(5)
    feats, tb = checks.toy_batch(rng)
    cfg = LossConfig(reciprocal_start_step=10)
    with no_tape():
        out = checks.toy_head_output(feats, *(Tensor(p) for p in checks.toy_head_params(rng)))
        early = head_loss(out, tb, cfg, step=9).values()
        late = head_loss(out, tb, cfg, step=10).values()
        plain = head_loss(out, tb, LossConfig(reciprocal=False)).values()
        linked = head_loss(out, tb, LossConfig()).values()
    assert early == plain and late == linked


def test_centerness_target_differs_from_iou_target():
    rng = np.random.default_rng(6)
    feats, tb = checks.toy_batch(rng)
    with no_tape():
        out = checks.toy_head_output(feats, *(Tensor(p) for p in checks.toy_head_params(rng)))
        a = head_loss(out, tb, LossConfig(loc_target="centerness")).l_loc.item()
        b = head_loss(out, tb, LossConfig()).l_loc.item()
    assert a != b
    with pytest.raises(ValueError):
        LossConfig(loc_target="giou")


@pytest.mark.parametrize("part", ["cls", "reg", "loc", "total"])
def test_toy_loss_gradcheck(part):
    assert checks.run_case(f"loss.{part}", seeds=5, tol=1e-4).passed
