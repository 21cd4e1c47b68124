import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from reciptrack.diffmath import EmptyInputError
from reciptrack.metrics import (
    ao_sr,
    center_errors,
    curve_auc,
    evaluate_arrays,
    evaluate_dirs,
    frame_iou_series,
    pearson,
    precision_curve,
    success_curve,
    summarize_ablation,
    write_report,
)
from reciptrack.pipeline import RunOutcome
from reciptrack.simulator import gt_csv
from reciptrack.tracker import results_csv

GT = np.array([[0, 0, 10, 10]] * 4, dtype=np.float64)
# frame 0 is the init frame; frames 1..3 have IoU 1, 0.5 and 0
RES = np.array([[0, 0, 10, 10], [0, 0, 10, 10], [0, 0, 10, 5], [20, 20, 30, 30]], dtype=np.float64)
SCORES = np.array([1.0, 0.9, 0.6, 0.1])


def write_pair(root, name="seq", boxes=RES, gt=GT, scores=SCORES):
    (root / "results").mkdir(exist_ok=True)
    (root / "bench" / name).mkdir(parents=True, exist_ok=True)
    (root / "results" / f"{name}.csv").write_text(results_csv(boxes, scores))
    (root / "bench" / name / "groundtruth.csv").write_text(gt_csv(gt))


def test_hand_built_files_give_hand_values(tmp_path):
    write_pair(tmp_path)
    assert frame_iou_series(tmp_path / "results" / "seq.csv", tmp_path / "bench" / "seq" / "groundtruth.csv") == [1.0, 0.5, 0.0]
    rep = evaluate_dirs(tmp_path / "results", tmp_path / "bench")
    assert rep.ao == 0.5
    assert rep.sr[0.5] == pytest.approx(1 / 3)  # strict: the 0.5 frame does not count
    assert rep.sr[0.75] == pytest.approx(1 / 3)
    assert rep.n_frames == 3


def test_sr_is_strict_at_threshold():
    _, sr = ao_sr([0.5, 0.75, 0.76])
    assert sr[0.5] == pytest.approx(2 / 3) and sr[0.75] == pytest.approx(1 / 3)


def test_perfect_line_pearson_is_one():
    x = np.arange(10.0)
    assert pearson(x, 3 * x + 2) == 1.0
    assert pearson(x, -x) == -1.0


def test_pearson_zero_variance_is_undefined():
    assert math.isnan(pearson(np.ones(5), np.arange(5.0)))


def test_pearson_errors():
    with pytest.raises(EmptyInputError):
        pearson([1.0], [2.0])
    with pytest.raises(ValueError):
        pearson([1.0, 2.0], [1.0, 2.0, 3.0])


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(3, 50))
def test_pearson_matches_numpy(seed, n):
    rng = np.random.default_rng(seed)
    x, y = rng.normal(size=n), rng.normal(size=n)
    assert pearson(x, y) == pytest.approx(np.corrcoef(x, y)[0, 1], abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=1, max_size=50))
def test_ao_sr_bounds(ious):
    ao, sr = ao_sr(ious)
    assert 0 <= ao <= 1 and all(0 <= v <= 1 for v in sr.values())
    assert sr[0.75] <= sr[0.5]


def test_ao_sr_empty():
    with pytest.raises(EmptyInputError):
        ao_sr([])


def test_success_curve_area_equals_mean_iou_approximately():
    ious = np.random.default_rng(0).uniform(size=2000)
    tau, succ = success_curve(ious)
    assert succ[0] == 1.0 and succ[-1] == 0.0
    assert np.all(np.diff(succ) <= 0)
    assert curve_auc(tau, succ) == pytest.approx(ious.mean(), abs=0.01)


def test_precision_curve_and_center_errors():
    err = center_errors(RES, GT)
    assert err == pytest.approx([0.0, 2.5, math.hypot(20, 20)])
    thr, prec = precision_curve(err, max_px=30)
    assert prec[0] == pytest.approx(1 / 3) and prec[2] == pytest.approx(1 / 3)
    assert prec[3] == pytest.approx(2 / 3) and prec[29] == pytest.approx(1.0)


def test_row_count_mismatch_is_reported(tmp_path):
    write_pair(tmp_path, boxes=RES[:3], scores=SCORES[:3])
    with pytest.raises(ValueError):
        evaluate_dirs(tmp_path / "results", tmp_path / "bench")


def test_no_results_is_reported(tmp_path):
    (tmp_path / "results").mkdir()
    with pytest.raises(EmptyInputError):
        evaluate_dirs(tmp_path / "results", tmp_path)


def test_report_files(tmp_path):
    write_pair(tmp_path)
    rep = evaluate_dirs(tmp_path / "results", tmp_path / "bench")
    write_report(rep, tmp_path)
    doc = json.loads((tmp_path / "report.json").read_text())
    assert doc["ao"] == 0.5 and doc["sr"]["0.5"] == pytest.approx(1 / 3)
    assert (tmp_path / "success_curve.csv").read_text().startswith("tau,success\n0.0,0.6666666666666666\n")  # strict: IoU 0 is not > 0
    lines = (tmp_path / "per_sequence.csv").read_text().splitlines()
    assert lines[0] == "name,frames,ao,sr50,sr75,precision20" and lines[1].startswith("seq,3,0.5,")


def test_pooled_frames_over_sequences():
    rep = evaluate_arrays(["a", "b"], [(RES, SCORES), (GT, np.ones(4))], [GT, GT])
    assert rep.ao == pytest.approx((1.5 + 3) / 6)
    assert len(rep.per_sequence) == 2


# -- ablation summary -----------------------------------------------------------------------------


def outcome(variant, seed, ao, failed=False, scores=(0.1, 0.9), ious=(0.2, 0.8)):
    return RunOutcome(
        variant, seed, ao=math.nan if failed else ao, sr50=ao, sr75=ao / 2, failed=failed,
        scores=np.array(scores), ious=np.array(ious),
    )


def test_ablation_medians_ordering_and_failures():
    runs = [
        outcome("I", 0, 0.40), outcome("I", 1, 0.50), outcome("I", 2, 0.45),
        outcome("IV", 0, 0.50), outcome("IV", 1, 0.0, failed=True), outcome("IV", 2, 0.60),
    ]
    rep = summarize_ablation(runs, [0, 1, 2])
    assert rep.median("I") == pytest.approx(0.45)
    assert rep.median("IV") == pytest.approx(0.55)  # failed run excluded
    assert rep.rows["IV"].failed == [1]
    assert rep.ordering()["IV>I"] is True
    assert rep.rows["IV"].gain_vs_I == pytest.approx(0.1 / 0.45)
    doc = json.loads(rep.to_json())
    assert doc["rows"]["IV"]["ao"][1] is None
    assert rep.table_csv().splitlines()[0].startswith("variant,median_ao")


@pytest.mark.parametrize(
    "r_c,expected", [(0.5, "between I and IV"), (0.1, "below I"), (0.95, "above IV")]
)
def test_centerness_position(r_c, expected):
    def corr(r):
        # two-variable sample with correlation exactly r
        a = np.array([1.0, -1.0, 1.0, -1.0])
        b = np.array([1.0, 1.0, -1.0, -1.0])
        return a, r * a + math.sqrt(1 - r * r) * b

    runs = []
    for name, r in (("I", 0.3), ("IV", 0.8), ("centerness", r_c)):
        s, i = corr(r)
        runs.append(outcome(name, 0, 0.5, scores=s, ious=i))
    rep = summarize_ablation(runs, [0])
    assert rep.rows["IV"].pearson_r == pytest.approx(0.8, abs=1e-12)
    assert rep.centerness_position() == expected
    assert rep.ordering()["pearson IV>I"] is True
