import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from tmcnet import tensor as T
from tmcnet.errors import ConfigError, DataError
from tmcnet.metrics import (MetricsReport, SliceScore, aggregate, bce_loss, binarize, dice, iou_fg,
                            miou, seed_summary, summary_records, total_loss, write_records)
from tmcnet.stats import betainc, paired_t_test, student_t_cdf
from tmcnet.tensor import ShapeError, Tensor

# independent oracle for d = (0.1, -0.05, 0.2, 0.05, 0.1): scipy.stats.ttest_1samp, frozen
T_ORACLE = 1.9694638556693236
P_ORACLE = 0.12024334063356444
D_EXAMPLE = [0.1, -0.05, 0.2, 0.05, 0.1]


# ------------------------------------------------------------------ losses

def test_bce_at_half_is_ln2():
    mask = (np.random.default_rng(0).random((1, 4, 4)) > 0.5).astype(float)
    loss = bce_loss(Tensor(np.full((1, 4, 4), 0.5)), mask)
    assert float(loss.data) == pytest.approx(math.log(2), abs=1e-12)


def test_bce_perfect_prediction_is_clamp_scale():
    y = np.array([[[1.0, 0.0], [0.0, 1.0]]])
    loss = float(bce_loss(Tensor(y.copy()), y).data)
    assert 0 < loss < 2e-7


def test_bce_two_pixel_closed_form():
    loss = bce_loss(Tensor(np.array([[[0.9, 0.2]]])), np.array([[[1, 0]]]))
    assert float(loss.data) == pytest.approx(-0.5 * (math.log(0.9) + math.log(0.8)), rel=1e-12)
    assert float(loss.data) == pytest.approx(0.164252, abs=1e-6)


def test_bce_shape_mismatch():
    with pytest.raises(ShapeError):
        bce_loss(Tensor(np.full((1, 2, 2), 0.5)), np.zeros((1, 2, 3)))


def test_total_loss_examples():
    seg, align = Tensor(np.array(1.0)), Tensor(np.array(2.0))
    assert float(total_loss(seg, align, 0.1).total.data) == pytest.approx(1.2, abs=1e-15)
    assert total_loss(seg, align, 0.0).total.data == 1.0
    assert total_loss(seg, align, 0.5, align_on=False).total is seg
    with pytest.raises(ConfigError):
        total_loss(seg, align, -0.1)


def test_total_loss_gradients():
    seg = Tensor(np.array(1.0), requires_grad=True)
    align = Tensor(np.array(2.0), requires_grad=True)
    lam = Tensor(np.array(0.1), requires_grad=True)
    total_loss(seg, align, lam).total.backward()
    assert seg.grad == 1.0
    assert align.grad == pytest.approx(0.1)
    assert lam.grad == pytest.approx(2.0)


# ----------------------------------------------------------------- metrics

def test_binarize_uses_strict_threshold():
    np.testing.assert_array_equal(binarize(np.array([0.49, 0.5, 0.51])), [False, False, True])


def test_dice_examples():
    a = np.zeros((4, 4), bool)
    a[:2, :2] = True
    b = np.zeros((4, 4), bool)
    b[2:, 2:] = True
    assert dice(a, a) == 1.0
    assert dice(a, b) == 0.0
    assert dice(np.zeros((3, 3)), np.zeros((3, 3))) == 1.0
    assert dice(a | b, a) == pytest.approx(2 / 3, abs=1e-15)


def test_miou_examples():
    p = np.array([[1, 1], [0, 0]], bool)
    g = np.array([[1, 0], [1, 0]], bool)
    assert miou(p, g) == pytest.approx(1 / 3, abs=1e-15)
    assert miou(p, p) == 1.0
    assert miou(p, ~p) == 0.0
    assert miou(np.zeros((2, 2)), np.zeros((2, 2))) == 1.0


@settings(max_examples=200, deadline=None)
@given(arrays(bool, (5, 5)), arrays(bool, (5, 5)))
def test_dice_iou_identity(p, g):
    d, j = dice(p, g), iou_fg(p, g)
    assert abs(d - 2 * j / (1 + j)) < 1e-12
    assert 0.0 <= d <= 1.0 and dice(p, g) == dice(g, p)


# ------------------------------------------------------------- aggregation

def test_aggregate_single_case():
    per_case, agg = aggregate([SliceScore("a", 0, 0.8, 0), SliceScore("a", 1, 0.6, 0)])
    assert per_case == {"a": pytest.approx(0.7)} and agg == pytest.approx(0.7)


def test_aggregate_is_case_weighted():
    scores = [SliceScore("A", 0, 1.0, 0), SliceScore("B", 0, 0.0, 0), SliceScore("B", 1, 0.0, 0)]
    _, agg = aggregate(scores)
    assert agg == 0.5
    assert np.mean([s.dice for s in scores]) == pytest.approx(1 / 3)


def test_aggregate_order_invariant_and_checks_ids():
    scores = [SliceScore(c, i, v, v) for c, i, v in [("x", 0, 0.2), ("y", 0, 0.9), ("x", 1, 0.4)]]
    assert aggregate(scores) == aggregate(scores[::-1])
    with pytest.raises(DataError):
        aggregate(scores, case_ids=["x"])
    with pytest.raises(DataError):
        aggregate([])


def test_report_records_and_subset(tmp_path):
    scores = [SliceScore("c1", 0, 0.5, 0.6), SliceScore("c2", 0, 1.0, 1.0), SliceScore("c2", 1, 0.0, 0.2)]
    rep = MetricsReport.build("test", 3, scores)
    assert rep.n_cases == 2 and rep.dice == pytest.approx(0.5) and rep.miou == pytest.approx(0.6)
    sub = rep.subset(["c2"])
    assert sub.n_cases == 1 and sub.dice == pytest.approx(0.5)
    rows = rep.records()
    assert {r["metric"] for r in rows} == {"dice", "miou"}
    agg = [r for r in rows if r["case_id"] == "*"]
    assert all(r["kind"] == "aggregate" and r["n_slices"] == 3 for r in agg)
    write_records(rows, tmp_path / "m.jsonl")
    back = [json.loads(line) for line in (tmp_path / "m.jsonl").read_text().splitlines()]
    assert back == rows


def test_seed_summary_uses_sample_std():
    m, s = seed_summary([0.8, 0.9, 1.0])
    assert m == pytest.approx(0.9) and s == pytest.approx(0.1)
    assert seed_summary([0.7]) == (0.7, 0.0)


def test_summary_records_with_baseline():
    def rep(seed, vals):
        return MetricsReport.build("test", seed, [SliceScore(f"c{i}", 0, v, v) for i, v in enumerate(vals)])
    full = [rep(0, [0.9, 0.8, 0.95, 0.7]), rep(1, [0.92, 0.85, 0.9, 0.75])]
    base = [rep(0, [0.5, 0.6, 0.4, 0.7]), rep(1, [0.45, 0.55, 0.5, 0.6])]
    rows = summary_records(full, "full", base)
    kinds = [r["kind"] for r in rows]
    assert kinds.count("mean") == 2 and kinds.count("std") == 2
    t_row = rows[-1]
    assert t_row["kind"] == "t_test" and t_row["dof"] == 3 and t_row["t"] > 0


# ------------------------------------------------------------------ t-test

def test_t_test_matches_frozen_oracle():
    t, p, dof = paired_t_test(D_EXAMPLE, [0.0] * 5)
    assert dof == 4
    assert t == pytest.approx(T_ORACLE, abs=1e-12)
    assert p == pytest.approx(P_ORACLE, abs=1e-12)


@pytest.mark.xfail(strict=True, reason="(2.197, 0.0929) implies sd 0.0814; no sd convention gives that")
def test_t_test_stated_triple():
    t, p, _ = paired_t_test(D_EXAMPLE, [0.0] * 5)
    assert abs(t - 2.197) < 1e-3 and abs(p - 0.0929) < 1e-3


def test_t_test_antisymmetry_and_zero_shift():
    rng = np.random.default_rng(0)
    a, b = rng.random(8), rng.random(8)
    t1, p1, _ = paired_t_test(a, b)
    t2, p2, _ = paired_t_test(b, a)
    assert t1 == pytest.approx(-t2, abs=1e-14) and p1 == pytest.approx(p2, abs=1e-14)
    assert paired_t_test(a, a) == (0.0, 1.0, 7)


def test_t_test_jitter_limit():
    rng = np.random.default_rng(1)
    ps = [paired_t_test(1 + j * rng.standard_normal(4), np.zeros(4))[1] for j in (1e-1, 1e-3, 1e-6)]
    assert ps[0] > ps[1] > ps[2] and ps[2] < 1e-10


def test_t_test_errors():
    with pytest.raises(ValueError):
        paired_t_test([1.0], [0.0])
    with pytest.raises(ValueError):
        paired_t_test([1.0, 2.0], [0.0])
    with pytest.raises(ValueError):
        paired_t_test([1.0, 1.0, 1.0], [0.0, 0.0, 0.0])


@pytest.mark.parametrize("a,b,x", [(0.5, 0.5, 0.3), (2.0, 3.0, 0.7), (10.0, 0.5, 0.99), (1.0, 1.0, 0.25)])
def test_incomplete_beta_against_scipy(a, b, x):
    from scipy.special import betainc as ref
    assert betainc(a, b, x) == pytest.approx(ref(a, b, x), rel=1e-12, abs=1e-15)


@pytest.mark.parametrize("t,dof", [(-3.0, 2), (0.0, 5), (1.2, 9), (4.5, 30)])
def test_t_cdf_against_scipy(t, dof):
    from scipy.stats import t as tdist
    assert student_t_cdf(t, dof) == pytest.approx(tdist.cdf(t, dof), rel=1e-10, abs=1e-14)
