"""Acceptance gate.  Each test records one verdict line per criterion (see
conftest.py); the lines are printed in the terminal summary.

The benchmark runs (criteria 6 and 7) train fifteen models at the default
toy configuration and take roughly half an hour on one CPU core.
"""

import math
import time

import numpy as np
import pytest
from conftest import record

from tmcnet import tensor as T
from tmcnet.checkpoint import load_checkpoint, save_checkpoint
from tmcnet.config import TrainConfig
from tmcnet.cross import logistic_align_loss, ma_loss_total
from tmcnet.data import SplitSpec, SynthConfig, generate_dataset, select, split_cases
from tmcnet.gradcheck import run_end_to_end, run_op_suite
from tmcnet.metrics import MetricsReport, SliceScore, aggregate, bce_loss, summary_records, total_loss
from tmcnet.segnet import ModelConfig, TMCNet
from tmcnet.stats import paired_t_test
from tmcnet.tensor import Tensor
from tmcnet.text import Vocabulary, batch_tokens, tokenize
from tmcnet.train import (evaluate, flatten, make_batch, model_from_checkpoint, run_ablation,
                          train)

SEEDS = (0, 1, 2)
VOCAB = Vocabulary.default()
# scipy.stats.ttest_1samp on d = (0.1, -0.05, 0.2, 0.05, 0.1), computed before the build
T_ORACLE, P_ORACLE = 1.9694638556693236, 0.12024334063356444


# ------------------------------------------------------------ criterion 1

def test_c1_gradient_integrity():
    t0 = time.time()
    ops = run_op_suite(seeds=range(10), tol=1e-4)
    e2e = run_end_to_end(seeds=range(10), tol=1e-3)
    elapsed = time.time() - t0
    op_worst = max(r.report.max_rel_err for r in ops)
    e2e_worst = max(r.report.max_rel_err for r in e2e)
    n_ops = len({r.name for r in ops})
    ok = all(r.passed for r in ops) and all(r.passed for r in e2e) and elapsed < 300
    record(1, "gradient integrity", ok,
           f"{n_ops} ops x 10 seeds max {op_worst:.1e} (<1e-4); end-to-end x 10 seeds max "
           f"{e2e_worst:.1e} (<1e-3); {elapsed:.0f}s")
    assert ok


# ------------------------------------------------------------ criterion 2

def test_c2_closed_forms():
    ma0 = float(logistic_align_loss(Tensor(np.zeros(1))).data[0])
    bce = float(bce_loss(Tensor(np.full((1, 8, 8), 0.5)),
                         (np.random.default_rng(0).random((1, 8, 8)) > 0.5)).data)
    seg, align = np.float64(0.731), np.float64(1.3862)
    tot = float(total_loss(Tensor(seg), Tensor(align), 0.1).total.data)
    vals = np.random.default_rng(1).random(3)
    mean3 = float(ma_loss_total([Tensor(np.array(v)) for v in vals]).data)
    hand = (vals[0] + vals[1] + vals[2]) / 3
    checks = {
        "MA(s=0)=2ln2": abs(ma0 - 2 * math.log(2)) <= 1e-9,
        "BCE(0.5)=ln2": abs(bce - math.log(2)) <= 1e-9,
        "total=seg+0.1*align": tot == seg + 0.1 * align,
        "stage mean": abs(mean3 - hand) <= 1e-12,
    }
    ok = all(checks.values())
    record(2, "closed forms", ok, ", ".join(f"{k} {'ok' if v else 'FAILED'}" for k, v in checks.items()))
    assert ok


# ------------------------------------------------------------ criterion 3

def test_c3_attention_and_sigmoid_invariants():
    rng = np.random.default_rng(0)
    model = TMCNet(ModelConfig(), seed=0, dtype=np.float32)
    prompts = ["one target region, upper left", "two target regions, upper right and lower left",
               "one target region, lower right", "two target regions, upper left and lower right"]
    worst_row, n_maps, lo, hi = 0.0, 0, 1.0, 0.0
    for k in range(100):
        img = rng.random((1, 1, 32, 32)).astype(np.float32)
        ids, mask = batch_tokens([tokenize(prompts[k % 4], VOCAB)])
        out = model(img, ids, mask)
        for a in out.attention:
            worst_row = max(worst_row, float(np.abs(a.data.astype(np.float64).sum(-1) - 1.0).max()))
            n_maps += 1
        lo, hi = min(lo, float(out.prob.data.min())), max(hi, float(out.prob.data.max()))
    ok = worst_row <= 1e-6 and 0.0 < lo and hi < 1.0
    record(3, "attention rows and sigmoid range", ok,
           f"{n_maps} attention maps over 100 forwards, max |row sum - 1| = {worst_row:.1e}; "
           f"prob in [{lo:.3g}, {hi:.3g}]")
    assert ok


# ------------------------------------------------------------ criterion 4

@pytest.mark.parametrize("size,c1", [(s, c) for s in (32, 64, 128, 224) for c in (8, 16)])
def test_c4_shape_law(size, c1):
    cfg = ModelConfig(image_size=size, base_channels=c1)
    model = TMCNet(cfg, seed=0, dtype=np.float32)
    ids, mask = batch_tokens([tokenize("one target region, upper left", VOCAB)])
    img = np.random.default_rng(size).random((1, 1, size, size)).astype(np.float32)
    out = model(img, ids, mask)
    ok = out.prob.shape == (1, 1, size, size)
    for path in ("tokens", "cnn"):
        shp = out.stage_shapes[path]
        ok &= shp[0] == (c1, size // 4, size // 4)
        for (c, h, w), (c2, h2, w2) in zip(shp, shp[1:]):
            ok &= c2 == 2 * c and h2 == h // 2 and w2 == w // 2 and h % 2 == 0
    _shape_results[(size, c1)] = ok
    if len(_shape_results) == 8:
        record(4, "shape law", all(_shape_results.values()),
               f"{sum(_shape_results.values())}/8 configs (image 32..224 x C_1 in {{8,16}})")
    assert ok


_shape_results: dict = {}


# ------------------------------------------------------------ criterion 5

def test_c5_overfit_eight_samples():
    cfg = TrainConfig(max_epochs=500, max_steps=500, augment=False, plateau_patience=1000,
                      early_stop_patience=1000, seed=0)
    cases = generate_dataset(cfg.synth_config())
    splits = split_cases(cases, cfg.split_spec())
    ids = splits["train"][:8]
    t0 = time.time()
    res = train(cfg, cases, splits, train_ids=ids, val_ids=ids)
    elapsed = time.time() - t0
    dice = evaluate(res.model, select(cases, ids), "train").dice
    first = next((r["epoch"] for r in res.log if r["val_dice"] >= 0.99), None)
    ok = dice >= 0.99 and res.steps <= 500 and elapsed < 600
    record(5, "overfit sanity", ok,
           f"train Dice {dice:.4f} after {res.steps} steps (first >= 0.99 at step {first}); {elapsed:.0f}s")
    assert ok


# ------------------------------------------------------- criteria 6 and 7

@pytest.fixture(scope="module")
def bench():
    """Default toy config: full model, text-ablated control and the ablation
    grid, three seeds each, trained once for both criteria."""
    base = TrainConfig()
    cases = generate_dataset(base.synth_config())
    splits = split_cases(cases, base.split_spec())
    t0 = time.time()
    full = {s: train(base.replace(seed=s), cases, splits) for s in SEEDS}
    control = {s: train(base.replace(seed=s, text_ablation=True), cases, splits) for s in SEEDS}
    c6_time = time.time() - t0
    cache = {(True, True, s): full[s] for s in SEEDS}
    t0 = time.time()
    grid = run_ablation(base, SEEDS, cases, splits, cache=cache)
    return dict(base=base, cases=cases, splits=splits, full=full, control=control,
                grid=grid, c6_time=c6_time, c7_time=time.time() - t0)


def test_c6_text_disambiguation(bench):
    cases, splits = bench["cases"], bench["splits"]
    amb = [c for c in select(cases, splits["test"]) if c.ambiguous]
    full = [evaluate(bench["full"][s].model, amb, "test-ambiguous", s) for s in SEEDS]
    ctrl = [evaluate(bench["control"][s].model, amb, "test-ambiguous", s, text_ablation=True) for s in SEEDS]
    f_mean = float(np.mean([r.dice for r in full]))
    c_mean = float(np.mean([r.dice for r in ctrl]))
    rows = summary_records(full, "full", baseline=ctrl)
    t_row = rows[-1]
    minutes = bench["c6_time"] / 60
    ok = f_mean >= 0.85 and c_mean <= 0.70 and minutes <= 45
    record(6, "text disambiguation", ok,
           f"{len(amb)} ambiguous test cases; full Dice {f_mean:.4f} "
           f"({', '.join(f'{r.dice:.3f}' for r in full)}) >= 0.85; text-ablated {c_mean:.4f} "
           f"({', '.join(f'{r.dice:.3f}' for r in ctrl)}) <= 0.70; paired t={t_row.get('t', float('nan')):.2f} "
           f"p={t_row.get('p', float('nan')):.1e}; {minutes:.1f} min")
    assert ok


def test_c7_ablation_directionality(bench):
    grid = bench["grid"]
    print("\n" + grid.format())
    m = {cell: grid.cell_mean(cell) for cell in grid.reports}
    base = m[(False, False)]
    ok = (not any(grid.failures.values()) and m[(True, True)] >= base
          and m[(True, False)] >= base - 0.01 and m[(False, True)] >= base - 0.01)
    rows = grid.table()
    ok &= {r["label"] for r in rows} == {"mcm=off,align=off", "mcm=on,align=off",
                                         "mcm=off,align=on", "mcm=on,align=on"}
    record(7, "ablation directionality", ok,
           f"Dice (off,off) {base:.4f}, (on,off) {m[(True, False)]:.4f}, "
           f"(off,on) {m[(False, True)]:.4f}, (on,on) {m[(True, True)]:.4f}; "
           f"{(bench['c7_time']) / 60:.1f} min for the extra cells")
    assert ok


# ------------------------------------------------------------ criterion 8

def test_c8_protocol():
    cases = generate_dataset(SynthConfig())
    disjoint = True
    within_one = True
    for seed in range(100):
        out = split_cases(cases, SplitSpec(seed=seed))
        sets = [set(out[k]) for k in ("train", "val", "test")]
        disjoint &= not (sets[0] & sets[1] or sets[0] & sets[2] or sets[1] & sets[2])
        disjoint &= len(sets[0] | sets[1] | sets[2]) == len(cases)
        strata = {c.case_id: c.stratum for c in cases}
        for stratum in {c.stratum for c in cases}:
            n = sum(s == stratum for s in strata.values())
            for k, r in zip(("train", "val", "test"), (0.7, 0.1, 0.2)):
                within_one &= abs(sum(strata[i] == stratum for i in out[k]) - n * r) <= 1
    from tmcnet.data import Case
    for n in range(10, 51):
        out = split_cases([Case(f"c{i:02d}", [], "1") for i in range(n)], SplitSpec(seed=n))
        within_one &= all(abs(len(out[k]) - n * r) <= 1 for k, r in zip(("train", "val", "test"), (0.7, 0.1, 0.2)))

    scores = [SliceScore("A", 0, 1.0, 1.0), SliceScore("B", 0, 0.0, 0.0), SliceScore("B", 1, 0.0, 0.0)]
    _, case_weighted = aggregate(scores)
    slice_weighted = float(np.mean([s.dice for s in scores]))
    agg_ok = case_weighted == 0.5 and abs(slice_weighted - 1 / 3) < 1e-15

    t, p, dof = paired_t_test([0.1, -0.05, 0.2, 0.05, 0.1], [0.0] * 5)
    oracle_ok = abs(t - T_ORACLE) < 1e-3 and abs(p - P_ORACLE) < 1e-3 and dof == 4
    literal_ok = abs(t - 2.197) < 1e-3 and abs(p - 0.0929) < 1e-3
    ok = disjoint and within_one and agg_ok and oracle_ok
    record(8, "protocol correctness", ok and literal_ok,
           f"disjoint over 100 seeds {'ok' if disjoint else 'FAILED'}; 7:1:2 +-1 "
           f"{'ok' if within_one else 'FAILED'}; case-weighted {case_weighted} vs slice-weighted "
           f"{slice_weighted:.4f}; t-test (t={t:.5f}, p={p:.5f}) matches independent oracle "
           f"{'ok' if oracle_ok else 'FAILED'}; stated triple (2.197, 0.0929) "
           f"{'reproduced' if literal_ok else 'NOT reproduced: no standard sd convention gives it (ledgered)'}")
    assert ok


@pytest.mark.xfail(strict=True, reason="the stated t-test triple is not reachable with the sample-sd statistic")
def test_c8_stated_t_test_triple():
    t, p, _ = paired_t_test([0.1, -0.05, 0.2, 0.05, 0.1], [0.0] * 5)
    assert abs(t - 2.197) < 1e-3 and abs(p - 0.0929) < 1e-3


# ------------------------------------------------------------ criterion 9

def test_c9_determinism_and_persistence(tmp_path):
    cfg = TrainConfig(n_cases=60, max_epochs=2, seed=5)
    cases = generate_dataset(cfg.synth_config())
    splits = split_cases(cases, cfg.split_spec())
    a = train(cfg, cases, splits, out_dir=tmp_path / "a")
    b = train(cfg, cases, splits, out_dir=tmp_path / "b")
    logs_ok = (tmp_path / "a" / "epochs.tsv").read_bytes() == (tmp_path / "b" / "epochs.tsv").read_bytes()
    ckpt_ok = ((tmp_path / "a" / "checkpoint" / "tensors.bin").read_bytes()
               == (tmp_path / "b" / "checkpoint" / "tensors.bin").read_bytes())

    loaded = model_from_checkpoint(load_checkpoint(tmp_path / "a" / "checkpoint"))
    rng = np.random.default_rng(0)
    samples = flatten(cases)
    fwd_ok = True
    for k in rng.choice(len(samples), 10, replace=False):
        img, _, ids, tm = make_batch([samples[k]], VOCAB, np.float32)
        img = img + rng.normal(0, 0.05, img.shape).astype(np.float32)  # random inputs, not only dataset ones
        fwd_ok &= a.model(img, ids, tm).prob.data.tobytes() == loaded(img, ids, tm).prob.data.tobytes()
    resaved = save_checkpoint(load_checkpoint(tmp_path / "a" / "checkpoint"), tmp_path / "c")
    fwd_ok &= (resaved / "tensors.bin").read_bytes() == (tmp_path / "a" / "checkpoint" / "tensors.bin").read_bytes()
    ok = logs_ok and ckpt_ok and fwd_ok
    record(9, "determinism and persistence", ok,
           f"epoch logs bitwise {'ok' if logs_ok else 'FAILED'}; checkpoints bitwise "
           f"{'ok' if ckpt_ok else 'FAILED'}; 10 forwards after reload bitwise {'ok' if fwd_ok else 'FAILED'}")
    assert ok
