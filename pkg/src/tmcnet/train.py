"""Optimizer, schedules, the training loop, evaluation and the ablation grid."""

from __future__ import annotations

import copy
import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import TrainConfig
from .data import (Case, Sample, augment, generate_dataset, read_dataset, read_splits,
                   select, split_cases)
from .errors import CheckpointError, ConfigError
from .metrics import MetricsReport, SliceScore, bce_loss, binarize, dice, miou, summary_records, total_loss
from .segnet import ModelConfig, TMCNet
from .tensor import Tensor
from .text import Vocabulary, batch_tokens, tokenize

LOG_COLUMNS = ("epoch", "L_seg", "L_align", "total", "val_dice", "lr")


class TrainingError(RuntimeError):
    """Training aborted (non-finite loss or gradient)."""


# ------------------------------------------------------------------- Adam

@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray | None], state: AdamState,
              lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    """One in-place Adam update with bias correction.

    Parameters whose gradient is ``None`` (unused this step) are skipped.
    """
    for name, g in grads.items():
        if g is not None and not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient in parameter {name!r}")
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {name} {p.shape}")
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype)
    return state


class Adam:
    def __init__(self, params: dict[str, Tensor], lr: float):
        self.params = params
        self.lr = lr
        self.state = AdamState()

    def step(self) -> None:
        adam_step({n: p.data for n, p in self.params.items()},
                  {n: p.grad for n, p in self.params.items()}, self.state, self.lr)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


# -------------------------------------------------------------- schedules

@dataclass
class PlateauTracker:
    """Counts epochs without a strict improvement of more than ``threshold``.

    The first epoch sets the reference and opens the first window, so a
    flat history of ``patience`` epochs triggers once.
    """

    patience: int
    threshold: float = 1e-5
    best: float | None = None
    counter: int = 0

    def update(self, value: float) -> bool:
        """Record one epoch; returns True when the window is full."""
        if self.best is None:
            self.best, self.counter = value, 1
        elif value > self.best + self.threshold:
            self.best, self.counter = value, 0
        else:
            self.counter += 1
        return self.counter >= self.patience


def lr_on_plateau(value: float, tracker: PlateauTracker, lr: float, factor: float = 0.1) -> float:
    if tracker.update(value):
        tracker.counter = 0
        return lr * factor
    return lr


def lr_schedule(history, lr0: float, patience: int = 10, factor: float = 0.1,
                threshold: float = 1e-5) -> list[float]:
    """Learning rate in force after each epoch of ``history``."""
    tracker = PlateauTracker(patience, threshold)
    lr, out = lr0, []
    for v in history:
        lr = lr_on_plateau(v, tracker, lr, factor)
        out.append(lr)
    return out


def early_stop(history, patience: int = 20, threshold: float = 1e-5) -> int | None:
    """Epoch index (0-based) at which training stops, or None."""
    tracker = PlateauTracker(patience, threshold)
    for i, v in enumerate(history):
        if tracker.update(v):
            return i
    return None


# -------------------------------------------------------------- batching

def flatten(cases: list[Case]) -> list[Sample]:
    return [s for c in cases for s in c.slices]


def make_batch(samples: list[Sample], vocab: Vocabulary, dtype):
    images = np.stack([s.image for s in samples]).astype(dtype)
    masks = np.stack([s.mask for s in samples]).astype(dtype)
    ids, tmask = batch_tokens([tokenize(s.prompt, vocab) for s in samples])
    return images, masks, ids, tmask


# -------------------------------------------------------------- evaluate

def predict(model: TMCNet, samples: list[Sample], vocab: Vocabulary, text_ablation: bool = False,
            batch: int = 64) -> np.ndarray:
    probs = []
    for k in range(0, len(samples), batch):
        images, _, ids, tmask = make_batch(samples[k:k + batch], vocab, model.dtype)
        out = model.forward(images, ids, tmask, text_ablation=text_ablation)
        probs.append(out.prob.data)
    return np.concatenate(probs) if probs else np.zeros((0,))


def evaluate(model: TMCNet, cases: list[Case], split: str = "test", seed: int = 0,
             text_ablation: bool = False, batch: int = 64, vocab: Vocabulary | None = None) -> MetricsReport:
    """Per-slice Dice/mIoU, averaged per case, then over cases.  No augmentation."""
    vocab = vocab or Vocabulary.default()
    samples = flatten(cases)
    prob = predict(model, samples, vocab, text_ablation, batch)
    pred = binarize(prob)
    scores = [SliceScore(s.case_id, s.slice_id, dice(pred[j], s.mask), miou(pred[j], s.mask))
              for j, s in enumerate(samples)]
    return MetricsReport.build(split, seed, scores)


def model_from_checkpoint(ckpt: Checkpoint) -> TMCNet:
    cfg = TrainConfig.from_dict(ckpt.config)
    model = TMCNet(cfg.model_config(), seed=cfg.seed, dtype=cfg.np_dtype)
    try:
        model.load_state_dict(ckpt.params)
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"checkpoint does not match its configuration: {exc}") from exc
    return model


def evaluate_checkpoint(path, cases: list[Case], split: str = "test", text_ablation: bool | None = None) -> MetricsReport:
    ckpt = load_checkpoint(path)
    cfg = TrainConfig.from_dict(ckpt.config)
    flag = cfg.text_ablation if text_ablation is None else text_ablation
    return evaluate(model_from_checkpoint(ckpt), cases, split, cfg.seed, flag, cfg.eval_batch)


# ----------------------------------------------------------------- train

@dataclass
class TrainResult:
    model: TMCNet
    checkpoint: Checkpoint
    log: list[dict]
    steps: int
    stopped_early: bool
    config: TrainConfig


def load_data(cfg: TrainConfig) -> tuple[list[Case], dict[str, list[str]]]:
    if cfg.data_dir:
        root = Path(cfg.data_dir)
        if not (root / "manifest.tsv").exists():
            raise FileNotFoundError(f"dataset directory {root} has no manifest.tsv")
        cases = read_dataset(root)
        split_path = root / "splits.tsv"
        splits = read_splits(split_path) if split_path.exists() else split_cases(cases, cfg.split_spec())
        return cases, splits
    cases = generate_dataset(cfg.synth_config())
    return cases, split_cases(cases, cfg.split_spec())


def _rng_state(rngs: dict[str, np.random.Generator]) -> dict:
    return {k: copy.deepcopy(r.bit_generator.state) for k, r in rngs.items()}


def write_log(rows: list[dict], path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(LOG_COLUMNS)
        for r in rows:
            w.writerow([r["epoch"]] + [repr(float(r[c])) for c in LOG_COLUMNS[1:]])


def train(cfg: TrainConfig, cases: list[Case] | None = None, splits: dict[str, list[str]] | None = None,
          out_dir=None, train_ids=None, val_ids=None, verbose: bool = False) -> TrainResult:
    """Train one model; the returned checkpoint holds the best-validation epoch.

    ``train_ids``/``val_ids`` override the split (used by the overfit check).
    """
    cfg.validate()
    if cases is None:
        cases, splits = load_data(cfg)
    elif splits is None:
        splits = split_cases(cases, cfg.split_spec())
    train_cases = select(cases, train_ids if train_ids is not None else splits["train"])
    val_cases = select(cases, val_ids if val_ids is not None else splits["val"])
    if not train_cases or not val_cases:
        raise ConfigError("training and validation splits must be non-empty")

    dtype = cfg.np_dtype
    model = TMCNet(cfg.model_config(), seed=cfg.seed, dtype=dtype)
    vocab = Vocabulary.default()
    params = {n: p for n, p in model.named_parameters()
              if not (cfg.freeze_text and n.startswith("text."))}
    opt = Adam(params, cfg.lr)
    rngs = {"shuffle": np.random.default_rng([cfg.seed, 1]), "augment": np.random.default_rng([cfg.seed, 2])}
    samples = flatten(train_cases)
    sched = PlateauTracker(cfg.plateau_patience, cfg.improve_threshold)
    stopper = PlateauTracker(cfg.early_stop_patience, cfg.improve_threshold)
    best: Checkpoint | None = None
    log: list[dict] = []
    steps = 0
    stopped = False

    for epoch in range(1, cfg.max_epochs + 1):
        order = rngs["shuffle"].permutation(len(samples))
        sums = np.zeros(3)
        seen = 0
        for k in range(0, len(order), cfg.batch_size):
            batch = [samples[j] for j in order[k:k + cfg.batch_size]]
            if cfg.augment:
                batch = [augment(s, rngs["augment"]) for s in batch]
            images, masks, ids, tmask = make_batch(batch, vocab, dtype)
            out = model.forward(images, ids, tmask, text_ablation=cfg.text_ablation)
            seg = bce_loss(out.prob, masks)
            bundle = total_loss(seg, out.align_loss, cfg.lam, align_on=cfg.align_on)
            l_total = float(bundle.total.data)
            l_align = float(out.align_loss.data) if out.align_loss is not None else 0.0
            if not math.isfinite(l_total):
                raise TrainingError(f"loss diverged at epoch {epoch}, step {steps + 1}: "
                                    f"L_seg={float(seg.data)}, L_align={l_align}, lr={opt.lr}")
            opt.zero_grad()
            bundle.total.backward()
            opt.step()
            steps += 1
            n = len(batch)
            sums += n * np.array([float(seg.data), l_align, l_total])
            seen += n
            if cfg.max_steps and steps >= cfg.max_steps:
                break
        val = evaluate(model, val_cases, "val", cfg.seed, cfg.text_ablation, cfg.eval_batch, vocab).dice
        row = {"epoch": epoch, "L_seg": sums[0] / seen, "L_align": sums[1] / seen,
               "total": sums[2] / seen, "val_dice": val, "lr": opt.lr}
        log.append(row)
        if verbose:
            print("\t".join(f"{k}={v:.5g}" if isinstance(v, float) else f"{k}={v}" for k, v in row.items()),
                  flush=True)
        if best is None or val > best.best_val_dice + cfg.improve_threshold:
            best = Checkpoint(params={n: p.data.copy() for n, p in model.named_parameters()},
                              adam_m={n: a.copy() for n, a in opt.state.m.items()},
                              adam_v={n: a.copy() for n, a in opt.state.v.items()},
                              adam_t=opt.state.t, epoch=epoch, best_val_dice=val, lr=opt.lr,
                              rng_state=_rng_state(rngs), config=cfg.to_dict())
        opt.lr = lr_on_plateau(val, sched, opt.lr, cfg.plateau_factor)
        if stopper.update(val):
            stopped = True
            break
        if cfg.max_steps and steps >= cfg.max_steps:
            break

    model.load_state_dict(best.params)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_checkpoint(best, out / "checkpoint")
        write_log(log, out / "epochs.tsv")
        cfg.save(out / "config.txt")
    return TrainResult(model=model, checkpoint=best, log=log, steps=steps, stopped_early=stopped, config=cfg)


# -------------------------------------------------------------- ablation

ABLATION_CELLS = ((False, False), (True, False), (False, True), (True, True))


@dataclass
class AblationResult:
    reports: dict[tuple[bool, bool], list[MetricsReport]]
    failures: dict[tuple[bool, bool], list[str]]

    def cell_mean(self, cell, metric: str = "dice") -> float:
        runs = self.reports.get(cell) or []
        return float(np.mean([getattr(r, metric) for r in runs])) if runs else float("nan")

    def table(self) -> list[dict]:
        rows = []
        base = self.reports.get((False, False))
        for cell in ABLATION_CELLS:
            label = f"mcm={'on' if cell[0] else 'off'},align={'on' if cell[1] else 'off'}"
            runs = self.reports.get(cell) or []
            if runs:
                rows += summary_records(runs, label, baseline=base if cell != (False, False) else None)
            for msg in self.failures.get(cell, []):
                rows.append({"split": "test", "seed": "*", "case_id": "*", "metric": "dice",
                             "kind": "failure", "label": label, "error": msg})
        return rows

    def format(self) -> str:
        lines = [f"{'MCM':<5}{'align':<7}{'Dice':>18}{'mIoU':>18}"]
        for cell in ABLATION_CELLS:
            runs = self.reports.get(cell) or []
            if not runs:
                lines.append(f"{'on' if cell[0] else 'off':<5}{'on' if cell[1] else 'off':<7}  FAILED")
                continue
            d = [r.dice for r in runs]
            m = [r.miou for r in runs]
            sd = float(np.std(d, ddof=1)) if len(d) > 1 else 0.0
            sm = float(np.std(m, ddof=1)) if len(m) > 1 else 0.0
            lines.append(f"{'on' if cell[0] else 'off':<5}{'on' if cell[1] else 'off':<7}"
                         f"{np.mean(d):>10.4f} ± {sd:.4f}{np.mean(m):>10.4f} ± {sm:.4f}")
        return "\n".join(lines)


def run_ablation(base: TrainConfig, seeds=(0, 1, 2), cases=None, splits=None, cache=None,
                 subset=None, verbose: bool = False) -> AblationResult:
    """Train the {MCM} x {alignment} grid for every seed and evaluate on test.

    ``cache`` maps ``(mcm_on, align_on, seed)`` to already-trained results,
    ``subset`` optionally restricts evaluation to some test case ids.
    """
    if cases is None:
        cases, splits = load_data(base)
    elif splits is None:
        splits = split_cases(cases, base.split_spec())
    test_ids = subset if subset is not None else splits["test"]
    test_cases = select(cases, test_ids)
    cache = {} if cache is None else cache
    reports: dict = {cell: [] for cell in ABLATION_CELLS}
    failures: dict = {cell: [] for cell in ABLATION_CELLS}
    for cell in ABLATION_CELLS:
        for seed in seeds:
            key = (cell[0], cell[1], seed)
            try:
                if key not in cache:
                    cfg = base.replace(mcm_on=cell[0], align_on=cell[1], seed=seed, text_ablation=False)
                    cache[key] = train(cfg, cases, splits, verbose=verbose)
                res = cache[key]
                reports[cell].append(evaluate(res.model, test_cases, "test", seed, batch=base.eval_batch))
            except Exception as exc:  # partial table with failure markers
                failures[cell].append(f"seed {seed}: {type(exc).__name__}: {exc}")
    return AblationResult(reports=reports, failures=failures)
