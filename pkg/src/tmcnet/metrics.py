"""Losses, overlap metrics and slice -> case -> split aggregation."""

from __future__ import annotations

import json
import math
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, DataError
from .stats import paired_t_test
from .tensor import ShapeError, Tensor

PROB_CLAMP = 1e-7
THRESHOLD = 0.5


def bce_loss(prob: Tensor, mask) -> Tensor:
    """Mean pixel-wise binary cross-entropy with probabilities clamped to
    ``[1e-7, 1 - 1e-7]``."""
    y = mask.data if isinstance(mask, Tensor) else np.asarray(mask)
    if y.shape != prob.shape:
        raise ShapeError(f"bce_loss: prediction {prob.shape} vs mask {y.shape}")
    y = y.astype(prob.dtype)
    p = T.clamp(prob, PROB_CLAMP, 1.0 - PROB_CLAMP)
    pos = T.mul(T.log(p), Tensor(y))
    negt = T.mul(T.log(T.add(T.neg(p), 1.0)), Tensor(1.0 - y))
    return T.neg(T.mean(T.add(pos, negt)))


@dataclass
class LossBundle:
    seg: Tensor
    align: Tensor | None
    lam: float | Tensor
    total: Tensor


def total_loss(seg: Tensor, align: Tensor | None, lam, align_on: bool = True) -> LossBundle:
    lam_val = float(lam.data.reshape(-1)[0]) if isinstance(lam, Tensor) else float(lam)
    if lam_val < 0:
        raise ConfigError(f"alignment weight must be >= 0, got {lam_val}")
    if not align_on or align is None:
        return LossBundle(seg=seg, align=align, lam=lam, total=seg)
    weighted = T.mul(align, lam) if isinstance(lam, Tensor) else T.scale(align, lam_val)
    return LossBundle(seg=seg, align=align, lam=lam, total=T.add(seg, weighted))


# ------------------------------------------------------------------ metrics

def binarize(prob, threshold: float = THRESHOLD) -> np.ndarray:
    p = prob.data if isinstance(prob, Tensor) else np.asarray(prob)
    return p > threshold


def dice(pred, gt) -> float:
    """2|P&G| / (|P|+|G|); 1.0 when both are empty."""
    p = np.asarray(pred, dtype=bool)
    g = np.asarray(gt, dtype=bool)
    denom = p.sum() + g.sum()
    if denom == 0:
        return 1.0
    return float(2.0 * np.logical_and(p, g).sum() / denom)


def _iou(p: np.ndarray, g: np.ndarray) -> float:
    union = np.logical_or(p, g).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(p, g).sum() / union)


def iou_fg(pred, gt) -> float:
    return _iou(np.asarray(pred, dtype=bool), np.asarray(gt, dtype=bool))


def miou(pred, gt) -> float:
    """Mean of foreground and background IoU; an absent class scores 1.0."""
    p = np.asarray(pred, dtype=bool)
    g = np.asarray(gt, dtype=bool)
    return 0.5 * (_iou(p, g) + _iou(~p, ~g))


# -------------------------------------------------------------- aggregation

@dataclass
class SliceScore:
    case_id: str
    slice_id: int
    dice: float
    miou: float


def aggregate(scores: list[SliceScore], case_ids=None, metric: str = "dice") -> tuple[dict[str, float], float]:
    """Per-case means of ``metric`` and the mean over cases.

    Cases are averaged with equal weight regardless of slice count.  When
    ``case_ids`` is given, every slice must belong to one of them.
    """
    known = set(case_ids) if case_ids is not None else None
    per_case: dict[str, list[float]] = {}
    for s in scores:
        if known is not None and s.case_id not in known:
            raise DataError(f"slice {s.slice_id} references unknown case {s.case_id!r}")
        per_case.setdefault(s.case_id, []).append(getattr(s, metric))
    means = OrderedDict((cid, math.fsum(v) / len(v)) for cid, v in sorted(per_case.items()))
    if not means:
        raise DataError("no slices to aggregate")
    return dict(means), math.fsum(means.values()) / len(means)


@dataclass
class MetricsReport:
    split: str
    seed: int
    slices: list[SliceScore]
    case_dice: dict[str, float] = field(default_factory=dict)
    case_miou: dict[str, float] = field(default_factory=dict)
    dice: float = float("nan")
    miou: float = float("nan")

    @classmethod
    def build(cls, split: str, seed: int, slices: list[SliceScore]) -> "MetricsReport":
        cd, d = aggregate(slices, metric="dice")
        cm, m = aggregate(slices, metric="miou")
        return cls(split=split, seed=seed, slices=slices, case_dice=cd, case_miou=cm, dice=d, miou=m)

    def subset(self, case_ids) -> "MetricsReport":
        keep = set(case_ids)
        return MetricsReport.build(self.split, self.seed, [s for s in self.slices if s.case_id in keep])

    @property
    def n_cases(self) -> int:
        return len(self.case_dice)

    def records(self) -> list[dict]:
        rows = []
        for cid in self.case_dice:
            rows.append({"split": self.split, "seed": self.seed, "case_id": cid,
                         "metric": "dice", "value": self.case_dice[cid]})
            rows.append({"split": self.split, "seed": self.seed, "case_id": cid,
                         "metric": "miou", "value": self.case_miou[cid]})
        for metric, value in (("dice", self.dice), ("miou", self.miou)):
            rows.append({"split": self.split, "seed": self.seed, "case_id": "*",
                         "metric": metric, "value": value, "kind": "aggregate",
                         "n_cases": self.n_cases, "n_slices": len(self.slices)})
        return rows


def seed_summary(values) -> tuple[float, float]:
    """Mean and sample standard deviation (ddof=1; 0.0 for a single run)."""
    v = np.asarray(values, dtype=np.float64)
    std = float(v.std(ddof=1)) if v.size > 1 else 0.0
    return float(v.mean()), std


def summary_records(reports: list[MetricsReport], label: str = "", baseline: list[MetricsReport] | None = None) -> list[dict]:
    """Mean/std rows across seeds, plus a paired t-test against ``baseline``
    on per-case Dice averaged over seeds."""
    rows = []
    split = reports[0].split if reports else ""
    for metric in ("dice", "miou"):
        m, s = seed_summary([getattr(r, metric) for r in reports])
        for kind, val in (("mean", m), ("std", s)):
            rows.append({"split": split, "seed": "*", "case_id": "*", "metric": metric,
                         "value": val, "kind": kind, "label": label, "n_seeds": len(reports)})
    if baseline:
        a = _seed_avg_case(reports)
        b = _seed_avg_case(baseline)
        common = sorted(set(a) & set(b))
        try:
            t, p, dof = paired_t_test([a[c] for c in common], [b[c] for c in common])
        except ValueError as exc:
            rows.append({"split": split, "seed": "*", "case_id": "*", "metric": "dice",
                         "kind": "t_test", "label": label, "error": str(exc)})
        else:
            rows.append({"split": split, "seed": "*", "case_id": "*", "metric": "dice",
                         "kind": "t_test", "label": label, "t": t, "p": p, "dof": dof})
    return rows


def _seed_avg_case(reports: list[MetricsReport]) -> dict[str, float]:
    acc: dict[str, list[float]] = {}
    for r in reports:
        for cid, v in r.case_dice.items():
            acc.setdefault(cid, []).append(v)
    return {cid: float(np.mean(v)) for cid, v in acc.items()}


def write_records(rows: list[dict], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=False) + "\n")
