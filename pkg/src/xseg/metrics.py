"""Confusion counts, the nine evaluation metrics, and stratified aggregation."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from .data import LABELS, UnknownLabelError

METRICS = ("acc", "auc", "dice", "jacc", "prec", "reca", "f1", "sens", "spec")
HEADERS = {
    "acc": "ACC", "auc": "AUC", "dice": "DICE", "jacc": "JACC", "prec": "PREC",
    "reca": "RECA", "f1": "F1-SC", "sens": "SENS", "spec": "SPEC",
}


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    tn: int
    fp: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn


@dataclass
class MetricsRecord:
    acc: float
    auc: float | None  # None when only one class is present in the target
    dice: float
    jacc: float
    prec: float
    reca: float
    f1: float
    sens: float
    spec: float
    counts: ConfusionCounts | None = None
    degenerate: tuple[str, ...] = field(default_factory=tuple)

    def values(self) -> dict[str, float | None]:
        return {m: getattr(self, m) for m in METRICS}


def confusion(pred, target, threshold: float = 0.5) -> ConfusionCounts:
    p = np.asarray(pred) >= threshold
    t = np.asarray(target) > 0.5
    if p.shape != t.shape:
        raise ValueError(f"confusion: pred {p.shape} vs target {t.shape}")
    tp = int(np.count_nonzero(p & t))
    tn = int(np.count_nonzero(~p & ~t))
    fp = int(np.count_nonzero(p & ~t))
    fn = int(np.count_nonzero(~p & t))
    return ConfusionCounts(tp, tn, fp, fn)


def auc_rank(pos_scores, neg_scores) -> float | None:
    """P(score_pos > score_neg) + 0.5 P(tie), via the Mann-Whitney rank sum."""
    pos = np.asarray(pos_scores, dtype=np.float64).ravel()
    neg = np.asarray(neg_scores, dtype=np.float64).ravel()
    n_pos, n_neg = pos.size, neg.size
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = rankdata(np.concatenate([pos, neg]))  # average ranks for ties
    u = ranks[:n_pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def _ratio(num: int, den: int, name: str, flags: list[str]) -> float:
    if den == 0:
        flags.append(name)
        return 0.0
    return num / den


def _f1(p: float, r: float) -> float:
    return 0.0 if p + r == 0 else 2 * p * r / (p + r)


def metrics(pred, target, threshold: float = 0.5, soft_overlap: bool = False) -> MetricsRecord:
    """Per-image metrics.

    PREC, RECA and F1 are macro averages over the positive and negative class
    (F1 is computed per class first, then averaged). DICE and JACC use the
    binarized prediction unless ``soft_overlap`` is set.
    """
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target)
    if target.size == 0:
        raise ValueError("metrics: empty target")
    c = confusion(pred, target, threshold)
    flags: list[str] = []
    acc = (c.tp + c.tn) / c.total

    t = (target > 0.5).astype(np.float64)
    o = pred if soft_overlap else (pred >= threshold).astype(np.float64)
    inter = float((t * o).sum())
    s = float(t.sum() + o.sum())
    if s == 0:
        # both empty: perfect agreement on an empty structure
        dice = jacc = 1.0
        flags.append("dice")
    else:
        dice = 2 * inter / s
        jacc = inter / (s - inter)

    prec_pos = _ratio(c.tp, c.tp + c.fp, "prec_pos", flags)
    prec_neg = _ratio(c.tn, c.tn + c.fn, "prec_neg", flags)
    reca_pos = _ratio(c.tp, c.tp + c.fn, "reca_pos", flags)
    reca_neg = _ratio(c.tn, c.tn + c.fp, "reca_neg", flags)
    flat_t = t.ravel() > 0.5
    auc = auc_rank(pred.ravel()[flat_t], pred.ravel()[~flat_t])
    return MetricsRecord(
        acc=acc,
        auc=auc,
        dice=dice,
        jacc=jacc,
        prec=(prec_pos + prec_neg) / 2,
        reca=(reca_pos + reca_neg) / 2,
        f1=(_f1(prec_pos, reca_pos) + _f1(prec_neg, reca_neg)) / 2,
        sens=reca_pos,
        spec=reca_neg,
        counts=c,
        degenerate=tuple(flags),
    )


def mean_record(records: list[MetricsRecord]) -> MetricsRecord:
    """Plain per-metric mean (AUC over records where it is defined)."""
    vals = {}
    for m in METRICS:
        xs = [r.values()[m] for r in records if r.values()[m] is not None]
        vals[m] = float(np.mean(xs)) if xs else None
    return MetricsRecord(**vals)


# --------------------------------------------------------------------------
# aggregation


@dataclass
class Summary:
    mean: float | None
    std: float | None
    n: int


def summarize(xs) -> Summary:
    xs = [float(x) for x in xs if x is not None]
    if not xs:
        return Summary(None, None, 0)
    mean = math.fsum(xs) / len(xs)
    if len(xs) == 1:
        return Summary(mean, 0.0, 1)
    var = math.fsum((x - mean) ** 2 for x in xs) / (len(xs) - 1)
    return Summary(mean, math.sqrt(var), len(xs))


def aggregate(records: list[MetricsRecord], labels: list[str]) -> dict[str, dict[str, Summary]]:
    """{class or 'overall': {metric: Summary}} with sample (n-1) standard deviations."""
    if not records:
        raise ValueError("aggregate: no records")
    if len(records) != len(labels):
        raise ValueError("aggregate: one label per record required")
    bad = sorted({lb for lb in labels if lb not in LABELS})
    if bad:
        raise UnknownLabelError(f"unknown class label(s): {bad}")
    table = {}
    for cls in LABELS:
        rs = [r for r, lb in zip(records, labels) if lb == cls]
        if rs:
            table[cls] = {m: summarize(getattr(r, m) for r in rs) for m in METRICS}
    table["overall"] = {m: summarize(getattr(r, m) for r in records) for m in METRICS}
    return table


def _fmt(x: float | None) -> str:
    return "" if x is None else repr(float(x))


def table_csv(rows: list[tuple[dict, dict[str, Summary]]]) -> str:
    """CSV with leading key columns then ``<METRIC>_mean,<METRIC>_std`` pairs."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    keys = list(rows[0][0]) if rows else []
    w.writerow(keys + [f"{HEADERS[m]}_{s}" for m in METRICS for s in ("mean", "std")])
    for key, summ in rows:
        w.writerow([key[k] for k in keys] + [_fmt(getattr(summ[m], s)) for m in METRICS for s in ("mean", "std")])
    return buf.getvalue()


def records_csv(rows: list[tuple[dict, MetricsRecord]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    keys = list(rows[0][0]) if rows else []
    w.writerow(keys + [HEADERS[m] for m in METRICS])
    for key, rec in rows:
        w.writerow([key[k] for k in keys] + [_fmt(rec.values()[m]) for m in METRICS])
    return buf.getvalue()
