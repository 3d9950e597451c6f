"""Accuracy, RMSE, population mean/std and the fold/subject/skill summary tables."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

SENSOR_RANGE_N = 4.0
GROUP_KEYS = ("fold", "subject", "skill")


def accuracy(predictions, truths) -> float:
    """Exact-match accuracy in percent (the binary TP+TN form generalised to K classes)."""
    p, t = np.asarray(predictions), np.asarray(truths)
    if p.shape != t.shape:
        raise ValueError(f"{p.shape} predictions vs {t.shape} truths")
    if p.size == 0:
        raise ValueError("accuracy of an empty set")
    return int(np.count_nonzero(p == t)) / p.size * 100.0


def rmse(preds, truths) -> float:
    p = np.asarray(preds, dtype=np.float64)
    t = np.asarray(truths, dtype=np.float64)
    if p.shape != t.shape:
        raise ValueError(f"{p.shape} predictions vs {t.shape} truths")
    if p.size == 0:
        raise ValueError("rmse of an empty set")
    d = t - p
    return math.sqrt(float(np.dot(d, d)) / p.size)


def mean(values: Iterable[float]) -> float:
    vals = [float(v) for v in values]
    if not vals:
        raise ValueError("mean of an empty set")
    total = 0.0
    for v in vals:
        total += v
    return total / len(vals)


def std(values: Iterable[float], ddof: int = 0) -> float:
    """Population standard deviation by default; ``ddof=1`` gives the sample form."""
    vals = [float(v) for v in values]
    if not vals:
        raise ValueError("std of an empty set")
    if len(vals) - ddof <= 0:
        raise ValueError(f"need more than {ddof} values")
    mu = mean(vals)
    total = 0.0
    for v in vals:
        total += (v - mu) ** 2
    return math.sqrt(total / (len(vals) - ddof))


@dataclass(frozen=True)
class MetricSummary:
    group: str
    key: str
    count: int
    mu_train: float
    sigma_train: float
    mu_test: float
    sigma_test: float

    def percent_of_range(self, value: float) -> float:
        return value / SENSOR_RANGE_N * 100.0


def aggregate(ledger, group_by: str, ddof: int = 0) -> list[MetricSummary]:
    """Mean/std of train and test metrics per fold, subject or skill, in key order."""
    if group_by not in GROUP_KEYS:
        raise ValueError(f"group_by must be one of {GROUP_KEYS}, got {group_by!r}")
    records = list(ledger)
    if not records:
        raise ValueError("cannot aggregate an empty ledger")
    groups: dict = {}
    for r in records:
        k = getattr(r, group_by)
        if k is None:
            raise ValueError(f"records carry no {group_by} (skill-task ledgers have no skill key)")
        groups.setdefault(k, []).append(r)
    out = []
    for k in sorted(groups):
        rs = groups[k]
        tr = [r.train_metric for r in rs]
        te = [r.test_metric for r in rs]
        sd = (lambda v: std(v, ddof)) if len(rs) > ddof else (lambda v: 0.0)
        out.append(MetricSummary(group_by, str(k), len(rs), mean(tr), sd(tr), mean(te), sd(te)))
    return out


def overall(ledger, ddof: int = 0) -> MetricSummary:
    records = list(ledger)
    if not records:
        raise ValueError("cannot aggregate an empty ledger")
    tr = [r.train_metric for r in records]
    te = [r.test_metric for r in records]
    return MetricSummary("all", "all", len(records), mean(tr), std(tr, ddof), mean(te), std(te, ddof))


def summary_tsv(rows: Sequence[MetricSummary], with_percent: bool = False, decimals: int = 4) -> str:
    """Table columns: key, mu/sigma train, mu/sigma test, then optional % of 4 N."""
    buf = io.StringIO()
    w = csv.writer(buf, delimiter="\t", lineterminator="\n")
    head = [rows[0].group if rows else "group", "mu_train", "sigma_train", "mu_test", "sigma_test"]
    if with_percent:
        head += ["mu_train_pct", "sigma_train_pct", "mu_test_pct", "sigma_test_pct"]
    w.writerow(head)
    fmt = f"{{:.{decimals}f}}"
    for r in rows:
        vals = [r.mu_train, r.sigma_train, r.mu_test, r.sigma_test]
        if with_percent:
            vals += [r.percent_of_range(v) for v in vals[:4]]
        w.writerow([r.key] + [fmt.format(v) for v in vals])
    return buf.getvalue()
