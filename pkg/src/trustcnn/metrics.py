"""SSIM, classification metrics, mask-based map accuracy and the four-case breakdown."""

from __future__ import annotations

import csv
import enum
import io
import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

log = logging.getLogger(__name__)

Z95 = 1.96


def ssim(x, y, dynamic_range: float = 1.0) -> float:
    """Single-window structural similarity with population (co)variances."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"ssim shapes differ: {x.shape} vs {y.shape}")
    if dynamic_range <= 0:
        raise ValueError("dynamic_range must be positive")
    c1 = (0.01 * dynamic_range) ** 2
    c2 = (0.03 * dynamic_range) ** 2
    mx, my = x.mean(), y.mean()
    dx, dy = x - mx, y - my
    vx, vy = (dx * dx).mean(), (dy * dy).mean()
    cov = (dx * dy).mean()
    num = (2 * mx * my + c1) * (2 * cov + c2)
    den = (mx * mx + my * my + c1) * (vx + vy + c2)
    return float(num / den)


def classification_metrics(preds: Sequence[int], truths: Sequence[int], num_classes: Optional[int] = None):
    """(accuracy, macro precision, macro recall)."""
    p = np.asarray(preds, dtype=np.int64)
    t = np.asarray(truths, dtype=np.int64)
    if p.size == 0 or p.shape != t.shape:
        raise ValueError("need equal-length, nonempty prediction and truth lists")
    classes = range(num_classes) if num_classes else sorted(set(p.tolist()) | set(t.tolist()))
    precisions, recalls = [], []
    for c in classes:
        tp = int(np.sum((p == c) & (t == c)))
        n_pred = int(np.sum(p == c))
        n_true = int(np.sum(t == c))
        if n_true == 0:
            log.warning("class %d absent from truths; counts as 0 in the macro average", c)
        precisions.append(tp / n_pred if n_pred else 0.0)
        recalls.append(tp / n_true if n_true else 0.0)
    return float(np.mean(p == t)), float(np.mean(precisions)), float(np.mean(recalls))


def energy_in_mask(values, mask) -> float:
    v = np.asarray(values, dtype=np.float64)
    m = np.asarray(mask) > 0.5
    if v.shape != m.shape:
        raise ValueError(f"map {v.shape} and mask {m.shape} differ")
    if not m.any():
        raise ValueError("mask has no positive pixels")
    total = v.sum()
    return float(v[m].sum() / total) if total > 0 else 0.0


def saliency_accurate(smap, mask, tau: float = 0.5) -> bool:
    """True when at least `tau` of the map's mass falls inside the mask."""
    if not 0.0 < tau < 1.0:
        raise ValueError("tau must lie in (0, 1)")
    values = getattr(smap, "values", smap)
    return energy_in_mask(values, mask) >= tau


class CaseLabel(enum.IntEnum):
    CASE1 = 1  # correct label, accurate map
    CASE2 = 2  # wrong label, accurate map
    CASE3 = 3  # correct label, inaccurate map
    CASE4 = 4  # wrong label, inaccurate map


def case_of(pred: int, truth: int, map_accurate: bool) -> CaseLabel:
    correct = pred == truth
    if map_accurate:
        return CaseLabel.CASE1 if correct else CaseLabel.CASE2
    return CaseLabel.CASE3 if correct else CaseLabel.CASE4


def proportion_interval(p: float, n: int) -> tuple[float, float]:
    half = Z95 * math.sqrt(p * (1 - p) / n)
    return max(0.0, p - half), min(1.0, p + half)


@dataclass
class CaseBreakdown:
    n: int
    fractions: tuple[float, float, float, float]
    intervals: tuple[tuple[float, float], ...]


def case_breakdown(cases: Sequence[CaseLabel]) -> CaseBreakdown:
    n = len(cases)
    if n < 1:
        raise ValueError("case breakdown of an empty result set")
    counts = np.bincount(np.asarray([int(c) for c in cases]), minlength=5)[1:5]
    fractions = tuple(float(c) / n for c in counts)
    return CaseBreakdown(n, fractions, tuple(proportion_interval(p, n) for p in fractions))


@dataclass
class MetricsReport:
    accuracy: float
    precision: float
    recall: float
    case_fractions: tuple[float, float, float, float]
    mean_ssim_vs_baseline: float = float("nan")
    energy_in_mask: float = 0.0
    case_intervals: tuple = field(default=(), repr=False)
    n: int = 0


def metrics_report(preds, truths, maps, masks, tau: float = 0.5, baseline_maps=None, num_classes=None) -> MetricsReport:
    """Aggregate classification, map accuracy and (optionally) SSIM against baseline maps."""
    acc, prec, rec = classification_metrics(preds, truths, num_classes)
    energies = [energy_in_mask(m, k) for m, k in zip(maps, masks)]
    cases = [case_of(p, t, e >= tau) for p, t, e in zip(preds, truths, energies)]
    cb = case_breakdown(cases)
    s = float("nan")
    if baseline_maps is not None:
        s = float(np.mean([ssim(a, b, 1.0) for a, b in zip(maps, baseline_maps)]))
    return MetricsReport(acc, prec, rec, cb.fractions, s, float(np.mean(energies)), cb.intervals, cb.n)


def _pct(x: float) -> str:
    return f"{100 * x:.0f}%"


def case_table(rows: Sequence[tuple[str, CaseBreakdown]]) -> str:
    """Plain-text per-case percentages with 95% intervals."""
    name_w = max(len(r[0]) for r in rows) + 2
    head = ("".ljust(name_w) + "".join(f"Case {i}".ljust(18) for i in range(1, 5))).rstrip()
    lines = [head, "-" * len(head)]
    for name, cb in rows:
        cells = [f"{_pct(p)} ({_pct(lo)}, {_pct(hi)})".ljust(18) for p, (lo, hi) in zip(cb.fractions, cb.intervals)]
        lines.append((name.ljust(name_w) + "".join(cells)).rstrip())
    return "\n".join(lines) + "\n"


def performance_table(rows: Sequence[tuple[str, MetricsReport]]) -> str:
    """Plain-text Model / Accuracy / Precision / Recall table."""
    name_w = max(len("Model"), *(len(r[0]) for r in rows)) + 2
    head = "Model".ljust(name_w) + "Accuracy".ljust(10) + "Precision".ljust(11) + "Recall"
    lines = [head, "-" * len(head)]
    for name, r in rows:
        lines.append(
            name.ljust(name_w) + f"{100 * r.accuracy:.1f}%".ljust(10) + f"{100 * r.precision:.1f}%".ljust(11)
            + f"{100 * r.recall:.1f}%"
        )
    return "\n".join(lines) + "\n"


REPORT_COLUMNS = ("accuracy", "precision", "recall", "case1", "case2", "case3", "case4",
                  "energy_in_mask", "ssim_vs_baseline")


def report_values(r: MetricsReport) -> list:
    return [r.accuracy, r.precision, r.recall, *r.case_fractions, r.energy_in_mask, r.mean_ssim_vs_baseline]


def report_csv(rows: Sequence[tuple[str, MetricsReport]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["model", *REPORT_COLUMNS])
    for name, r in rows:
        w.writerow([name, *(f"{v:.6f}" for v in report_values(r))])
    return buf.getvalue()
