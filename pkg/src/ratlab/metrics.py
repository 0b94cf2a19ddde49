"""Selection and classification metrics. P/R/F1 are macro: mean of per-example scores."""
from __future__ import annotations

from dataclasses import dataclass, asdict, field

import numpy as np

METRIC_KEYS = ("accuracy", "precision", "recall", "f1", "x1_pct", "selected_fraction", "mean_spans")


def token_prf1(selected, gold) -> tuple[float, float, float]:
    """Precision, recall and F1 of two token sets (or boolean masks)."""
    sel = _as_set(selected)
    gold = _as_set(gold)
    hit = len(sel & gold)
    p = hit / len(sel) if sel else 0.0
    r = hit / len(gold) if gold else 0.0
    f = 2 * p * r / (p + r) if p + r > 0 else 0.0
    return p, r, f


def _as_set(x) -> set:
    if isinstance(x, (set, frozenset)):
        return set(x)
    arr = np.asarray(x)
    if arr.dtype == bool:
        return set(np.flatnonzero(arr).tolist())
    return set(int(v) for v in arr.ravel())


def x1_ratio(selected_units) -> float:
    """Percent of examples whose selection includes the first unit."""
    rows = [np.asarray(s) for s in selected_units]
    if not rows:
        return 0.0
    return 100.0 * float(np.mean([r[0] > 0 for r in rows]))


def span_count(mask) -> int:
    m = np.asarray(mask) > 0
    return int(m[0] + np.sum(m[1:] & ~m[:-1])) if m.size else 0


@dataclass
class MetricsReport:
    accuracy: float
    precision: float
    recall: float
    f1: float
    x1_pct: float
    selected_fraction: float
    mean_spans: float
    n: int = 0
    n_annotated: int = 0
    unit_pct: list[float] = field(default_factory=list)

    def to_json(self) -> dict:
        d = asdict(self)
        return {k: d[k] for k in METRIC_KEYS}

    def gold_unit_pct(self, unit: int) -> float:
        return self.unit_pct[unit] if unit < len(self.unit_pct) else 0.0


def summarize(labels, predictions, token_masks, gold_masks, first_unit_selected,
              unit_masks=None) -> MetricsReport:
    """Aggregate per-example results; examples without gold are skipped for P/R/F1."""
    labels = np.asarray(labels)
    predictions = np.asarray(predictions)
    n = len(labels)
    if n == 0:
        raise ValueError("cannot evaluate an empty set")
    scores = [token_prf1(tm, gm) for tm, gm in zip(token_masks, gold_masks) if gm is not None]
    p, r, f = (float(np.mean(c)) for c in zip(*scores)) if scores else (0.0, 0.0, 0.0)
    unit_pct = []
    if unit_masks is not None:
        widths = {len(u) for u in unit_masks}
        if len(widths) == 1:
            unit_pct = (100.0 * np.mean(np.asarray(unit_masks) > 0, axis=0)).tolist()
    return MetricsReport(
        accuracy=float(np.mean(labels == predictions)),
        precision=p, recall=r, f1=f,
        x1_pct=100.0 * float(np.mean(first_unit_selected)),
        selected_fraction=float(np.mean([np.mean(np.asarray(t) > 0) for t in token_masks])),
        mean_spans=float(np.mean([span_count(t) for t in token_masks])),
        n=n, n_annotated=len(scores), unit_pct=unit_pct)
