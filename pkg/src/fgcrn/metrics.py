"""Open-set confusion accounting and the ACC/FAR/FRR metrics."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DataError
from .finegrain import UNKNOWN


@dataclass
class ConfusionCounts:
    """Per-class and unknown-side tallies of an open-set evaluation.

    For each known class c, TP/FN/FP/TN partition the samples whose real and
    predicted labels are both known. TU/FK cover real-unknown samples, FU the
    known samples rejected as unknown.
    """

    known_classes: list[int]
    tp: dict[int, int] = field(default_factory=dict)
    fn: dict[int, int] = field(default_factory=dict)
    fp: dict[int, int] = field(default_factory=dict)
    tn: dict[int, int] = field(default_factory=dict)
    class_total: dict[int, int] = field(default_factory=dict)  # real-known per class
    tu: int = 0
    fk: int = 0
    fu: int = 0

    def __post_init__(self):
        for c in self.known_classes:
            for d in (self.tp, self.fn, self.fp, self.tn, self.class_total):
                d.setdefault(c, 0)

    @property
    def sum_tp(self) -> int:
        return sum(self.tp.values())

    @property
    def sum_tp_fn(self) -> int:
        return sum(self.tp.values()) + sum(self.fn.values())

    @property
    def n_known_real(self) -> int:
        return sum(self.class_total.values())

    @property
    def n_unknown_real(self) -> int:
        return self.tu + self.fk

    def per_class_recall(self) -> dict[int, float]:
        return {c: (self.tp[c] / self.class_total[c] if self.class_total[c] else 0.0)
                for c in self.known_classes}

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        if set(self.known_classes) != set(other.known_classes):
            raise DataError("cannot merge counts over different class sets")
        merged = ConfusionCounts(known_classes=list(self.known_classes))
        for c in self.known_classes:
            merged.tp[c] = self.tp[c] + other.tp[c]
            merged.fn[c] = self.fn[c] + other.fn[c]
            merged.fp[c] = self.fp[c] + other.fp[c]
            merged.tn[c] = self.tn[c] + other.tn[c]
            merged.class_total[c] = self.class_total[c] + other.class_total[c]
        merged.tu = self.tu + other.tu
        merged.fk = self.fk + other.fk
        merged.fu = self.fu + other.fu
        return merged


def tally(real_labels, predictions, known_classes) -> ConfusionCounts:
    """Count open-set outcomes; predictions use UNKNOWN (= -1) as the reject
    sentinel, real labels outside `known_classes` are true unknowns."""
    real = np.asarray(real_labels)
    pred = np.asarray(predictions)
    if real.shape != pred.shape:
        raise DataError(f"length mismatch: {real.shape} labels vs {pred.shape} predictions")
    known = sorted(int(c) for c in known_classes)
    known_set = set(known)
    counts = ConfusionCounts(known_classes=known)

    real_known = np.isin(real, known)
    pred_unknown = pred == UNKNOWN

    counts.fu = int(np.sum(real_known & pred_unknown))
    counts.tu = int(np.sum(~real_known & pred_unknown))
    counts.fk = int(np.sum(~real_known & ~pred_unknown))

    both = real_known & ~pred_unknown
    r, p = real[both], pred[both]
    for c in known:
        counts.tp[c] = int(np.sum((r == c) & (p == c)))
        counts.fn[c] = int(np.sum((r == c) & (p != c)))
        counts.fp[c] = int(np.sum((r != c) & (p == c)))
        counts.tn[c] = int(np.sum((r != c) & (p != c)))
        counts.class_total[c] = int(np.sum(real == c))
    if not np.all(np.isin(p, known)):
        raise DataError("prediction contains a label outside the known set")
    return counts


def accuracy_open(counts: ConfusionCounts) -> float:
    """(sum TP + TU) / (sum(TP + FN) + TU + FK + FU)."""
    denom = counts.sum_tp_fn + counts.tu + counts.fk + counts.fu
    if denom == 0:
        raise DataError("no samples tallied; open-set accuracy undefined")
    return (counts.sum_tp + counts.tu) / denom


def far_frr(counts: ConfusionCounts) -> tuple[float, float]:
    """FAR = FK / (FK + TU) (0 when no unknowns exist);
    FRR = FU / (sum(TP + FN) + FU)."""
    far = counts.fk / (counts.fk + counts.tu) if (counts.fk + counts.tu) else 0.0
    denom = counts.sum_tp_fn + counts.fu
    frr = counts.fu / denom if denom else 0.0
    return far, frr
