"""Closed- and open-world classification metrics.

Closed world: accuracy and macro F1 over the classes that occur in either
the truths or the predictions. An ``UNKNOWN`` prediction is simply wrong
there and is not itself averaged as a class.

Open world: ``AC_ow`` is the mean of the known-flow recall (a known flow
counts only when assigned its correct class) and the unknown-flow recall.
``F1_ow`` is the macro F1 over the known classes plus ``UNKNOWN`` as one
more class. A recall whose denominator is empty is reported as 0 and the
report's ``flags`` say so.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .classifier import UNKNOWN


@dataclass
class ClassCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0

    @property
    def precision(self) -> float:
        return self.tp / (self.tp + self.fp) if self.tp + self.fp else 0.0

    @property
    def recall(self) -> float:
        return self.tp / (self.tp + self.fn) if self.tp + self.fn else 0.0

    @property
    def f1(self) -> float:
        denom = 2 * self.tp + self.fp + self.fn
        return 2 * self.tp / denom if denom else 0.0


def _sort_key(label: str):
    return (label == UNKNOWN, label)


def confusion(truths: Sequence[str], preds: Sequence[str]) -> tuple[list[str], np.ndarray]:
    labels = sorted(set(truths) | set(preds), key=_sort_key)
    pos = {lab: i for i, lab in enumerate(labels)}
    mat = np.zeros((len(labels), len(labels)), dtype=np.int64)
    for t, p in zip(truths, preds):
        mat[pos[t], pos[p]] += 1
    return labels, mat


def per_class_counts(truths: Sequence[str], preds: Sequence[str], classes: Sequence[str]) -> dict[str, ClassCounts]:
    counts = {c: ClassCounts() for c in classes}
    for t, p in zip(truths, preds):
        if t == p:
            if t in counts:
                counts[t].tp += 1
            continue
        if t in counts:
            counts[t].fn += 1
        if p in counts:
            counts[p].fp += 1
    return counts


def macro_f1(counts: dict[str, ClassCounts]) -> float:
    return float(np.mean([c.f1 for c in counts.values()])) if counts else 0.0


@dataclass
class MetricsReport:
    accuracy: float | None = None
    macro_f1: float | None = None
    ac_ow: float | None = None
    f1_ow: float | None = None
    per_class: dict = field(default_factory=dict)
    confusion_labels: list = field(default_factory=list)
    confusion: list = field(default_factory=list)
    n_scored: int = 0
    flags: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _table(counts: dict[str, ClassCounts]) -> dict:
    return {
        lab: {"tp": c.tp, "fp": c.fp, "fn": c.fn, "precision": c.precision, "recall": c.recall, "f1": c.f1}
        for lab, c in counts.items()
    }


def closed_metrics(preds: Sequence[str], truths: Sequence[str]) -> MetricsReport:
    preds, truths = list(preds), list(truths)
    if not truths:
        raise ValueError("closed_metrics needs at least one scored flow")
    if len(preds) != len(truths):
        raise ValueError("predictions and truths differ in length")
    if UNKNOWN in truths:
        raise ValueError("closed-world truths must all be known classes; use open_metrics")
    classes = sorted((set(truths) | set(preds)) - {UNKNOWN})
    counts = per_class_counts(truths, preds, classes)
    labels, mat = confusion(truths, preds)
    return MetricsReport(
        accuracy=sum(t == p for t, p in zip(truths, preds)) / len(truths),
        macro_f1=macro_f1(counts),
        per_class=_table(counts),
        confusion_labels=labels,
        confusion=mat.tolist(),
        n_scored=len(truths),
    )


def open_metrics(preds: Sequence[str], truths: Sequence[str]) -> MetricsReport:
    """Open-world scores; ``truths`` mark unknown-class flows as ``UNKNOWN``."""
    preds, truths = list(preds), list(truths)
    if len(preds) != len(truths):
        raise ValueError("predictions and truths differ in length")
    n_unknown = sum(t == UNKNOWN for t in truths)
    if n_unknown == 0:
        raise ValueError("no unknown flows in truths: AC_ow is undefined, use closed_metrics")
    flags = []
    known = [(t, p) for t, p in zip(truths, preds) if t != UNKNOWN]
    if known:
        known_recall = sum(t == p for t, p in known) / len(known)
    else:
        known_recall = 0.0
        flags.append("known recall 0/0 guarded to 0")
    unknown_recall = sum(t == UNKNOWN and p == UNKNOWN for t, p in zip(truths, preds)) / n_unknown
    classes = sorted(set(truths) | set(preds), key=_sort_key)
    counts = per_class_counts(truths, preds, classes)
    labels, mat = confusion(truths, preds)
    return MetricsReport(
        ac_ow=(known_recall + unknown_recall) / 2,
        f1_ow=macro_f1(counts),
        per_class=_table(counts),
        confusion_labels=labels,
        confusion=mat.tolist(),
        n_scored=len(truths),
        flags=flags,
    )


def combine(closed: MetricsReport, opened: MetricsReport) -> MetricsReport:
    """One report carrying closed-world AC/F1 and open-world AC_ow/F1_ow."""
    return MetricsReport(
        accuracy=closed.accuracy,
        macro_f1=closed.macro_f1,
        ac_ow=opened.ac_ow,
        f1_ow=opened.f1_ow,
        per_class=opened.per_class,
        confusion_labels=opened.confusion_labels,
        confusion=opened.confusion,
        n_scored=opened.n_scored,
        flags=closed.flags + opened.flags,
    )
