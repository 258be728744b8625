"""Class-level known/unknown split and flow-level train/val/test split."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .flows import FlowRecord

log = logging.getLogger(__name__)


@dataclass
class SplitSpec:
    known_classes: list[str]
    unknown_classes: list[str]
    train: list[str]
    val: list[str]
    cw_test: list[str]
    ow_test: list[str]
    seed: int
    warnings: list[str] = field(default_factory=list)

    @property
    def unknown_extra(self) -> list[str]:
        cw = set(self.cw_test)
        return [fid for fid in self.ow_test if fid not in cw]

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "SplitSpec":
        return cls(**json.loads(text))


def known_class_count(num_classes: int, known_fraction: float) -> int:
    n = math.floor(num_classes * known_fraction + 0.5)
    return min(max(n, 1), num_classes - 1)


def make_split(
    flows: Sequence[FlowRecord],
    known_fraction: float = 0.8,
    ratios: Sequence[float] = (8, 1, 1),
    seed: int = 0,
) -> SplitSpec:
    """Random class-level split, then a per-class train/val/test split.

    The known-class count is ``known_fraction * #classes`` rounded half up.
    Validation and test sizes are floored; the remainder goes to training.
    A known class with fewer than 3 flows goes entirely to training.
    """
    if not 0.0 < known_fraction < 1.0:
        raise ValueError(f"known_fraction must be in (0, 1), got {known_fraction}")
    if len(ratios) != 3 or min(ratios) < 0 or sum(ratios) <= 0:
        raise ValueError("ratios must be three non-negative numbers")
    by_class: dict[str, list[str]] = {}
    for flow in flows:
        if flow.label:
            by_class.setdefault(flow.label, []).append(flow.flow_id)
    classes = sorted(by_class)
    if len(classes) < 2:
        raise ValueError("make_split needs at least two classes")

    rng = np.random.default_rng(seed)
    order = rng.permutation(len(classes))
    n_known = known_class_count(len(classes), known_fraction)
    known = sorted(classes[i] for i in order[:n_known])
    unknown = sorted(classes[i] for i in order[n_known:])

    total = float(sum(ratios))
    train, val, test, warnings = [], [], [], []
    for cls in known:
        ids = by_class[cls]
        if len(ids) < 3:
            msg = f"class {cls!r} has {len(ids)} flows; all assigned to training"
            log.warning(msg)
            warnings.append(msg)
            train.extend(ids)
            continue
        perm = [ids[i] for i in rng.permutation(len(ids))]
        n_val = math.floor(len(ids) * ratios[1] / total)
        n_test = math.floor(len(ids) * ratios[2] / total)
        val.extend(perm[:n_val])
        test.extend(perm[n_val : n_val + n_test])
        train.extend(perm[n_val + n_test :])
    ow = list(test)
    for cls in unknown:
        ow.extend(by_class[cls])
    return SplitSpec(known, unknown, train, val, test, ow, seed, warnings)
