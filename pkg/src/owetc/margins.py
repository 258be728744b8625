"""Class spheres in embedding space, marginal flows, and background filtering.

Each known class gets a centroid (mean embedding) and a radius. A training
flow is marginal when it lies inside its own class sphere and within
``epsilon`` of the surface. Marginal flows whose destination tuple, SNI or
certificate is seen in more than one class are treated as shared-library
(homogeneous) traffic and dropped before GAN training.

Distances are Euclidean, computed in float64 with a correctly rounded sum
so that results do not depend on vectorisation order.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from typing import Hashable, Iterable, Mapping, Sequence

import numpy as np

from .flows import BackgroundMeta, FlowRecord

log = logging.getLogger(__name__)

MARGINAL_WARN_FRACTION = 0.3


def euclidean(points: np.ndarray, center: np.ndarray) -> np.ndarray:
    diff = np.asarray(points, dtype=np.float64) - np.asarray(center, dtype=np.float64)
    sq = np.square(diff)
    return np.sqrt(np.fromiter((math.fsum(row) for row in sq), dtype=np.float64, count=len(sq)))


@dataclass
class ClassPrototype:
    class_id: Hashable
    centroid: np.ndarray
    radius: float = 0.0
    member_count: int = 0


def group_by_class(embeddings: np.ndarray, labels: Sequence) -> dict:
    groups: dict = {}
    for i, lab in enumerate(labels):
        groups.setdefault(lab, []).append(i)
    return {lab: np.asarray(embeddings)[idx] for lab, idx in groups.items()}


def compute_centroids(groups: Mapping[Hashable, np.ndarray]) -> dict[Hashable, ClassPrototype]:
    protos = {}
    for class_id, emb in groups.items():
        emb = np.asarray(emb, dtype=np.float64)
        if emb.ndim != 2 or len(emb) == 0:
            raise ValueError(f"class {class_id!r} has no embeddings")
        protos[class_id] = ClassPrototype(class_id, emb.mean(axis=0), 0.0, len(emb))
    return protos


def compute_radius(embeddings: np.ndarray, centroid: np.ndarray, policy: str = "quantile", q: float = 0.95) -> float:
    """Sphere radius for one class.

    ``policy="max"`` returns the largest member distance, so every member is
    inside. ``policy="quantile"`` returns the ``q``-quantile of member
    distances with linear interpolation between order statistics: for sorted
    distances ``d_0..d_{n-1}`` and ``h = q (n - 1)``, the radius is
    ``d_floor(h) + (h - floor(h)) (d_ceil(h) - d_floor(h))``.
    """
    if len(embeddings) == 0:
        raise ValueError("compute_radius needs at least one embedding")
    dist = euclidean(embeddings, centroid)
    if policy == "max":
        return float(dist.max())
    if policy != "quantile":
        raise ValueError(f"unknown radius policy {policy!r}")
    if not 0.0 < q <= 1.0:
        raise ValueError(f"quantile q must be in (0, 1], got {q}")
    return float(np.quantile(dist, q, method="linear"))


def build_prototypes(embeddings: np.ndarray, labels: Sequence, policy: str = "quantile", q: float = 0.95) -> dict:
    groups = group_by_class(embeddings, labels)
    protos = compute_centroids(groups)
    for class_id, proto in protos.items():
        proto.radius = compute_radius(groups[class_id], proto.centroid, policy, q)
    return protos


@dataclass
class MarginalEntry:
    flow_id: str
    class_id: Hashable
    embedding: np.ndarray
    distance: float
    delta: float
    kept: bool = True
    removal_reason: str = ""


@dataclass
class MarginalFlowSet:
    entries: list[MarginalEntry]
    epsilons: dict
    total_flows: int
    removed: list[MarginalEntry] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def flow_ids(self) -> list[str]:
        return [e.flow_id for e in self.entries]

    @property
    def count_before_filter(self) -> int:
        return len(self.entries) + len(self.removed)

    def embeddings(self) -> np.ndarray:
        if not self.entries:
            return np.empty((0, 0), dtype=np.float32)
        return np.stack([e.embedding for e in self.entries]).astype(np.float32)


def select_marginal(
    prototypes: Mapping[Hashable, ClassPrototype],
    embeddings: np.ndarray,
    labels: Sequence,
    flow_ids: Sequence[str] | None = None,
    epsilon: float | None = None,
    epsilon_rel: float = 0.1,
) -> MarginalFlowSet:
    """Pick flows with ``distance <= radius`` and ``radius - distance < eps``.

    ``eps`` is ``epsilon`` when given, otherwise ``epsilon_rel * radius`` of
    the flow's own class. Flows outside their sphere are never marginal.
    """
    if epsilon is not None and not epsilon > 0:
        raise ValueError(f"epsilon must be > 0, got {epsilon}")
    if epsilon is None and not epsilon_rel > 0:
        raise ValueError(f"epsilon_rel must be > 0, got {epsilon_rel}")
    embeddings = np.asarray(embeddings)
    if flow_ids is None:
        flow_ids = [str(i) for i in range(len(embeddings))]
    epsilons = {
        c: (epsilon if epsilon is not None else epsilon_rel * p.radius) for c, p in prototypes.items()
    }
    entries = []
    for class_id, proto in prototypes.items():
        idx = [i for i, lab in enumerate(labels) if lab == class_id]
        if not idx:
            continue
        dist = euclidean(embeddings[idx], proto.centroid)
        eps = epsilons[class_id]
        for i, d in zip(idx, dist):
            if d <= proto.radius and proto.radius - d < eps:
                entries.append((i, MarginalEntry(flow_ids[i], class_id, embeddings[i], float(d), proto.radius)))
    entries = [e for _, e in sorted(entries, key=lambda pair: pair[0])]
    total = len(embeddings)
    if total and len(entries) > MARGINAL_WARN_FRACTION * total:
        log.warning(
            "marginal set holds %d of %d flows (> %.0f%%); epsilon may be too large",
            len(entries), total, 100 * MARGINAL_WARN_FRACTION,
        )
    return MarginalFlowSet(entries=entries, epsilons=epsilons, total_flows=total)


@dataclass
class BackgroundIndex:
    dst: dict[tuple[str, int], set] = field(default_factory=dict)
    sni: dict[str, set] = field(default_factory=dict)
    cert: dict[str, set] = field(default_factory=dict)

    def reasons(self, bg: BackgroundMeta) -> list[str]:
        out = []
        if len(self.dst.get(bg.dst_tuple, ())) >= 2:
            out.append("dst")
        if bg.sni and len(self.sni.get(bg.sni, ())) >= 2:
            out.append("sni")
        if bg.cert_digest and len(self.cert.get(bg.cert_digest, ())) >= 2:
            out.append("cert")
        return out


def build_background_index(flows: Iterable[FlowRecord]) -> BackgroundIndex:
    index = BackgroundIndex()
    for flow in flows:
        bg = flow.background
        index.dst.setdefault(bg.dst_tuple, set()).add(flow.label)
        if bg.sni:
            index.sni.setdefault(bg.sni, set()).add(flow.label)
        if bg.cert_digest:
            index.cert.setdefault(bg.cert_digest, set()).add(flow.label)
    return index


def background_filter(
    marginal: MarginalFlowSet,
    index: BackgroundIndex,
    backgrounds: Mapping[str, BackgroundMeta],
) -> MarginalFlowSet:
    """Drop marginal flows whose background keys are shared across classes."""
    kept, removed = [], list(marginal.removed)
    for entry in marginal.entries:
        reasons = index.reasons(backgrounds[entry.flow_id])
        if reasons:
            removed.append(
                MarginalEntry(entry.flow_id, entry.class_id, entry.embedding, entry.distance, entry.delta,
                              kept=False, removal_reason="+".join(reasons))
            )
        else:
            kept.append(entry)
    return MarginalFlowSet(entries=kept, epsilons=marginal.epsilons, total_flows=marginal.total_flows, removed=removed)


def write_marginal(marginal: MarginalFlowSet, path) -> None:
    rows = sorted(marginal.entries + marginal.removed, key=lambda e: e.flow_id)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for e in rows:
            fh.write(json.dumps({
                "flow_id": e.flow_id,
                "class": e.class_id,
                "distance": e.distance,
                "delta": e.delta,
                "kept": e.kept,
                "removal_reason": e.removal_reason or None,
            }, sort_keys=True) + "\n")
