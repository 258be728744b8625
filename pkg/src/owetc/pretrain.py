"""Contrastive pre-training of the flow encoder on labeled triplets."""

from __future__ import annotations

import copy
import json
import logging
import math
from collections import deque
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .encoder import FlowEncoder
from .errors import ConfigError, NumericError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ContrastiveConfig:
    temperature: float = 0.1
    batch_size: int = 16
    steps: int = 1000
    learning_rate: float = 5e-5
    warmup_fraction: float = 0.03
    weight_decay: float = 0.01
    grad_clip: float = 1.0
    running_window: int = 10
    seed: int = 0

    def __post_init__(self):
        if not self.temperature > 0:
            raise ConfigError(f"temperature must be > 0, got {self.temperature}")
        if self.batch_size < 1 or self.steps < 0:
            raise ConfigError("batch_size must be >= 1 and steps >= 0")
        if not 0.0 <= self.warmup_fraction <= 1.0:
            raise ConfigError("warmup_fraction must be in [0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TripletBatch:
    """Index triplets into a corpus; ``labels`` are the anchor labels."""

    anchors: np.ndarray
    positives: np.ndarray
    negatives: np.ndarray
    labels: np.ndarray
    negative_labels: np.ndarray

    def __len__(self) -> int:
        return len(self.anchors)


def _class_members(labels: Sequence) -> dict:
    members: dict = {}
    for i, lab in enumerate(labels):
        members.setdefault(lab, []).append(i)
    return members


def sample_triplets(labels: Sequence, batch_size: int, seed: int | None = None, rng: np.random.Generator | None = None) -> TripletBatch:
    """Draw ``batch_size`` (anchor, positive, negative) index triplets.

    Anchors are uniform over flows; an anchor from a single-flow class is
    rejected and redrawn. The positive is uniform over the anchor's class
    minus the anchor itself, the negative uniform over all other classes.
    """
    members = _class_members(labels)
    if len(members) < 2:
        raise ValueError("triplet sampling needs at least two classes")
    if all(len(v) < 2 for v in members.values()):
        raise ValueError("triplet sampling needs a class with at least two flows")
    rng = rng if rng is not None else np.random.default_rng(seed)
    labels = list(labels)
    n = len(labels)
    anchors, positives, negatives = [], [], []
    while len(anchors) < batch_size:
        a = int(rng.integers(n))
        own = members[labels[a]]
        if len(own) < 2:
            continue
        p = own[int(rng.integers(len(own) - 1))]
        if p == a:
            p = own[-1]
        neg = int(rng.integers(n - len(own)))
        # index into the complement of the anchor's class
        for idx in own:
            if idx <= neg:
                neg += 1
            else:
                break
        anchors.append(a)
        positives.append(p)
        negatives.append(neg)
    anchors_a = np.array(anchors)
    negatives_a = np.array(negatives)
    lab = np.array(labels, dtype=object)
    return TripletBatch(
        anchors=anchors_a,
        positives=np.array(positives),
        negatives=negatives_a,
        labels=lab[anchors_a],
        negative_labels=lab[negatives_a],
    )


def contrastive_loss(
    anchor: torch.Tensor,
    positive: torch.Tensor,
    negatives: torch.Tensor,
    temperature: float,
    negative_mask: torch.Tensor | None = None,
) -> torch.Tensor:
    """InfoNCE with cosine similarity, averaged over anchors.

    Args:
        anchor: ``(B, d)``.
        positive: ``(B, d)``, one positive per anchor.
        negatives: ``(B, K, d)`` per-anchor negatives, or ``(K, d)`` shared.
        temperature: softmax temperature, must be positive.
        negative_mask: optional ``(B, K)`` bool, False entries are ignored.
            Every anchor needs at least one active negative.
    """
    if not temperature > 0:
        raise ValueError(f"temperature must be > 0, got {temperature}")
    a = F.normalize(anchor, dim=-1)
    pos = (a * F.normalize(positive, dim=-1)).sum(-1, keepdim=True)
    n = F.normalize(negatives, dim=-1)
    neg = a @ n.T if n.dim() == 2 else torch.einsum("bd,bkd->bk", a, n)
    if negative_mask is not None:
        if not bool(negative_mask.any(dim=1).all()):
            raise ValueError("every anchor needs at least one negative")
        neg = neg.masked_fill(~negative_mask, float("-inf"))
    logits = torch.cat([pos, neg], dim=1) / temperature
    return (torch.logsumexp(logits, dim=1) - logits[:, 0]).mean()


def warmup_linear(step: int, total: int, warmup_fraction: float) -> float:
    """LR multiplier: linear ramp over the warmup steps, then linear decay to 0."""
    warmup = max(1, int(math.ceil(warmup_fraction * total)))
    if step < warmup:
        return (step + 1) / warmup
    return max(0.0, (total - step) / max(1, total - warmup))


def _batch_loss(encoder, ids_t, labels_arr, batch: TripletBatch, temperature):
    b = len(batch)
    idx = np.concatenate([batch.anchors, batch.positives, batch.negatives])
    pooled = encoder(ids_t[torch.as_tensor(idx)]).pooled
    anchor, positive, negative = pooled[:b], pooled[b : 2 * b], pooled[2 * b :]
    # in-batch negatives: every positive/negative in the batch from another class
    candidates = torch.cat([positive, negative])
    cand_labels = np.concatenate([labels_arr[batch.positives], labels_arr[batch.negatives]])
    mask = torch.as_tensor(cand_labels[None, :] != labels_arr[batch.anchors][:, None])
    return contrastive_loss(anchor, positive, candidates, temperature, negative_mask=mask)


def run_pretraining(
    ids: np.ndarray,
    labels: Sequence,
    encoder: FlowEncoder,
    config: ContrastiveConfig,
) -> tuple[FlowEncoder, list[dict]]:
    """Pre-train a copy of ``encoder``; the input model is left untouched.

    Returns the weights with the lowest running loss seen and the per-step
    log ``{step, loss, running_loss, lr}``.
    """
    model = copy.deepcopy(encoder)
    history: list[dict] = []
    if config.steps == 0:
        return model, history

    labels_arr = np.asarray(labels, dtype=object)
    ids_t = torch.as_tensor(ids)
    rng = np.random.default_rng(config.seed)
    optimizer = torch.optim.AdamW(model.parameters(), lr=config.learning_rate, weight_decay=config.weight_decay)
    scheduler = torch.optim.lr_scheduler.LambdaLR(
        optimizer, lambda s: warmup_linear(s, config.steps, config.warmup_fraction)
    )
    window: deque[float] = deque(maxlen=config.running_window)
    best_loss = math.inf
    best_state = None

    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.seed)
        model.train()
        for step in range(config.steps):
            batch = sample_triplets(labels_arr, config.batch_size, rng=rng)
            lr = optimizer.param_groups[0]["lr"]
            loss = _batch_loss(model, ids_t, labels_arr, batch, config.temperature)
            value = float(loss.detach())
            if not math.isfinite(value):
                raise NumericError(f"contrastive loss diverged at step {step} (loss={value}, lr={lr:.3g})")
            optimizer.zero_grad()
            loss.backward()
            if config.grad_clip:
                torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
            optimizer.step()
            scheduler.step()
            window.append(value)
            running = sum(window) / len(window)
            history.append({"step": step, "loss": value, "running_loss": running, "lr": lr})
            if len(window) == window.maxlen and running < best_loss:
                best_loss = running
                best_state = copy.deepcopy(model.state_dict())
            if step % 50 == 0:
                log.debug("pretrain step %d loss %.4f running %.4f", step, value, running)
    if best_state is not None:
        model.load_state_dict(best_state)
    model.eval()
    return model, history


def write_log(history: list[dict], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rec in history:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def class_similarity_margin(embeddings: np.ndarray, labels: Sequence) -> float:
    """Mean same-class cosine minus mean other-class cosine over all pairs."""
    x = embeddings / np.linalg.norm(embeddings, axis=1, keepdims=True)
    sims = x @ x.T
    lab = np.asarray(labels, dtype=object)
    same = lab[:, None] == lab[None, :]
    off_diag = ~np.eye(len(lab), dtype=bool)
    return float(sims[same & off_diag].mean() - sims[~same].mean())
