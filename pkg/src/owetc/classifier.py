"""(k+1)-way open-world classifier and the thresholded decision rules.

The head is a single linear layer on the pooled CLS embedding. Known flows
go through the encoder; synthetic unknowns are embeddings already and enter
at the head. At decision time the best *known* class is accepted when its
probability under the (k+1)-way softmax reaches ``sigma``; the unknown node
only acts by absorbing probability mass.
"""

from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import checkpoint
from .encoder import EncoderConfig, FlowEncoder, embed
from .errors import ConfigError
from .pretrain import warmup_linear

UNKNOWN = "UNKNOWN"
UNKNOWN_INDEX = -1

DEFAULT_SIGMA_GRID = tuple(round(0.30 + 0.05 * i, 2) for i in range(14))


@dataclass(frozen=True)
class FinetuneConfig:
    epochs: int = 3
    batch_size: int = 32
    learning_rate: float = 1e-3
    encoder_lr_scale: float = 0.1
    finetune_encoder: bool = True
    weight_decay: float = 0.01
    warmup_fraction: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")
        if self.learning_rate <= 0 or self.encoder_lr_scale < 0:
            raise ConfigError("learning rates must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class DecisionConfig:
    sigma: float = 0.7
    known_only_argmax: bool = True

    def __post_init__(self):
        if not 0.0 < self.sigma <= 1.0:
            raise ConfigError(f"sigma must be in (0, 1], got {self.sigma}")


class OpenWorldClassifier(nn.Module):
    def __init__(self, encoder: FlowEncoder, classes: Sequence[str], unknown_node: bool = True):
        super().__init__()
        classes = list(classes)
        if UNKNOWN in classes:
            raise ValueError(f"{UNKNOWN!r} is reserved and cannot be a class label")
        self.encoder = encoder
        self.classes = classes
        self.unknown_node = unknown_node
        self.unknown_node_trained = False
        self.head = nn.Linear(encoder.d_model, len(classes) + int(unknown_node))

    @property
    def num_known(self) -> int:
        return len(self.classes)

    @property
    def unknown_index(self) -> int | None:
        return self.num_known if self.unknown_node else None

    def forward(self, ids: torch.Tensor) -> torch.Tensor:
        return self.head(self.encoder(ids).pooled)

    @torch.no_grad()
    def logits(self, ids: np.ndarray, batch_size: int = 128) -> np.ndarray:
        self.eval()
        out = [self(torch.as_tensor(ids[s : s + batch_size])).double().numpy() for s in range(0, len(ids), batch_size)]
        return np.concatenate(out) if out else np.empty((0, self.head.out_features))

    @torch.no_grad()
    def embedding_logits(self, embeddings: np.ndarray) -> np.ndarray:
        self.eval()
        return self.head(torch.as_tensor(np.asarray(embeddings, dtype=np.float32))).double().numpy()

    def label_of(self, index: int) -> str:
        return UNKNOWN if index == UNKNOWN_INDEX else self.classes[index]


def softmax(logits: np.ndarray) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def decide(probs: np.ndarray, sigma: float, num_known: int, known_only_argmax: bool = True) -> np.ndarray:
    """Open-world decisions from (k+1)-way probabilities.

    Returns class indices in ``[0, num_known)`` or ``UNKNOWN_INDEX``. With
    ``known_only_argmax`` the argmax runs over the known columns only; the
    alternative reading also rejects flows whose overall argmax is the
    unknown node.
    """
    probs = np.atleast_2d(probs)
    known = probs[:, :num_known]
    best = known.argmax(axis=1)
    accept = known[np.arange(len(known)), best] >= sigma
    if not known_only_argmax and probs.shape[1] > num_known:
        accept &= probs.argmax(axis=1) < num_known
    return np.where(accept, best, UNKNOWN_INDEX)


def baseline_decide(probs: np.ndarray, sigma: float) -> np.ndarray:
    """Thresholded softmax over a k-way head: reject when max prob < sigma."""
    probs = np.atleast_2d(probs)
    best = probs.argmax(axis=1)
    return np.where(probs.max(axis=1) >= sigma, best, UNKNOWN_INDEX)


def decide_logits(model: OpenWorldClassifier, logits: np.ndarray, decision: DecisionConfig) -> np.ndarray:
    probs = softmax(logits)
    if model.unknown_node:
        return decide(probs, decision.sigma, model.num_known, decision.known_only_argmax)
    return baseline_decide(probs, decision.sigma)


@dataclass
class Prediction:
    label: str
    probabilities: np.ndarray
    decision: str


def predict(model: OpenWorldClassifier, ids: np.ndarray, decision: DecisionConfig) -> list[Prediction]:
    """Score an ``(n, seq)`` id matrix (or a single sequence)."""
    ids = np.atleast_2d(ids)
    logits = model.logits(ids)
    probs = softmax(logits)
    idx = decide_logits(model, logits, decision)
    return [
        Prediction(model.label_of(int(i)), p, "unknown" if i == UNKNOWN_INDEX else "known")
        for i, p in zip(idx, probs)
    ]


def finetune(
    ids: np.ndarray,
    labels: Sequence[str],
    classes: Sequence[str],
    encoder: FlowEncoder,
    synthetic: np.ndarray | None,
    config: FinetuneConfig,
    unknown_node: bool = True,
) -> OpenWorldClassifier:
    """Train a classifier head (and by default the encoder) on known flows.

    With ``unknown_node`` the head has k+1 outputs and each mini-batch mixes
    known flows with a slice of the synthetic embeddings, all targeted at
    the last node. The encoder is copied; the caller's instance is not
    modified.
    """
    if len(ids) == 0:
        raise ValueError("finetune needs at least one known flow")
    index = {c: i for i, c in enumerate(classes)}
    targets = np.array([index[lab] for lab in labels], dtype=np.int64)
    synthetic = np.empty((0, encoder.d_model), np.float32) if synthetic is None else np.asarray(synthetic, np.float32)
    if len(synthetic) and not unknown_node:
        raise ValueError("synthetic unknowns need a head with an unknown node")

    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.seed)
        model = OpenWorldClassifier(copy.deepcopy(encoder), classes, unknown_node)
        model.unknown_node_trained = unknown_node and len(synthetic) > 0
        groups = [{"params": model.head.parameters(), "lr": config.learning_rate}]
        if config.finetune_encoder and config.encoder_lr_scale > 0:
            groups.append({"params": model.encoder.parameters(), "lr": config.learning_rate * config.encoder_lr_scale})
        else:
            model.encoder.requires_grad_(False)
        optimizer = torch.optim.AdamW(groups, weight_decay=config.weight_decay)
        per_epoch = math.ceil(len(ids) / config.batch_size)
        total = per_epoch * config.epochs
        if total == 0:
            model.eval()
            return model
        scheduler = torch.optim.lr_scheduler.LambdaLR(
            optimizer, lambda s: warmup_linear(s, total, config.warmup_fraction)
        )
        rng = np.random.default_rng(config.seed)
        frozen = not (config.finetune_encoder and config.encoder_lr_scale > 0)
        if frozen:
            # the encoder is fixed, so its embeddings can be computed once
            feats = torch.as_tensor(embed(model.encoder, ids))
        else:
            ids_t = torch.as_tensor(ids)
        syn_t = torch.as_tensor(synthetic)
        unk = model.num_known
        for _ in range(config.epochs):
            model.train()
            if frozen:
                model.encoder.eval()
            order = rng.permutation(len(ids))
            syn_chunks = np.array_split(rng.permutation(len(synthetic)), per_epoch)
            for b in range(per_epoch):
                sel = torch.as_tensor(order[b * config.batch_size : (b + 1) * config.batch_size])
                logits = model.head(feats[sel]) if frozen else model(ids_t[sel])
                y = torch.as_tensor(targets[sel.numpy()])
                chunk = syn_chunks[b]
                if len(chunk):
                    logits = torch.cat([logits, model.head(syn_t[torch.as_tensor(chunk)])])
                    y = torch.cat([y, torch.full((len(chunk),), unk, dtype=torch.int64)])
                loss = F.cross_entropy(logits, y)
                optimizer.zero_grad()
                loss.backward()
                optimizer.step()
                scheduler.step()
    model.eval()
    return model


def open_accuracy(known_pred: np.ndarray, known_truth: np.ndarray, open_pred: np.ndarray) -> float:
    known_recall = float(np.mean(known_pred == known_truth)) if len(known_truth) else 0.0
    open_recall = float(np.mean(open_pred == UNKNOWN_INDEX)) if len(open_pred) else 0.0
    return 0.5 * (known_recall + open_recall)


def calibrate_sigma(
    known_logits: np.ndarray,
    known_truth: np.ndarray,
    open_logits: np.ndarray,
    grid: Sequence[float],
    model: OpenWorldClassifier,
    known_only_argmax: bool = True,
) -> tuple[float, dict[float, float]]:
    """Grid-search the threshold maximising open-world accuracy.

    ``known_truth`` holds class indices of the validation knowns. Ties go to
    the smaller sigma. Returns the chosen sigma and the score per grid value.
    """
    grid = sorted(float(s) for s in grid)
    if not grid:
        raise ValueError("sigma grid is empty")
    if any(not 0.0 < s <= 1.0 for s in grid):
        raise ValueError("sigma grid values must lie in (0, 1]")
    if len(known_logits) == 0 or len(open_logits) == 0:
        raise ValueError("calibration needs both known and open samples")
    scores = {}
    for s in grid:
        d = DecisionConfig(s, known_only_argmax)
        scores[s] = open_accuracy(
            decide_logits(model, known_logits, d), np.asarray(known_truth), decide_logits(model, open_logits, d)
        )
    best = max(grid, key=lambda s: (scores[s], -s))
    return best, scores


def save_classifier(model: OpenWorldClassifier, path, extra: dict | None = None) -> str:
    meta = {
        "kind": "classifier",
        "classes": model.classes,
        "unknown_node": model.unknown_node,
        "unknown_node_trained": model.unknown_node_trained,
        "encoder_config": model.encoder.config.to_dict(),
        "vocab_size": model.encoder.vocab_size,
    }
    meta.update(extra or {})
    return checkpoint.save(path, model.state_dict(), meta)


def load_classifier(path) -> tuple[OpenWorldClassifier, dict]:
    tensors, meta = checkpoint.load(path)
    if meta.get("kind") != "classifier":
        raise ValueError(f"{path} is not a classifier checkpoint")
    encoder = FlowEncoder(EncoderConfig(**meta["encoder_config"]), meta["vocab_size"])
    model = OpenWorldClassifier(encoder, meta["classes"], meta["unknown_node"])
    model.load_state_dict({k: torch.from_numpy(v) for k, v in tensors.items()})
    model.unknown_node_trained = meta["unknown_node_trained"]
    model.eval()
    return model, meta
