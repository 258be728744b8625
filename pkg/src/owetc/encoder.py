"""Multi-head self-attention encoder over token sequences.

Post-norm blocks (attention, add & norm, two-layer ReLU feed-forward, add &
norm) on top of scaled token embeddings plus a fixed sinusoidal position
table. The flow embedding is the final state at the CLS position. PAD
positions are excluded as attention keys.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import NamedTuple

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import checkpoint
from .errors import ConfigError
from .tokenizer import NUM_SPECIALS, PAD


@dataclass(frozen=True)
class EncoderConfig:
    heads: int = 8
    head_dim: int = 64
    ffn_dim: int = 1024
    layers: int = 6
    max_seq: int = 512
    dropout: float = 0.1
    # dropout on attention weights; off by default since it forces the slow attention kernel on CPU
    attention_dropout: float = 0.0
    d_model: int | None = None

    def __post_init__(self):
        if self.heads < 1 or self.head_dim < 1:
            raise ConfigError("heads and head_dim must be positive")
        expected = self.heads * self.head_dim
        if self.d_model is None:
            object.__setattr__(self, "d_model", expected)
        elif self.d_model != expected:
            raise ConfigError(
                f"d_model ({self.d_model}) must equal heads x head_dim ({self.heads} x {self.head_dim} = {expected})"
            )
        if self.layers < 1:
            raise ConfigError(f"layers must be >= 1, got {self.layers}")
        if self.ffn_dim < 1 or self.max_seq < 1:
            raise ConfigError("ffn_dim and max_seq must be positive")
        for name in ("dropout", "attention_dropout"):
            value = getattr(self, name)
            if not 0.0 <= value < 1.0:
                raise ConfigError(f"{name} must be in [0, 1), got {value}")

    def to_dict(self) -> dict:
        return asdict(self)


PRESETS = {
    "paper": EncoderConfig(heads=8, head_dim=64, ffn_dim=1024, layers=6, max_seq=512, dropout=0.1),
    "desk": EncoderConfig(heads=4, head_dim=16, ffn_dim=128, layers=2, max_seq=512, dropout=0.1),
}


def sinusoidal_table(max_seq: int, d_model: int) -> torch.Tensor:
    position = torch.arange(max_seq, dtype=torch.float64).unsqueeze(1)
    div = torch.exp(torch.arange(0, d_model, 2, dtype=torch.float64) * (-math.log(10000.0) / d_model))
    table = torch.zeros(max_seq, d_model, dtype=torch.float64)
    table[:, 0::2] = torch.sin(position * div)
    table[:, 1::2] = torch.cos(position * div)[:, : d_model // 2]
    return table.float()


class SelfAttention(nn.Module):
    def __init__(self, d_model: int, heads: int, dropout: float):
        super().__init__()
        self.heads = heads
        self.head_dim = d_model // heads
        self.q_proj = nn.Linear(d_model, d_model)
        self.k_proj = nn.Linear(d_model, d_model)
        self.v_proj = nn.Linear(d_model, d_model)
        self.out_proj = nn.Linear(d_model, d_model)
        self.dropout = dropout

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        b, n, _ = x.shape
        return x.view(b, n, self.heads, self.head_dim).transpose(1, 2)

    def forward(self, x, key_padding_mask, need_weights: bool = False):
        q, k, v = self._split(self.q_proj(x)), self._split(self.k_proj(x)), self._split(self.v_proj(x))
        keep = ~key_padding_mask[:, None, None, :]
        p = self.dropout if self.training else 0.0
        if need_weights:
            scores = q @ k.transpose(-1, -2) / math.sqrt(self.head_dim)
            scores = scores.masked_fill(~keep, float("-inf"))
            weights = torch.softmax(scores, dim=-1)
            out = F.dropout(weights, p, self.training) @ v
        else:
            weights = None
            out = F.scaled_dot_product_attention(q, k, v, attn_mask=keep, dropout_p=p)
        b, _, n, _ = out.shape
        out = out.transpose(1, 2).reshape(b, n, self.heads * self.head_dim)
        return self.out_proj(out), weights


class EncoderBlock(nn.Module):
    def __init__(self, config: EncoderConfig):
        super().__init__()
        d = config.d_model
        self.attn = SelfAttention(d, config.heads, config.attention_dropout)
        self.norm1 = nn.LayerNorm(d)
        self.ffn_in = nn.Linear(d, config.ffn_dim)
        self.ffn_out = nn.Linear(config.ffn_dim, d)
        self.norm2 = nn.LayerNorm(d)
        self.drop = nn.Dropout(config.dropout)

    def forward(self, x, key_padding_mask, need_weights: bool = False):
        a, weights = self.attn(x, key_padding_mask, need_weights)
        x = self.norm1(x + self.drop(a))
        f = self.ffn_out(self.drop(F.relu(self.ffn_in(x))))
        x = self.norm2(x + self.drop(f))
        return x, weights


class EncoderOutput(NamedTuple):
    states: torch.Tensor
    pooled: torch.Tensor
    attentions: list | None


class FlowEncoder(nn.Module):
    def __init__(self, config: EncoderConfig, vocab_size: int):
        super().__init__()
        if vocab_size < NUM_SPECIALS + 1:
            raise ConfigError(f"vocab_size must be >= {NUM_SPECIALS + 1}, got {vocab_size}")
        self.config = config
        self.vocab_size = vocab_size
        self.token_embedding = nn.Embedding(vocab_size, config.d_model)
        self.register_buffer("positional", sinusoidal_table(config.max_seq, config.d_model), persistent=False)
        self.embed_drop = nn.Dropout(config.dropout)
        self.blocks = nn.ModuleList(EncoderBlock(config) for _ in range(config.layers))

    @property
    def d_model(self) -> int:
        return self.config.d_model

    def forward(self, ids: torch.Tensor, pad_mask: torch.Tensor | None = None, return_attention: bool = False):
        """Encode a ``(batch, seq)`` id tensor.

        ``pad_mask`` marks positions excluded as attention keys and defaults
        to ``ids == PAD``.
        """
        if ids.dim() != 2:
            raise ValueError(f"expected (batch, seq) ids, got shape {tuple(ids.shape)}")
        seq = ids.shape[1]
        if seq > self.config.max_seq:
            raise ValueError(f"sequence length {seq} exceeds max_seq {self.config.max_seq}")
        if pad_mask is None:
            pad_mask = ids == PAD
        x = self.token_embedding(ids) * math.sqrt(self.d_model)
        x = x + self.positional[:seq].to(x.dtype)
        x = self.embed_drop(x)
        attentions = [] if return_attention else None
        for block in self.blocks:
            x, w = block(x, pad_mask, return_attention)
            if return_attention:
                attentions.append(w)
        return EncoderOutput(states=x, pooled=x[:, 0], attentions=attentions)


def init_encoder(config: EncoderConfig, vocab_size: int, seed: int) -> FlowEncoder:
    """Build an encoder whose weights depend only on ``seed``."""
    model = FlowEncoder(config, vocab_size)
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        nn.init.normal_(model.token_embedding.weight, 0.0, config.d_model**-0.5, generator=gen)
        for name, param in model.named_parameters():
            if name.startswith("token_embedding"):
                continue
            if "norm" in name:
                param.fill_(1.0 if name.endswith("weight") else 0.0)
            elif name.endswith("bias"):
                param.zero_()
            else:
                nn.init.xavier_uniform_(param, generator=gen)
    return model


@torch.no_grad()
def embed(encoder: FlowEncoder, ids: np.ndarray, batch_size: int = 128) -> np.ndarray:
    """Pooled CLS embeddings for an ``(n, seq)`` id matrix, in eval mode."""
    was_training = encoder.training
    encoder.eval()
    out = np.empty((len(ids), encoder.d_model), dtype=np.float32)
    for start in range(0, len(ids), batch_size):
        chunk = torch.as_tensor(ids[start : start + batch_size])
        out[start : start + len(chunk)] = encoder(chunk).pooled.numpy()
    encoder.train(was_training)
    return out


def save_encoder(encoder: FlowEncoder, path, vocab_hash: str = "", extra: dict | None = None) -> str:
    meta = {
        "kind": "encoder",
        "config": encoder.config.to_dict(),
        "vocab_size": encoder.vocab_size,
        "vocab_hash": vocab_hash,
    }
    meta.update(extra or {})
    return checkpoint.save(path, encoder.state_dict(), meta)


def load_encoder(path) -> tuple[FlowEncoder, dict]:
    tensors, meta = checkpoint.load(path)
    if meta.get("kind") != "encoder":
        raise ValueError(f"{path} is not an encoder checkpoint")
    config = EncoderConfig(**meta["config"])
    model = FlowEncoder(config, meta["vocab_size"])
    model.load_state_dict({k: torch.from_numpy(v) for k, v in tensors.items()})
    return model, meta
