"""Frequency-ordered token dictionary and the fixed-length flow encoding.

A flow becomes ``CLS + NP + SEP + PL`` where

* NP holds the first ``M`` payload-bearing packets, 64 payload bytes each,
  cut into two-byte tokens (``"1a2b"``). Every packet owns a block of 32
  slots; a short payload pads its own block so slot positions stay aligned
  with packet positions. An odd trailing byte is dropped.
* PL holds the signed lengths of the first ``N`` packets (``"+328"``,
  ``"-1074"``).

With the defaults ``M=6, N=128`` a sequence is ``6*32 + 128 + 2 = 322`` ids.
"""

from __future__ import annotations

import hashlib
import os
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Sequence

import numpy as np

from .errors import ConfigError
from .flows import FlowRecord

CLS, SEP, PAD, UNK = 0, 1, 2, 3
SPECIAL_TOKENS = ("[CLS]", "[SEP]", "[PAD]", "[UNK]")
NUM_SPECIALS = len(SPECIAL_TOKENS)

PAYLOAD_WINDOW = 64
TOKENS_PER_PACKET = PAYLOAD_WINDOW // 2

DEFAULT_M = 6
DEFAULT_N = 128
DEFAULT_MAX_VOCAB = 30_000


def sequence_length(M: int, N: int) -> int:
    return M * TOKENS_PER_PACKET + N + 2


def payload_tokens(payload: bytes) -> list[str]:
    """Split the first 64 payload bytes into two-byte hex tokens."""
    window = payload[:PAYLOAD_WINDOW]
    return [window[i : i + 2].hex() for i in range(0, len(window) - 1, 2)]


def length_token(signed_length: int) -> str:
    return f"{signed_length:+d}"


def np_packets(flow: FlowRecord, M: int):
    return [p for p in flow.packets if p.payload][:M]


def iter_np_tokens(flow: FlowRecord, M: int) -> Iterator[str]:
    for packet in np_packets(flow, M):
        yield from payload_tokens(packet.payload)


def iter_pl_tokens(flow: FlowRecord, N: int) -> Iterator[str]:
    for packet in flow.packets[:N]:
        yield length_token(packet.signed_length)


@dataclass(frozen=True)
class Vocabulary:
    """Token-to-id maps; ids 0-3 are the specials, the rest by frequency."""

    np_tokens: dict[str, int]
    pl_tokens: dict[str, int]
    M: int = DEFAULT_M
    N: int = DEFAULT_N
    _by_id: list[str] = field(default_factory=list, repr=False, compare=False)

    def __post_init__(self):
        by_id = list(SPECIAL_TOKENS) + [""] * (len(self.np_tokens) + len(self.pl_tokens))
        for table in (self.np_tokens, self.pl_tokens):
            for tok, idx in table.items():
                by_id[idx] = tok
        object.__setattr__(self, "_by_id", by_id)

    @property
    def size(self) -> int:
        return NUM_SPECIALS + len(self.np_tokens) + len(self.pl_tokens)

    @property
    def seq_len(self) -> int:
        return sequence_length(self.M, self.N)

    def token(self, idx: int) -> str:
        return self._by_id[idx]

    def lines(self) -> list[str]:
        return [f"{tok}\t{idx}" for idx, tok in enumerate(self._by_id)]

    def save(self, path: str | os.PathLike) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("\n".join(self.lines()) + "\n")

    @classmethod
    def load(cls, path: str | os.PathLike, M: int = DEFAULT_M, N: int = DEFAULT_N) -> "Vocabulary":
        np_tokens: dict[str, int] = {}
        pl_tokens: dict[str, int] = {}
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh):
                line = line.rstrip("\n")
                if not line:
                    continue
                tok, idx_s = line.split("\t")
                idx = int(idx_s)
                if idx < NUM_SPECIALS:
                    if tok != SPECIAL_TOKENS[idx]:
                        raise ValueError(f"special token mismatch at id {idx}: {tok!r}")
                elif tok[0] in "+-":
                    pl_tokens[tok] = idx
                else:
                    np_tokens[tok] = idx
        return cls(np_tokens=np_tokens, pl_tokens=pl_tokens, M=M, N=N)

    def digest(self) -> str:
        return hashlib.sha256("\n".join(self.lines()).encode()).hexdigest()


def build_vocab(
    flows: Iterable[FlowRecord],
    max_vocab: int = DEFAULT_MAX_VOCAB,
    M: int = DEFAULT_M,
    N: int = DEFAULT_N,
) -> Vocabulary:
    """Count NP and PL tokens over ``flows`` and keep the most frequent.

    Ties in frequency are broken by lexicographic token order, so the
    result depends only on the multiset of tokens.
    """
    if max_vocab < NUM_SPECIALS + 1:
        raise ConfigError(f"max_vocab must be >= {NUM_SPECIALS + 1}, got {max_vocab}")
    np_counts: Counter[str] = Counter()
    pl_counts: Counter[str] = Counter()
    for flow in flows:
        np_counts.update(iter_np_tokens(flow, M))
        pl_counts.update(iter_pl_tokens(flow, N))

    ranked = [(-n, tok) for tok, n in np_counts.items()]
    ranked += [(-n, tok) for tok, n in pl_counts.items()]
    ranked.sort()
    ranked = ranked[: max_vocab - NUM_SPECIALS]

    np_tokens: dict[str, int] = {}
    pl_tokens: dict[str, int] = {}
    for offset, (_, tok) in enumerate(ranked):
        target = pl_tokens if tok[0] in "+-" else np_tokens
        target[tok] = NUM_SPECIALS + offset
    return Vocabulary(np_tokens=np_tokens, pl_tokens=pl_tokens, M=M, N=N)


@dataclass(frozen=True)
class TokenSequence:
    ids: np.ndarray
    np_len_used: int
    pl_len_used: int

    def __len__(self) -> int:
        return len(self.ids)


def encode_flow(flow: FlowRecord, vocab: Vocabulary, M: int | None = None, N: int | None = None) -> TokenSequence:
    M = vocab.M if M is None else M
    N = vocab.N if N is None else N
    ids = np.full(sequence_length(M, N), PAD, dtype=np.int64)
    ids[0] = CLS
    sep = 1 + M * TOKENS_PER_PACKET
    ids[sep] = SEP

    np_used = 0
    for block, packet in enumerate(np_packets(flow, M)):
        start = 1 + block * TOKENS_PER_PACKET
        for j, tok in enumerate(payload_tokens(packet.payload)):
            ids[start + j] = vocab.np_tokens.get(tok, UNK)
            np_used += 1

    pl_used = 0
    for j, tok in enumerate(iter_pl_tokens(flow, N)):
        ids[sep + 1 + j] = vocab.pl_tokens.get(tok, UNK)
        pl_used += 1
    return TokenSequence(ids=ids, np_len_used=np_used, pl_len_used=pl_used)


def encode_flows(flows: Sequence[FlowRecord], vocab: Vocabulary) -> np.ndarray:
    """Encode a corpus into an ``(n, seq_len)`` int64 matrix."""
    out = np.empty((len(flows), vocab.seq_len), dtype=np.int64)
    for i, flow in enumerate(flows):
        out[i] = encode_flow(flow, vocab).ids
    return out


def region_slices(M: int, N: int) -> dict[str, slice]:
    sep = 1 + M * TOKENS_PER_PACKET
    return {"np": slice(1, sep), "pl": slice(sep + 1, sep + 1 + N)}


def blank_region(ids: np.ndarray, M: int, N: int, region: str) -> np.ndarray:
    """Return a copy of ``ids`` with the ``"np"`` or ``"pl"`` region set to PAD."""
    out = np.array(ids, copy=True)
    out[..., region_slices(M, N)[region]] = PAD
    return out
