"""Labeled synthetic flow corpora with tunable separability and shared backgrounds.

Every class has a profile: a handful of favoured two-byte payload tokens and
a motif of signed packet lengths. ``skew`` is the probability that a token
or a packet length is drawn from the profile rather than uniformly, so
``skew=0`` gives indistinguishable classes and ``skew=1`` fully scripted
ones. ``skew_jitter`` scales each flow's skew by a uniform draw from
``[1 - skew_jitter, 1]`` so every class has typical and atypical members.

Classes come in families of ``family_size`` siblings (think apps from one
developer). Siblings inherit a ``family_overlap`` share of their favoured
tokens and motif positions from a common family profile, so an unseen
sibling of a known class sits close to it.

A ``tpl_share_fraction`` of each class's flows talk to a small pool of
shared third-party backgrounds (same destination, SNI and certificate in
every class). Their content is drawn from the shared endpoint's own profile
with probability ``tpl_homogeneity`` and from the class profile otherwise,
which makes them look alike across classes.
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass

import numpy as np

from .flows import INBOUND, OUTBOUND, BackgroundMeta, FlowRecord, PacketView

HEADER_OVERHEAD = 40
MAX_PAYLOAD = 96


@dataclass(frozen=True)
class CorpusSpec:
    num_classes: int = 10
    flows_per_class: int = 200
    skew: float = 0.5
    skew_jitter: float = 0.8
    favored_tokens: int = 8
    family_size: int = 2
    family_overlap: float = 0.5
    motif_length: int = 6
    packets: tuple[int, int] = (12, 40)
    tpl_share_fraction: float = 0.2
    tpl_homogeneity: float = 0.4
    shared_pool_size: int = 4
    backgrounds_per_class: int = 6
    missing_sni_fraction: float = 0.1
    label_prefix: str = "app"
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 1 or self.flows_per_class < 1:
            raise ValueError("num_classes and flows_per_class must be positive")
        if not 0.0 <= self.skew <= 1.0:
            raise ValueError("skew must be in [0, 1]")
        if not 0.0 <= self.skew_jitter <= 1.0:
            raise ValueError("skew_jitter must be in [0, 1]")
        if self.family_size < 1 or not 0.0 <= self.family_overlap <= 1.0:
            raise ValueError("family_size must be >= 1 and family_overlap in [0, 1]")
        if not 0.0 <= self.tpl_share_fraction < 1.0:
            raise ValueError("tpl_share_fraction must be in [0, 1)")
        if self.tpl_share_fraction > 0 and self.shared_pool_size < 1:
            raise ValueError("a shared background pool is needed when tpl_share_fraction > 0")
        if self.packets[0] < 1 or self.packets[1] < self.packets[0]:
            raise ValueError("packets must be a (min, max) range with min >= 1")
        object.__setattr__(self, "packets", tuple(self.packets))

    def to_dict(self) -> dict:
        return asdict(self)

    def label(self, c: int) -> str:
        width = max(2, len(str(self.num_classes - 1)))
        return f"{self.label_prefix}{c:0{width}d}"


@dataclass
class _Profile:
    tokens: np.ndarray  # (F, 2) uint8
    motif: np.ndarray  # signed lengths


def _profile(rng: np.random.Generator, spec: CorpusSpec) -> _Profile:
    tokens = rng.integers(0, 256, size=(spec.favored_tokens, 2), dtype=np.uint8)
    sizes = rng.integers(HEADER_OVERHEAD + 20, 1500, size=spec.motif_length)
    signs = np.where(rng.random(spec.motif_length) < 0.5, 1, -1)
    signs[0] = 1
    return _Profile(tokens, sizes * signs)


def _sibling(rng: np.random.Generator, spec: CorpusSpec, family: _Profile) -> _Profile:
    own = _profile(rng, spec)
    k = int(round(spec.family_overlap * spec.favored_tokens))
    tokens = np.concatenate([family.tokens[:k], own.tokens[k:]])
    inherit = rng.random(spec.motif_length) < spec.family_overlap
    return _Profile(tokens, np.where(inherit, family.motif, own.motif))


def _digest(text: str) -> str:
    return hashlib.sha256(text.encode()).hexdigest()[:32]


def _make_flow(rng, spec: CorpusSpec, own: _Profile, tpl: _Profile | None, flow_id, label, background) -> FlowRecord:
    n_packets = int(rng.integers(spec.packets[0], spec.packets[1] + 1))
    mix = spec.tpl_homogeneity if tpl is not None else 0.0
    skew = spec.skew * (1.0 - spec.skew_jitter * rng.random())
    packets = []
    for i in range(n_packets):
        prof = tpl if rng.random() < mix else own
        if rng.random() < skew:
            signed = int(prof.motif[i % len(prof.motif)])
        else:
            signed = int(rng.integers(HEADER_OVERHEAD, 1500)) * (1 if rng.random() < 0.5 else -1)
        length = abs(signed)
        n_tokens = min(length - HEADER_OVERHEAD, MAX_PAYLOAD) // 2
        payload = bytearray()
        for j in range(max(n_tokens, 0)):
            prof = tpl if rng.random() < mix else own
            if rng.random() < skew:
                payload += prof.tokens[(i + j) % len(prof.tokens)].tobytes()
            else:
                payload += rng.integers(0, 256, size=2, dtype=np.uint8).tobytes()
        packets.append(PacketView(OUTBOUND if signed > 0 else INBOUND, length, bytes(payload)))
    return FlowRecord(flow_id=flow_id, label=label, packets=tuple(packets), background=background)


def generate_corpus(spec: CorpusSpec) -> list[FlowRecord]:
    rng = np.random.default_rng(spec.seed)
    if spec.family_size == 1:
        profiles = [_profile(rng, spec) for _ in range(spec.num_classes)]
    else:
        families = [_profile(rng, spec) for _ in range(-(-spec.num_classes // spec.family_size))]
        profiles = [_sibling(rng, spec, families[c // spec.family_size]) for c in range(spec.num_classes)]
    pool = []
    for s in range(spec.shared_pool_size if spec.tpl_share_fraction > 0 else 0):
        sni = f"cdn{s}.shared-lib.example"
        bg = BackgroundMeta(f"198.51.100.{s + 1}", 443, sni, _digest("cert:" + sni))
        pool.append((bg, _profile(rng, spec)))

    flows = []
    n_shared = int(round(spec.tpl_share_fraction * spec.flows_per_class))
    for c in range(spec.num_classes):
        label = spec.label(c)
        shared_slots = set(rng.permutation(spec.flows_per_class)[:n_shared].tolist())
        k = 0
        for j in range(spec.flows_per_class):
            flow_id = f"{label}-{j:05d}"
            if j in shared_slots:
                bg, tpl = pool[k % len(pool)]
                k += 1
            else:
                b = j % spec.backgrounds_per_class
                sni = f"{label}-svc{b}.example"
                if rng.random() < spec.missing_sni_fraction:
                    bg = BackgroundMeta(f"10.{c // 256}.{c % 256}.{b + 1}", 443)
                else:
                    bg = BackgroundMeta(f"10.{c // 256}.{c % 256}.{b + 1}", 443, sni, _digest("cert:" + sni))
                tpl = None
            flows.append(_make_flow(rng, spec, profiles[c], tpl, flow_id, label, bg))
    return flows


def token_histograms(flows, M: int = 6) -> dict[str, dict[str, float]]:
    """Normalised NP-token histogram per class label."""
    from .tokenizer import iter_np_tokens

    counts: dict[str, dict[str, int]] = {}
    for flow in flows:
        h = counts.setdefault(flow.label, {})
        for tok in iter_np_tokens(flow, M):
            h[tok] = h.get(tok, 0) + 1
    out = {}
    for label, h in counts.items():
        total = sum(h.values()) or 1
        out[label] = {t: n / total for t, n in h.items()}
    return out


def total_variation(p: dict[str, float], q: dict[str, float]) -> float:
    keys = set(p) | set(q)
    return 0.5 * sum(abs(p.get(k, 0.0) - q.get(k, 0.0)) for k in keys)
