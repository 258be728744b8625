"""Run configuration: one YAML file per experiment, layered over a preset.

Schema (every key optional; omitted keys keep the preset value)::

    seed: 0
    paths:      {corpus: null, workdir: null}
    corpus:     CorpusSpec fields (used by gen-corpus)
    tokenizer:  {M: 6, N: 128, max_vocab: 30000, strip_prefix: 0}
    encoder:    EncoderConfig fields
    pretrain:   ContrastiveConfig fields
    margins:    {policy: quantile, q: 0.95, epsilon: null, epsilon_rel: 0.1, bsf: true}
    gan:        GanConfig fields plus synthetic_count, calibration_count
    classifier: FinetuneConfig fields plus sigma_grid, known_only_argmax, baseline
    eval:       {known_fraction: 0.8, ratios: [8, 1, 1], seeds: [0, 1, 2],
                 unknown_fractions: [0.1, 0.2, 0.3, 0.4, 0.5]}

``seed`` overrides the seed of every section that has one.
"""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields, replace
from typing import Any

import yaml

from .classifier import DEFAULT_SIGMA_GRID, FinetuneConfig
from .encoder import PRESETS as ENCODER_PRESETS
from .encoder import EncoderConfig
from .errors import ConfigError
from .gan import GanConfig
from .pretrain import ContrastiveConfig
from .synthgen import CorpusSpec
from .tokenizer import DEFAULT_M, DEFAULT_MAX_VOCAB, DEFAULT_N, sequence_length


@dataclass(frozen=True)
class TokenizerConfig:
    M: int = DEFAULT_M
    N: int = DEFAULT_N
    max_vocab: int = DEFAULT_MAX_VOCAB
    strip_prefix: int = 0

    def __post_init__(self):
        if self.M < 0 or self.N < 0:
            raise ConfigError("M and N must be non-negative")
        if self.max_vocab < 5:
            raise ConfigError(f"max_vocab must be >= 5, got {self.max_vocab}")
        if self.strip_prefix < 0:
            raise ConfigError("strip_prefix must be non-negative")


@dataclass(frozen=True)
class MarginsConfig:
    policy: str = "quantile"
    q: float = 0.95
    epsilon: float | None = None
    epsilon_rel: float = 0.1
    bsf: bool = True

    def __post_init__(self):
        if self.policy not in ("max", "quantile"):
            raise ConfigError(f"margins.policy must be 'max' or 'quantile', got {self.policy!r}")
        if not 0.0 < self.q <= 1.0:
            raise ConfigError("margins.q must be in (0, 1]")
        if self.epsilon is not None and self.epsilon <= 0:
            raise ConfigError("margins.epsilon must be > 0")
        if self.epsilon_rel <= 0:
            raise ConfigError("margins.epsilon_rel must be > 0")


@dataclass(frozen=True)
class GanSection:
    model: GanConfig = field(default_factory=GanConfig)
    synthetic_count: int | None = None
    calibration_count: int | None = None


@dataclass(frozen=True)
class ClassifierSection:
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    sigma_grid: tuple[float, ...] = DEFAULT_SIGMA_GRID
    known_only_argmax: bool = True
    baseline: bool = True

    def __post_init__(self):
        grid = tuple(float(s) for s in self.sigma_grid)
        if not grid or any(not 0.0 < s <= 1.0 for s in grid):
            raise ConfigError("classifier.sigma_grid must be non-empty with values in (0, 1]")
        object.__setattr__(self, "sigma_grid", grid)


@dataclass(frozen=True)
class EvalConfig:
    known_fraction: float = 0.8
    ratios: tuple[float, float, float] = (8, 1, 1)
    seeds: tuple[int, ...] = (0, 1, 2)
    unknown_fractions: tuple[float, ...] = (0.1, 0.2, 0.3, 0.4, 0.5)

    def __post_init__(self):
        if not 0.0 < self.known_fraction < 1.0:
            raise ConfigError("eval.known_fraction must be in (0, 1)")
        object.__setattr__(self, "ratios", tuple(self.ratios))
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        object.__setattr__(self, "unknown_fractions", tuple(float(f) for f in self.unknown_fractions))
        if len(self.ratios) != 3:
            raise ConfigError("eval.ratios needs three values")
        if any(not 0.0 < f < 1.0 for f in self.unknown_fractions):
            raise ConfigError("eval.unknown_fractions must lie in (0, 1)")


@dataclass(frozen=True)
class Paths:
    corpus: str | None = None
    workdir: str | None = None


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    paths: Paths = field(default_factory=Paths)
    corpus: CorpusSpec = field(default_factory=CorpusSpec)
    tokenizer: TokenizerConfig = field(default_factory=TokenizerConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    pretrain: ContrastiveConfig = field(default_factory=ContrastiveConfig)
    margins: MarginsConfig = field(default_factory=MarginsConfig)
    gan: GanSection = field(default_factory=GanSection)
    classifier: ClassifierSection = field(default_factory=ClassifierSection)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def __post_init__(self):
        length = sequence_length(self.tokenizer.M, self.tokenizer.N)
        if length > self.encoder.max_seq:
            raise ConfigError(
                f"tokenizer sequence length {length} (M={self.tokenizer.M}, N={self.tokenizer.N}) "
                f"exceeds encoder.max_seq {self.encoder.max_seq}"
            )

    def with_seed(self, seed: int) -> "RunConfig":
        return replace(
            self,
            seed=seed,
            corpus=replace(self.corpus, seed=seed),
            pretrain=replace(self.pretrain, seed=seed),
            gan=replace(self.gan, model=replace(self.gan.model, seed=seed)),
            classifier=replace(self.classifier, finetune=replace(self.classifier.finetune, seed=seed)),
        )

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["gan"] = {**d["gan"].pop("model"), **d["gan"]}
        d["classifier"] = {**d["classifier"].pop("finetune"), **d["classifier"]}
        return _plain(d)

    def section_hash(self, *names: str) -> str:
        d = self.to_dict()
        blob = json.dumps({n: d[n] for n in names}, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()

    def digest(self) -> str:
        d = self.to_dict()
        d.pop("paths")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _build(cls, values: dict, where: str):
    names = {f.name for f in fields(cls)}
    unknown = set(values) - names
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(sorted(unknown))}")
    try:
        return cls(**values)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from None


def from_dict(data: dict) -> RunConfig:
    data = copy.deepcopy(data or {})
    top = {f.name for f in fields(RunConfig)}
    unknown = set(data) - top
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(sorted(unknown))}")
    gan = dict(data.get("gan") or {})
    gan_extra = {k: gan.pop(k) for k in ("synthetic_count", "calibration_count") if k in gan}
    clf = dict(data.get("classifier") or {})
    clf_extra = {k: clf.pop(k) for k in ("sigma_grid", "known_only_argmax", "baseline") if k in clf}
    cfg = RunConfig(
        seed=int(data.get("seed", 0)),
        paths=_build(Paths, data.get("paths") or {}, "paths"),
        corpus=_build(CorpusSpec, data.get("corpus") or {}, "corpus"),
        tokenizer=_build(TokenizerConfig, data.get("tokenizer") or {}, "tokenizer"),
        encoder=_build(EncoderConfig, data.get("encoder") or {}, "encoder"),
        pretrain=_build(ContrastiveConfig, data.get("pretrain") or {}, "pretrain"),
        margins=_build(MarginsConfig, data.get("margins") or {}, "margins"),
        gan=_build(GanSection, {"model": _build(GanConfig, gan, "gan"), **gan_extra}, "gan"),
        classifier=_build(
            ClassifierSection, {"finetune": _build(FinetuneConfig, clf, "classifier"), **clf_extra}, "classifier"
        ),
        eval=_build(EvalConfig, data.get("eval") or {}, "eval"),
    )
    return cfg.with_seed(cfg.seed) if "seed" in data else cfg


def _merge(base: dict, override: dict) -> dict:
    out = dict(base)
    for k, v in (override or {}).items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def _encoder_preset(name: str) -> dict:
    # d_model is derived from heads x head_dim; leaving it out lets a config override either
    d = dataclasses.asdict(ENCODER_PRESETS[name])
    d.pop("d_model")
    return d


PRESET_OVERRIDES: dict[str, dict[str, Any]] = {
    "paper": {
        "encoder": _encoder_preset("paper"),
        "pretrain": {"learning_rate": 5e-5, "warmup_fraction": 0.03, "steps": 10000, "batch_size": 32},
        "classifier": {"learning_rate": 5e-5, "epochs": 5, "sigma_grid": list(DEFAULT_SIGMA_GRID)},
    },
    "desk": {
        "encoder": _encoder_preset("desk"),
        "pretrain": {"learning_rate": 1e-3, "warmup_fraction": 0.1, "steps": 200, "batch_size": 16},
        # a 0.1 band leaves two or three marginal flows per class at this corpus size
        "margins": {"epsilon_rel": 0.2},
        "gan": {
            "steps": 1000,
            "batch_size": 64,
            "latent_dim": 16,
            "gen_hidden": [128, 128],
            "dis_hidden": [128, 128],
            "per_class": True,
        },
        # head-only training on frozen embeddings; short encoder updates on a CPU undo the class geometry
        "classifier": {"learning_rate": 3e-3, "epochs": 30, "batch_size": 32, "finetune_encoder": False},
    },
}


def preset(name: str) -> dict:
    if name not in PRESET_OVERRIDES:
        raise ConfigError(f"unknown preset {name!r}; choose from {', '.join(PRESET_OVERRIDES)}")
    return copy.deepcopy(PRESET_OVERRIDES[name])


def load_config(path: str | None = None, preset_name: str = "desk", overrides: dict | None = None) -> RunConfig:
    data = preset(preset_name)
    if path:
        try:
            with open(path, encoding="utf-8") as fh:
                loaded = yaml.safe_load(fh) or {}
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        except yaml.YAMLError as exc:
            raise ConfigError(f"invalid YAML in {path}: {exc}") from None
        if not isinstance(loaded, dict):
            raise ConfigError(f"{path} must hold a mapping at top level")
        data = _merge(data, loaded)
    data = _merge(data, overrides or {})
    return from_dict(data)


def desk_config(**overrides) -> RunConfig:
    return load_config(None, "desk", overrides)
