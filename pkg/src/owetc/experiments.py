"""End-to-end pipeline runs, the four-switch ablation, and the unknown-fraction sweep."""

from __future__ import annotations

import csv
import io
import logging
import time
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy.stats import spearmanr

from . import classifier as clf
from .config import RunConfig
from .encoder import FlowEncoder, embed, init_encoder
from .flows import FlowRecord, sanitize
from .gan import GanEnsemble, synthesize, train_gan
from .margins import (
    MarginalFlowSet,
    background_filter,
    build_background_index,
    build_prototypes,
    select_marginal,
)
from .metrics import MetricsReport, closed_metrics, combine, open_metrics
from .pretrain import run_pretraining
from .splits import SplitSpec, make_split
from .tokenizer import Vocabulary, blank_region, build_vocab, encode_flows

log = logging.getLogger(__name__)

ABLATION_SWITCHES = ("no_np", "no_pl", "no_cpt", "no_bsf")
CALIBRATION_SEED_OFFSET = 7919
FALLBACK_SIGMA = 0.7


@dataclass(frozen=True)
class Switches:
    no_np: bool = False
    no_pl: bool = False
    no_cpt: bool = False
    no_bsf: bool = False

    @property
    def name(self) -> str:
        on = [s for s in ABLATION_SWITCHES if getattr(self, s)]
        return "+".join(on) if on else "full"


def encode_corpus(flows: Sequence[FlowRecord], vocab: Vocabulary, switches: Switches = Switches()) -> np.ndarray:
    ids = encode_flows(flows, vocab)
    if switches.no_np:
        ids = blank_region(ids, vocab.M, vocab.N, "np")
    if switches.no_pl:
        ids = blank_region(ids, vocab.M, vocab.N, "pl")
    return ids


def pretrained_encoder(ids, labels, vocab_size: int, cfg: RunConfig, skip: bool = False):
    encoder = init_encoder(cfg.encoder, vocab_size, cfg.seed)
    if skip:
        encoder.eval()
        return encoder, []
    return run_pretraining(ids, labels, encoder, cfg.pretrain)


def find_marginal(
    embeddings: np.ndarray,
    flows: Sequence[FlowRecord],
    cfg: RunConfig,
    apply_bsf: bool = True,
) -> tuple[MarginalFlowSet, MarginalFlowSet]:
    """Marginal flows before and after background filtering."""
    labels = [f.label for f in flows]
    protos = build_prototypes(embeddings, labels, cfg.margins.policy, cfg.margins.q)
    marginal = select_marginal(
        protos, embeddings, labels, [f.flow_id for f in flows], cfg.margins.epsilon, cfg.margins.epsilon_rel
    )
    if not apply_bsf:
        return marginal, marginal
    index = build_background_index(flows)
    filtered = background_filter(marginal, index, {f.flow_id: f.background for f in flows})
    return marginal, filtered


def train_generators(embeddings: np.ndarray, class_ids: Sequence, cfg: RunConfig):
    """Fit the pooled GAN (or one per class) on marginal embeddings; ``None`` if too few."""
    gcfg = cfg.gan.model
    data = np.asarray(embeddings, dtype=np.float32)
    if len(data) < 2:
        log.warning("only %d marginal flows; no synthetic unknowns generated", len(data))
        return None
    if not gcfg.per_class:
        gan, _ = train_gan(data, replace(gcfg, batch_size=min(gcfg.batch_size, len(data))))
        return gan
    ensemble = GanEnsemble()
    class_ids = np.asarray(class_ids)
    for c in sorted(set(class_ids.tolist()), key=str):
        rows = data[class_ids == c]
        if len(rows) >= 2:
            ensemble.members[c], _ = train_gan(rows, replace(gcfg, batch_size=min(gcfg.batch_size, len(rows))))
    return ensemble if ensemble.members else None


def sample_unknowns(generator, counts: tuple[int, int], seed: int):
    """Training and calibration draws from independent seeds."""
    if generator is None:
        return None, None
    n_train, n_cal = counts
    draw = generator.synthesize if isinstance(generator, GanEnsemble) else (lambda n, s: synthesize(generator, n, s))
    return draw(n_train, seed), draw(n_cal, seed + CALIBRATION_SEED_OFFSET)


def synthetic_counts(cfg: RunConfig, n_train_flows: int, n_known: int) -> tuple[int, int]:
    """Default synthetic count is the mean number of training flows per known class."""
    n_syn = cfg.gan.synthetic_count if cfg.gan.synthetic_count is not None else int(round(n_train_flows / n_known))
    n_cal = cfg.gan.calibration_count if cfg.gan.calibration_count is not None else n_syn
    return n_syn, n_cal


def synthetic_unknowns(marginal: MarginalFlowSet, counts: tuple[int, int], cfg: RunConfig):
    """Train the GAN(s) on marginal embeddings; return (generator, train set, calibration set)."""
    generator = train_generators(marginal.embeddings(), [e.class_id for e in marginal.entries], cfg)
    return (generator, *sample_unknowns(generator, counts, cfg.gan.model.seed))


def evaluate_model(
    model: clf.OpenWorldClassifier,
    sigma: float,
    cw_ids: np.ndarray,
    cw_truth: Sequence[str],
    ow_ids: np.ndarray,
    ow_truth: Sequence[str],
    known_only_argmax: bool = True,
) -> MetricsReport:
    decision = clf.DecisionConfig(sigma, known_only_argmax)
    cw_pred = [model.label_of(int(i)) for i in clf.decide_logits(model, model.logits(cw_ids), decision)]
    ow_pred = [model.label_of(int(i)) for i in clf.decide_logits(model, model.logits(ow_ids), decision)]
    return combine(closed_metrics(cw_pred, cw_truth), open_metrics(ow_pred, ow_truth))


def calibrate_model(model: clf.OpenWorldClassifier, val_ids, val_truth, syn_cal, cfg: RunConfig):
    """Grid-search sigma on validation knowns plus held-out synthetic opens.

    Without synthetic opens the reference operating point is used instead.
    """
    if syn_cal is None or len(syn_cal) == 0:
        return FALLBACK_SIGMA, {}
    return clf.calibrate_sigma(
        model.logits(val_ids), val_truth, model.embedding_logits(syn_cal),
        cfg.classifier.sigma_grid, model, cfg.classifier.known_only_argmax,
    )


@dataclass
class PipelineResult:
    switches: Switches
    seed: int
    owcp: MetricsReport
    sigma: float
    baseline: MetricsReport | None = None
    baseline_sigma: float | None = None
    marginal_before: int = 0
    marginal_after: int = 0
    synthetic_count: int = 0
    timings: dict = field(default_factory=dict)

    def summary(self) -> dict:
        out = {
            "variant": self.switches.name,
            "seed": self.seed,
            "sigma": self.sigma,
            "AC": self.owcp.accuracy,
            "F1": self.owcp.macro_f1,
            "AC_ow": self.owcp.ac_ow,
            "F1_ow": self.owcp.f1_ow,
            "marginal_before": self.marginal_before,
            "marginal_after": self.marginal_after,
        }
        if self.baseline is not None:
            out.update({
                "baseline_sigma": self.baseline_sigma,
                "baseline_AC": self.baseline.accuracy,
                "baseline_F1": self.baseline.macro_f1,
                "baseline_AC_ow": self.baseline.ac_ow,
                "baseline_F1_ow": self.baseline.f1_ow,
            })
        return out


def run_pipeline(
    flows: Sequence[FlowRecord],
    split: SplitSpec,
    cfg: RunConfig,
    switches: Switches = Switches(),
    with_baseline: bool = True,
    cache: dict | None = None,
) -> PipelineResult:
    """Tokenize, pre-train, find marginal flows, synthesize unknowns, fine-tune, calibrate, score.

    ``cache`` (optional, caller-owned) shares tokenization and pre-training
    across runs that differ only in later switches.
    """
    timings: dict[str, float] = {}
    t0 = time.perf_counter()
    strip = cfg.tokenizer.strip_prefix
    by_id = {f.flow_id: sanitize(f, strip) for f in flows}
    train = [by_id[i] for i in split.train]
    val = [by_id[i] for i in split.val]
    cw = [by_id[i] for i in split.cw_test]
    ow = [by_id[i] for i in split.ow_test]
    known = split.known_classes
    unknown_set = set(split.unknown_classes)

    key = (switches.no_np, switches.no_pl, switches.no_cpt, cfg.seed)
    cache = {} if cache is None else cache
    if key not in cache:
        tk = cfg.tokenizer
        vocab = build_vocab(train, tk.max_vocab, tk.M, tk.N)
        train_ids = encode_corpus(train, vocab, switches)
        encoder, _ = pretrained_encoder(train_ids, [f.label for f in train], vocab.size, cfg, switches.no_cpt)
        cache[key] = (vocab, train_ids, encoder)
    vocab, train_ids, encoder = cache[key]
    timings["pretrain"] = time.perf_counter() - t0

    t = time.perf_counter()
    train_emb = embed(encoder, train_ids)
    before, after = find_marginal(train_emb, train, cfg, apply_bsf=not switches.no_bsf)
    counts = synthetic_counts(cfg, len(train), len(known))
    _, syn_train, syn_cal = synthetic_unknowns(after, counts, cfg)
    timings["margins_gan"] = time.perf_counter() - t

    t = time.perf_counter()
    train_labels = [f.label for f in train]
    ft = cfg.classifier.finetune
    owcp = clf.finetune(train_ids, train_labels, known, encoder, syn_train, ft, unknown_node=True)
    baseline = None
    if with_baseline:
        baseline = clf.finetune(train_ids, train_labels, known, encoder, None, ft, unknown_node=False)
    timings["finetune"] = time.perf_counter() - t

    t = time.perf_counter()
    val_ids = encode_corpus(val, vocab, switches)
    val_truth = np.array([known.index(f.label) for f in val])
    cw_ids = encode_corpus(cw, vocab, switches)
    ow_ids = encode_corpus(ow, vocab, switches)
    cw_truth = [f.label for f in cw]
    ow_truth = [clf.UNKNOWN if f.label in unknown_set else f.label for f in ow]
    if syn_cal is not None and len(syn_cal) == 0:
        syn_cal = None

    def calibrated(model):
        return calibrate_model(model, val_ids, val_truth, syn_cal, cfg)[0]

    sigma = calibrated(owcp)
    report = evaluate_model(owcp, sigma, cw_ids, cw_truth, ow_ids, ow_truth, cfg.classifier.known_only_argmax)
    result = PipelineResult(
        switches=switches, seed=cfg.seed, owcp=report, sigma=sigma,
        marginal_before=before.count_before_filter, marginal_after=len(after),
        synthetic_count=0 if syn_train is None else len(syn_train),
    )
    if syn_cal is None:
        result.owcp.flags.append(f"no synthetic unknowns; sigma fixed at {FALLBACK_SIGMA}")
    if baseline is not None:
        result.baseline_sigma = calibrated(baseline)
        result.baseline = evaluate_model(baseline, result.baseline_sigma, cw_ids, cw_truth, ow_ids, ow_truth)
    timings["evaluate"] = time.perf_counter() - t
    result.timings = timings
    log.info("pipeline %s seed %d: %s", switches.name, cfg.seed, result.summary())
    return result


def run_ablation(
    flows: Sequence[FlowRecord],
    split: SplitSpec,
    cfg: RunConfig,
    switches: Sequence[str] = ABLATION_SWITCHES,
) -> dict[str, PipelineResult]:
    """Full model plus one run per switch, all with identical seeds and configs."""
    bad = set(switches) - set(ABLATION_SWITCHES)
    if bad:
        raise ValueError(f"unsupported ablation switch(es): {', '.join(sorted(bad))}")
    cache: dict = {}
    results = {"full": run_pipeline(flows, split, cfg, Switches(), with_baseline=False, cache=cache)}
    for name in switches:
        results[name] = run_pipeline(flows, split, cfg, Switches(**{name: True}), with_baseline=False, cache=cache)
    return results


@dataclass
class SweepReport:
    rows: list[dict]

    def by_fraction(self) -> dict[float, dict]:
        out = {}
        for frac in sorted({r["fraction"] for r in self.rows}):
            sel = [r for r in self.rows if r["fraction"] == frac]
            entry = {"n": len(sel)}
            for m in ("AC", "F1", "AC_ow", "F1_ow"):
                vals = np.array([r[m] for r in sel], dtype=float)
                entry[m] = float(vals.mean())
                entry[m + "_spread"] = float(vals.std(ddof=1)) if len(vals) > 1 else None
            out[frac] = entry
        return out

    def spearman_per_seed(self, metric: str = "F1_ow") -> dict[int, float]:
        out = {}
        for seed in sorted({r["seed"] for r in self.rows}):
            sel = sorted((r for r in self.rows if r["seed"] == seed), key=lambda r: r["fraction"])
            if len(sel) < 2:
                continue
            rho = spearmanr([r["fraction"] for r in sel], [r[metric] for r in sel]).statistic
            out[seed] = float(rho)
        return out

    def mean_spearman(self, metric: str = "F1_ow") -> float:
        rhos = [r for r in self.spearman_per_seed(metric).values() if np.isfinite(r)]
        return float(np.mean(rhos)) if rhos else float("nan")

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["fraction", "seed", "AC", "F1", "AC_ow", "F1_ow"])
        for r in self.rows:
            writer.writerow([r["fraction"], r["seed"], r["AC"], r["F1"], r["AC_ow"], r["F1_ow"]])
        return buf.getvalue()


def run_sensitivity(
    flows: Sequence[FlowRecord],
    unknown_fractions: Sequence[float],
    seeds: Sequence[int],
    cfg: RunConfig,
) -> SweepReport:
    """Full pipeline per (unknown fraction, seed); the split is redrawn with each seed."""
    if any(not 0.0 < f < 1.0 for f in unknown_fractions):
        raise ValueError("unknown fractions must lie in (0, 1)")
    rows = []
    for frac in unknown_fractions:
        for seed in seeds:
            run_cfg = cfg.with_seed(seed)
            split = make_split(flows, 1.0 - frac, cfg.eval.ratios, seed)
            res = run_pipeline(flows, split, run_cfg, with_baseline=False)
            rows.append({"fraction": frac, "seed": seed, "AC": res.owcp.accuracy, "F1": res.owcp.macro_f1,
                         "AC_ow": res.owcp.ac_ow, "F1_ow": res.owcp.f1_ow})
    return SweepReport(rows)
