"""Command-line driver: one workdir per experiment, one manifest entry per stage.

Each stage reads the artifacts of its upstream stages from the workdir and
records ``{stage, inputs, config_hash, config, seed, outputs}`` in
``manifest.json``, where inputs and outputs map file names to SHA-256
digests. Re-running a stage whose config and inputs are unchanged is a
no-op; a changed config is refused (with a per-key diff) unless ``--force``.

Exit codes: 0 ok, 1 other failure, 2 config error, 3 missing stage,
4 numeric failure.
"""

from __future__ import annotations

import argparse
import errno
import hashlib
import json
import logging
import os
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import checkpoint
from . import classifier as clf
from .config import RunConfig, load_config
from .encoder import embed, init_encoder, load_encoder, save_encoder
from .errors import ConfigError, MissingStageError, NumericError, OwetcError
from .experiments import (
    calibrate_model,
    encode_corpus,
    evaluate_model,
    find_marginal,
    run_ablation,
    run_sensitivity,
    sample_unknowns,
    synthetic_counts,
    train_generators,
)
from .flows import FlowRecord, load_flows, sanitize, validate_corpus, write_flows
from .gan import GanEnsemble, save_gan
from .margins import write_marginal
from .pretrain import run_pretraining, write_log
from .splits import SplitSpec, make_split
from .synthgen import generate_corpus
from .tokenizer import Vocabulary, build_vocab

log = logging.getLogger("owetc")

EXIT_OK, EXIT_FAILURE, EXIT_CONFIG, EXIT_MISSING, EXIT_NUMERIC = 0, 1, 2, 3, 4

MANIFEST = "manifest.json"
LOCK = ".owetc.lock"
CORPUS = "corpus.jsonl"

# stage -> direct upstream stages; "corpus" is gen-corpus or an external paths.corpus file
UPSTREAM: dict[str, tuple[str, ...]] = {
    "gen-corpus": (),
    "build-vocab": ("corpus",),
    "pretrain": ("build-vocab",),
    "margins": ("build-vocab", "pretrain"),
    "train-gan": ("build-vocab", "margins"),
    "finetune": ("build-vocab", "pretrain", "train-gan"),
    "calibrate": ("build-vocab", "finetune", "train-gan"),
    "evaluate": ("build-vocab", "finetune", "calibrate"),
    "ablate": ("build-vocab",),
    "sweep": ("corpus",),
}

# config sections each stage depends on (besides its inputs)
SECTIONS: dict[str, tuple[str, ...]] = {
    "gen-corpus": ("corpus",),
    "build-vocab": ("tokenizer", "eval"),
    "pretrain": ("encoder", "pretrain"),
    "margins": ("margins",),
    "train-gan": ("gan",),
    "finetune": ("classifier",),
    "calibrate": ("classifier",),
    "evaluate": ("classifier",),
    "ablate": ("tokenizer", "encoder", "pretrain", "margins", "gan", "classifier"),
    "sweep": ("tokenizer", "encoder", "pretrain", "margins", "gan", "classifier", "eval"),
}

PIPELINE = ("gen-corpus", "build-vocab", "pretrain", "margins", "train-gan", "finetune", "calibrate", "evaluate")


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _flatten(d, prefix=""):
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


def config_diff(old: dict, new: dict) -> list[str]:
    a, b = _flatten(old), _flatten(new)
    lines = []
    for key in sorted(set(a) | set(b)):
        if a.get(key, "<unset>") != b.get(key, "<unset>"):
            lines.append(f"  {key}: {a.get(key, '<unset>')!r} -> {b.get(key, '<unset>')!r}")
    return lines


class WorkdirLock:
    """Exclusive writer lock; a lock left by a dead process is taken over."""

    def __init__(self, workdir: Path):
        self.path = workdir / LOCK

    def __enter__(self):
        for _ in range(2):
            try:
                fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
            except FileExistsError:
                try:
                    pid = int(self.path.read_text().strip() or 0)
                except (OSError, ValueError):
                    pid = 0
                if pid and _alive(pid):
                    raise OwetcError(f"workdir is locked by running process {pid} ({self.path})") from None
                self.path.unlink(missing_ok=True)
                continue
            with os.fdopen(fd, "w") as fh:
                fh.write(str(os.getpid()))
            return self
        raise OwetcError(f"could not acquire {self.path}")

    def __exit__(self, *exc):
        self.path.unlink(missing_ok=True)


def _alive(pid: int) -> bool:
    try:
        os.kill(pid, 0)
    except OSError as exc:
        return exc.errno == errno.EPERM
    return True


@dataclass
class Workdir:
    root: Path
    cfg: RunConfig

    def __post_init__(self):
        self.root = Path(self.root)
        self.root.mkdir(parents=True, exist_ok=True)

    def path(self, name: str) -> Path:
        return self.root / name

    # manifest

    def manifest(self) -> dict:
        p = self.path(MANIFEST)
        return json.loads(p.read_text(encoding="utf-8")) if p.exists() else {"stages": {}}

    def record(self, entry: dict) -> None:
        m = self.manifest()
        m["stages"][entry["stage"]] = entry
        write_json(self.path(MANIFEST), m)

    def corpus_path(self) -> Path:
        return Path(self.cfg.paths.corpus) if self.cfg.paths.corpus else self.path(CORPUS)

    def stage_outputs(self, stage: str) -> dict[str, str]:
        """Current digests of a completed stage's outputs; raises if missing or altered."""
        if stage == "corpus":
            if self.cfg.paths.corpus:
                p = self.corpus_path()
                if not p.exists():
                    raise ConfigError(f"paths.corpus does not exist: {p}")
                return {f"corpus:{p.name}": sha256_file(p)}
            stage = "gen-corpus"
        entry = self.manifest()["stages"].get(stage)
        if entry is None:
            raise MissingStageError(stage)
        current = {}
        for name, digest in entry["outputs"].items():
            p = self.path(name)
            if not p.exists() or sha256_file(p) != digest:
                log.error("artifact %s of stage %s is missing or was modified", name, stage)
                raise MissingStageError(stage)
            current[name] = digest
        return current

    def inputs(self, stage: str) -> dict[str, str]:
        out = {}
        for up in UPSTREAM[stage]:
            out.update(self.stage_outputs(up))
        return out

    def config_view(self, stage: str) -> dict:
        d = self.cfg.to_dict()
        view = {name: d[name] for name in SECTIONS[stage]}
        view["seed"] = self.cfg.seed
        return view

    # shared loaders

    def flows(self) -> dict[str, FlowRecord]:
        strip = self.cfg.tokenizer.strip_prefix
        return {f.flow_id: sanitize(f, strip) for f in load_flows(self.corpus_path())}

    def split(self) -> SplitSpec:
        return SplitSpec.from_json(self.path("split.json").read_text(encoding="utf-8"))

    def vocab(self) -> Vocabulary:
        return Vocabulary.load(self.path("vocab.txt"), self.cfg.tokenizer.M, self.cfg.tokenizer.N)


def run_stage(wd: Workdir, stage: str, force: bool = False) -> bool:
    """Run one manifest stage; returns False when it was already up to date."""
    inputs = wd.inputs(stage)
    view = wd.config_view(stage)
    config_hash = hashlib.sha256(json.dumps(view, sort_keys=True).encode()).hexdigest()
    previous = wd.manifest()["stages"].get(stage)
    if previous is not None and not force:
        if previous["config_hash"] != config_hash:
            diff = "\n".join(config_diff(previous.get("config", {}), view))
            raise ConfigError(
                f"stage {stage} was run with a different config; pass --force to overwrite.\n{diff}"
            )
        outputs_ok = all(wd.path(n).exists() and sha256_file(wd.path(n)) == h for n, h in previous["outputs"].items())
        if previous["inputs"] == inputs and outputs_ok:
            log.info("stage %s is up to date; nothing to do", stage)
            return False
    outputs = STAGE_FUNCS[stage](wd)
    wd.record({
        "stage": stage,
        "inputs": inputs,
        "config_hash": config_hash,
        "config": view,
        "seed": wd.cfg.seed,
        "outputs": {name: sha256_file(wd.path(name)) for name in outputs},
    })
    log.info("stage %s done", stage)
    return True


# stages


def stage_gen_corpus(wd: Workdir) -> list[str]:
    flows = generate_corpus(wd.cfg.corpus)
    write_flows(flows, wd.path(CORPUS))
    log.info("wrote %d flows in %d classes", len(flows), wd.cfg.corpus.num_classes)
    return [CORPUS]


def stage_build_vocab(wd: Workdir) -> list[str]:
    flows = wd.flows()
    report = validate_corpus(flows.values())
    log.info("corpus: %s", report.summary())
    ev = wd.cfg.eval
    split = make_split(list(flows.values()), ev.known_fraction, ev.ratios, wd.cfg.seed)
    tk = wd.cfg.tokenizer
    vocab = build_vocab([flows[i] for i in split.train], tk.max_vocab, tk.M, tk.N)
    vocab.save(wd.path("vocab.txt"))
    wd.path("split.json").write_text(split.to_json() + "\n", encoding="utf-8")
    return ["vocab.txt", "split.json"]


def _train_ids(wd: Workdir):
    flows, split, vocab = wd.flows(), wd.split(), wd.vocab()
    train = [flows[i] for i in split.train]
    return train, encode_corpus(train, vocab)


def stage_pretrain(wd: Workdir) -> list[str]:
    train, ids = _train_ids(wd)
    vocab = wd.vocab()
    encoder = init_encoder(wd.cfg.encoder, vocab.size, wd.cfg.seed)
    encoder, history = run_pretraining(ids, [f.label for f in train], encoder, wd.cfg.pretrain)
    save_encoder(encoder, wd.path("encoder.ckpt"), vocab.digest())
    write_log(history, wd.path("pretrain_log.jsonl"))
    return ["encoder.ckpt", "pretrain_log.jsonl"]


def stage_margins(wd: Workdir) -> list[str]:
    train, ids = _train_ids(wd)
    encoder, _ = load_encoder(wd.path("encoder.ckpt"))
    before, after = find_marginal(embed(encoder, ids), train, wd.cfg, apply_bsf=wd.cfg.margins.bsf)
    write_marginal(after, wd.path("marginal.jsonl"))
    emb = after.embeddings() if len(after) else np.empty((0, encoder.d_model), np.float32)
    checkpoint.save(wd.path("marginal.ckpt"), {"embeddings": emb}, {
        "kind": "marginal",
        "flow_ids": after.flow_ids,
        "classes": [e.class_id for e in after.entries],
        "count_before_filter": before.count_before_filter,
        "removed": len(after.removed),
    })
    log.info("marginal flows: %d before, %d after background filtering", before.count_before_filter, len(after))
    return ["marginal.jsonl", "marginal.ckpt"]


def stage_train_gan(wd: Workdir) -> list[str]:
    tensors, meta = checkpoint.load(wd.path("marginal.ckpt"))
    split = wd.split()
    generator = train_generators(tensors["embeddings"], meta["classes"], wd.cfg)
    counts = synthetic_counts(wd.cfg, len(split.train), len(split.known_classes))
    syn_train, syn_cal = sample_unknowns(generator, counts, wd.cfg.gan.model.seed)
    outputs = []
    if isinstance(generator, GanEnsemble):
        digests = []
        for i, key in enumerate(sorted(generator.members, key=str)):
            name = f"gan-{i:03d}.ckpt"
            digests.append(save_gan(generator.members[key], wd.path(name)))
            outputs.append(name)
        generator_hash = hashlib.sha256("".join(digests).encode()).hexdigest()
    elif generator is not None:
        generator_hash = save_gan(generator, wd.path("gan.ckpt"))
        outputs.append("gan.ckpt")
    else:
        generator_hash = ""
        dim = tensors["embeddings"].shape[1] if tensors["embeddings"].ndim == 2 else 0
        syn_train = syn_cal = np.empty((0, dim), np.float32)
    checkpoint.save(wd.path("synthetic.ckpt"), {"train": syn_train, "calibration": syn_cal},
                    {"kind": "synthetic_unknowns", "generator_hash": generator_hash})
    return outputs + ["synthetic.ckpt"]


def _synthetic(wd: Workdir, part: str):
    tensors, _ = checkpoint.load(wd.path("synthetic.ckpt"))
    arr = tensors[part]
    return arr if len(arr) else None


MODELS = {"owcp": "owcp.ckpt", "baseline": "baseline.ckpt"}


def stage_finetune(wd: Workdir) -> list[str]:
    train, ids = _train_ids(wd)
    split = wd.split()
    encoder, _ = load_encoder(wd.path("encoder.ckpt"))
    ft = wd.cfg.classifier.finetune
    labels = [f.label for f in train]
    model = clf.finetune(ids, labels, split.known_classes, encoder, _synthetic(wd, "train"), ft, unknown_node=True)
    clf.save_classifier(model, wd.path(MODELS["owcp"]))
    outputs = [MODELS["owcp"]]
    if wd.cfg.classifier.baseline:
        base = clf.finetune(ids, labels, split.known_classes, encoder, None, ft, unknown_node=False)
        clf.save_classifier(base, wd.path(MODELS["baseline"]))
        outputs.append(MODELS["baseline"])
    return outputs


def _models(wd: Workdir):
    for name, fname in MODELS.items():
        if wd.path(fname).exists():
            yield name, clf.load_classifier(wd.path(fname))[0]


def stage_calibrate(wd: Workdir) -> list[str]:
    flows, split, vocab = wd.flows(), wd.split(), wd.vocab()
    val = [flows[i] for i in split.val]
    val_ids = encode_corpus(val, vocab)
    val_truth = np.array([split.known_classes.index(f.label) for f in val])
    syn_cal = _synthetic(wd, "calibration")
    out = {}
    for name, model in _models(wd):
        if len(val) == 0:
            sigma, scores = calibrate_model(model, val_ids, val_truth, None, wd.cfg)
        else:
            sigma, scores = calibrate_model(model, val_ids, val_truth, syn_cal, wd.cfg)
        out[name] = {"sigma": sigma, "scores": {f"{s:.4f}": v for s, v in scores.items()},
                     "fallback": not scores}
    write_json(wd.path("calibration.json"), out)
    return ["calibration.json"]


def _sigma(wd: Workdir, name: str) -> float:
    return json.loads(wd.path("calibration.json").read_text(encoding="utf-8"))[name]["sigma"]


def stage_evaluate(wd: Workdir) -> list[str]:
    flows, split, vocab = wd.flows(), wd.split(), wd.vocab()
    cw = [flows[i] for i in split.cw_test]
    ow = [flows[i] for i in split.ow_test]
    unknown = set(split.unknown_classes)
    cw_ids, ow_ids = encode_corpus(cw, vocab), encode_corpus(ow, vocab)
    cw_truth = [f.label for f in cw]
    ow_truth = [clf.UNKNOWN if f.label in unknown else f.label for f in ow]
    out = {}
    for name, model in _models(wd):
        sigma = _sigma(wd, name)
        report = evaluate_model(model, sigma, cw_ids, cw_truth, ow_ids, ow_truth, wd.cfg.classifier.known_only_argmax)
        out[name] = {"sigma": sigma, **report.to_dict()}
        print(f"{name}: sigma={sigma:.2f} AC={report.accuracy:.4f} F1={report.macro_f1:.4f} "
              f"AC_ow={report.ac_ow:.4f} F1_ow={report.f1_ow:.4f}")
    write_json(wd.path("metrics.json"), out)
    return ["metrics.json"]


def stage_ablate(wd: Workdir) -> list[str]:
    flows = wd.flows()
    results = run_ablation(list(flows.values()), wd.split(), wd.cfg)
    summary = {name: r.summary() for name, r in results.items()}
    for name, s in summary.items():
        print(f"{name:8s} AC={s['AC']:.4f} F1={s['F1']:.4f} AC_ow={s['AC_ow']:.4f} F1_ow={s['F1_ow']:.4f}")
    write_json(wd.path("ablation.json"), summary)
    return ["ablation.json"]


def stage_sweep(wd: Workdir) -> list[str]:
    flows = list(wd.flows().values())
    ev = wd.cfg.eval
    report = run_sensitivity(flows, ev.unknown_fractions, ev.seeds, wd.cfg)
    wd.path("sweep.csv").write_text(report.to_csv(), encoding="utf-8")
    write_json(wd.path("sweep.json"), {
        "by_fraction": {str(k): v for k, v in report.by_fraction().items()},
        "spearman_f1_ow": {str(k): v for k, v in report.spearman_per_seed().items()},
        "mean_spearman_f1_ow": report.mean_spearman(),
    })
    print(report.to_csv(), end="")
    print(f"mean Spearman rho(fraction, F1_ow) = {report.mean_spearman():.3f}")
    return ["sweep.csv", "sweep.json"]


STAGE_FUNCS = {
    "gen-corpus": stage_gen_corpus,
    "build-vocab": stage_build_vocab,
    "pretrain": stage_pretrain,
    "margins": stage_margins,
    "train-gan": stage_train_gan,
    "finetune": stage_finetune,
    "calibrate": stage_calibrate,
    "evaluate": stage_evaluate,
    "ablate": stage_ablate,
    "sweep": stage_sweep,
}


def classify(wd: Workdir, input_path: str, output, model_name: str = "owcp") -> int:
    """Read-only scoring of a flow file against a calibrated workdir."""
    wd.stage_outputs("calibrate")
    fname = MODELS[model_name]
    if not wd.path(fname).exists():
        raise MissingStageError("finetune")
    model, _ = clf.load_classifier(wd.path(fname))
    decision = clf.DecisionConfig(_sigma(wd, model_name), wd.cfg.classifier.known_only_argmax)
    strip = wd.cfg.tokenizer.strip_prefix
    flows = [sanitize(f, strip) for f in load_flows(input_path)]
    preds = clf.predict(model, encode_corpus(flows, wd.vocab()), decision) if flows else []
    names = model.classes + ([clf.UNKNOWN] if model.unknown_node else [])
    for flow, p in zip(flows, preds):
        output.write(json.dumps({
            "flow_id": flow.flow_id,
            "predicted_label": p.label,
            "probabilities": {n: float(v) for n, v in zip(names, p.probabilities)},
            "decision": p.decision,
        }, sort_keys=True) + "\n")
    return len(flows)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run configuration")
    common.add_argument("--workdir", help="experiment directory (overrides paths.workdir)")
    common.add_argument("--seed", type=int, help="override every seed in the config")
    common.add_argument("--force", action="store_true", help="re-run even if up to date or the config changed")
    common.add_argument("--preset", choices=("desk", "paper"), default="desk", help="base preset (default desk)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="owetc", description="Open-world encrypted traffic classification.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in STAGE_FUNCS:
        sub.add_parser(name, parents=[common], help=f"run the {name} stage")
    p = sub.add_parser("classify", parents=[common], help="label flows with a calibrated model (read-only)")
    p.add_argument("--input", required=True, help="flow file to classify")
    p.add_argument("--output", help="prediction file (default stdout)")
    p.add_argument("--model", choices=tuple(MODELS), default="owcp")
    return parser


def _resolve(args) -> Workdir:
    cfg = load_config(args.config, args.preset)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    root = args.workdir or cfg.paths.workdir
    if not root:
        raise ConfigError("no workdir: pass --workdir or set paths.workdir")
    return Workdir(Path(root), cfg)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    log.setLevel(logging.DEBUG if args.verbose else logging.INFO)
    try:
        wd = _resolve(args)
        if args.command == "classify":
            if args.output:
                with open(args.output, "w", encoding="utf-8", newline="\n") as fh:
                    classify(wd, args.input, fh, args.model)
            else:
                classify(wd, args.input, sys.stdout, args.model)
            return EXIT_OK
        with WorkdirLock(wd.root):
            run_stage(wd, args.command, args.force)
        return EXIT_OK
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except MissingStageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OwetcError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
