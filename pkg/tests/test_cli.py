import json
import os
from pathlib import Path

import pytest

from owetc.cli import EXIT_CONFIG, EXIT_MISSING, EXIT_OK, PIPELINE, UPSTREAM, WorkdirLock, main
from owetc.errors import OwetcError

TINY = str(Path(__file__).with_name("tiny.yaml"))


def run(workdir, *args):
    return main([*args, "--config", TINY, "--workdir", str(workdir)])


def manifest(workdir):
    return json.loads((Path(workdir) / "manifest.json").read_text())["stages"]


@pytest.fixture(scope="module")
def chain(tmp_path_factory):
    wd = tmp_path_factory.mktemp("run")
    for stage in PIPELINE:
        assert run(wd, stage) == EXIT_OK, stage
    return wd


def test_full_chain_produces_metrics(chain):
    metrics = json.loads((chain / "metrics.json").read_text())
    assert set(metrics) == {"owcp", "baseline"}
    for report in metrics.values():
        assert 0.0 <= report["ac_ow"] <= 1.0 and 0.0 <= report["macro_f1"] <= 1.0
    entries = manifest(chain)
    assert set(entries) == set(PIPELINE)
    for stage, entry in entries.items():
        assert set(entry) >= {"stage", "inputs", "config_hash", "seed", "outputs"}


def test_manifest_is_dag_in_pipeline_order(chain):
    entries = manifest(chain)
    produced_by = {name: stage for stage, e in entries.items() for name in e["outputs"]}
    order = {s: i for i, s in enumerate(PIPELINE)}
    for stage, entry in entries.items():
        for name in entry["inputs"]:
            assert order[produced_by[name]] < order[stage]
    for stage, ups in UPSTREAM.items():
        for up in ups:
            if up in order and stage in order:
                assert order[up] < order[stage]


def test_rerun_is_noop(chain):
    before = (chain / "manifest.json").read_bytes()
    mtime = os.stat(chain / "owcp.ckpt").st_mtime_ns
    assert run(chain, "finetune") == EXIT_OK
    assert (chain / "manifest.json").read_bytes() == before
    assert os.stat(chain / "owcp.ckpt").st_mtime_ns == mtime


def test_missing_upstream(tmp_path, capsys):
    assert run(tmp_path, "evaluate") == EXIT_MISSING
    assert "requires stage:" in capsys.readouterr().err
    run(tmp_path, "gen-corpus")
    run(tmp_path, "build-vocab")
    run(tmp_path, "pretrain")
    assert run(tmp_path, "finetune") == EXIT_MISSING
    assert "requires stage: train-gan" in capsys.readouterr().err


def test_evaluate_before_finetune_names_finetune(chain, tmp_path, capsys):
    wd = tmp_path / "w"
    wd.mkdir()
    for name in ("corpus.jsonl", "vocab.txt", "split.json", "manifest.json"):
        (wd / name).write_bytes((chain / name).read_bytes())
    m = json.loads((wd / "manifest.json").read_text())
    m["stages"] = {k: v for k, v in m["stages"].items() if k in ("gen-corpus", "build-vocab")}
    (wd / "manifest.json").write_text(json.dumps(m))
    assert run(wd, "evaluate") == EXIT_MISSING
    assert "requires stage: finetune" in capsys.readouterr().err


def test_config_change_refused_with_diff(chain, tmp_path, capsys):
    cfg = tmp_path / "changed.yaml"
    cfg.write_text(Path(TINY).read_text().replace("steps: 6", "steps: 7"))
    assert main(["pretrain", "--config", str(cfg), "--workdir", str(chain)]) == EXIT_CONFIG
    err = capsys.readouterr().err
    assert "pretrain.steps: 6 -> 7" in err and "--force" in err


def test_classify_writes_predictions(chain, tmp_path):
    out = tmp_path / "pred.jsonl"
    assert run(chain, "classify", "--input", str(chain / "corpus.jsonl"), "--output", str(out)) == EXIT_OK
    rows = [json.loads(line) for line in out.read_text().splitlines()]
    assert len(rows) == 80
    assert set(rows[0]) == {"flow_id", "predicted_label", "probabilities", "decision"}
    assert "UNKNOWN" in rows[0]["probabilities"]
    assert all(r["decision"] in ("known", "unknown") for r in rows)


def test_bad_config_exit_code(tmp_path):
    cfg = tmp_path / "bad.yaml"
    cfg.write_text("tokenizer: {max_vocab: 2}\n")
    assert main(["gen-corpus", "--config", str(cfg), "--workdir", str(tmp_path)]) == EXIT_CONFIG


def test_no_workdir(capsys):
    assert main(["gen-corpus", "--config", TINY]) == EXIT_CONFIG


def test_lock_excludes_second_writer(tmp_path):
    with WorkdirLock(tmp_path):
        with pytest.raises(OwetcError):
            WorkdirLock(tmp_path).__enter__()
    # a lock left by a dead process is reclaimed
    (tmp_path / ".owetc.lock").write_text("999999999")
    with WorkdirLock(tmp_path):
        pass
    assert not (tmp_path / ".owetc.lock").exists()
