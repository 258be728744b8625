import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from owetc.encoder import EncoderConfig, embed, init_encoder
from owetc.pretrain import (
    ContrastiveConfig,
    class_similarity_margin,
    contrastive_loss,
    run_pretraining,
    sample_triplets,
    warmup_linear,
)
from owetc.synthgen import CorpusSpec, generate_corpus
from owetc.tokenizer import build_vocab, encode_flows

SMALL = EncoderConfig(heads=2, head_dim=8, ffn_dim=32, layers=1, max_seq=80, dropout=0.0)


def t(x):
    return torch.tensor(x, dtype=torch.float64)


def test_loss_closed_form_orthogonal_negative():
    loss = contrastive_loss(t([[1.0, 0.0]]), t([[1.0, 0.0]]), t([[0.0, 1.0]]), 1.0)
    # -log(e / (e + 1)) evaluated directly
    assert float(loss) == pytest.approx(-math.log(math.e / (math.e + 1)), abs=1e-12)
    assert float(loss) == pytest.approx(0.3133, abs=1e-4)


def test_loss_log2_when_all_identical():
    v = t([[0.3, -1.2, 2.0]])
    assert float(contrastive_loss(v, v, v, 0.1)) == pytest.approx(math.log(2), abs=1e-12)


def test_loss_scale_invariant():
    g = torch.Generator().manual_seed(0)
    a, p, n = (torch.randn(4, 6, generator=g, dtype=torch.float64) for _ in range(3))
    base = contrastive_loss(a, p, n, 0.2)
    assert float(contrastive_loss(5 * a, 5 * p, 5 * n, 0.2)) == pytest.approx(float(base), abs=1e-12)


@pytest.mark.parametrize("tau", [0.0, -1.0])
def test_nonpositive_temperature_rejected(tau):
    v = t([[1.0, 0.0]])
    with pytest.raises(ValueError):
        contrastive_loss(v, v, v, tau)


def test_mask_excludes_negatives():
    a = t([[1.0, 0.0], [0.0, 1.0]])
    negs = t([[0.0, 1.0], [1.0, 0.0]])
    mask = torch.tensor([[True, False], [False, True]])
    masked = contrastive_loss(a, a, negs, 1.0, mask)
    assert float(masked) == pytest.approx(math.log(1 + math.exp(-1)), abs=1e-12)


vecs = arrays(np.float64, (3, 4), elements=st.floats(-5, 5)).filter(lambda v: np.all(np.linalg.norm(v, axis=1) > 1e-3))


@settings(max_examples=60, deadline=None)
@given(vecs, st.floats(0.05, 5.0))
def test_loss_non_negative(v, tau):
    assert float(contrastive_loss(t(v[:1]), t(v[1:2]), t(v[2:]), tau)) >= 0.0


def test_loss_anchor_gradient_matches_finite_differences():
    g = torch.Generator().manual_seed(3)
    a = torch.randn(3, 5, generator=g, dtype=torch.float64, requires_grad=True)
    p = torch.randn(3, 5, generator=g, dtype=torch.float64)
    n = torch.randn(3, 4, 5, generator=g, dtype=torch.float64)
    contrastive_loss(a, p, n, 0.3).backward()
    numeric = torch.zeros_like(a)
    h = 1e-6
    with torch.no_grad():
        for idx in np.ndindex(*a.shape):
            orig = a[idx].item()
            a[idx] = orig + h
            up = contrastive_loss(a, p, n, 0.3).item()
            a[idx] = orig - h
            down = contrastive_loss(a, p, n, 0.3).item()
            a[idx] = orig
            numeric[idx] = (up - down) / (2 * h)
    rel = (a.grad - numeric).norm() / max(a.grad.norm(), numeric.norm())
    assert rel < 1e-4


def test_triplets_share_and_differ_labels():
    labels = ["a", "a", "b", "b"]
    batch = sample_triplets(labels, 4, seed=0)
    lab = np.array(labels)
    assert np.all(lab[batch.positives] == lab[batch.anchors])
    assert np.all(lab[batch.negatives] != lab[batch.anchors])
    assert np.all(batch.positives != batch.anchors)


def test_triplets_skip_singleton_anchors():
    labels = ["solo", "a", "a", "b", "b", "b"]
    batch = sample_triplets(labels, 200, seed=1)
    assert 0 not in batch.anchors
    assert 0 in batch.negatives


def test_triplets_single_class_rejected():
    with pytest.raises(ValueError):
        sample_triplets(["a", "a", "a"], 2, seed=0)


def test_triplets_deterministic():
    labels = list("aabbbccd")
    x, y = sample_triplets(labels, 16, seed=5), sample_triplets(labels, 16, seed=5)
    assert np.array_equal(x.anchors, y.anchors) and np.array_equal(x.negatives, y.negatives)
    assert np.array_equal(x.positives, y.positives)


def test_triplet_positive_uniform_excluding_anchor():
    labels = ["a"] * 4 + ["b"] * 2
    counts = np.zeros((4, 4))
    rng = np.random.default_rng(0)
    for _ in range(300):
        batch = sample_triplets(labels, 8, rng=rng)
        for a, p in zip(batch.anchors, batch.positives):
            if a < 4:
                counts[a, p] += 1
    assert np.all(np.diag(counts) == 0)
    off = counts[~np.eye(4, dtype=bool)].reshape(4, 3)
    freq = off / off.sum(1, keepdims=True)
    assert np.all(np.abs(freq - 1 / 3) < 0.08)


def test_warmup_schedule():
    assert warmup_linear(0, 100, 0.1) == pytest.approx(0.1)
    assert warmup_linear(9, 100, 0.1) == pytest.approx(1.0)
    assert warmup_linear(55, 100, 0.1) == pytest.approx(0.5)
    assert warmup_linear(100, 100, 0.1) == 0.0


@pytest.fixture(scope="module")
def separable():
    spec = CorpusSpec(num_classes=4, flows_per_class=40, skew=0.9, packets=(6, 10), tpl_share_fraction=0.0, seed=11)
    flows = generate_corpus(spec)
    vocab = build_vocab(flows, M=2, N=8)
    ids = encode_flows(flows, vocab)
    labels = [f.label for f in flows]
    return ids, labels, vocab


def test_zero_steps_returns_unchanged(separable):
    ids, labels, vocab = separable
    enc = init_encoder(SMALL, vocab.size, 0)
    out, log = run_pretraining(ids, labels, enc, ContrastiveConfig(steps=0))
    assert log == []
    assert all(torch.equal(enc.state_dict()[k], out.state_dict()[k]) for k in enc.state_dict())


def test_pretraining_deterministic(separable):
    ids, labels, vocab = separable
    cfg = ContrastiveConfig(steps=15, batch_size=8, learning_rate=1e-3, seed=4)
    _, log1 = run_pretraining(ids, labels, init_encoder(SMALL, vocab.size, 0), cfg)
    _, log2 = run_pretraining(ids, labels, init_encoder(SMALL, vocab.size, 0), cfg)
    assert log1 == log2


def test_pretraining_halves_loss_and_separates_classes(separable):
    ids, labels, vocab = separable
    # hold out every fifth flow for the similarity check
    held = np.arange(len(ids)) % 5 == 0
    train_labels = [lab for lab, h in zip(labels, held) if not h]
    cfg = ContrastiveConfig(steps=200, batch_size=16, learning_rate=1e-3, warmup_fraction=0.1, seed=0)
    enc = init_encoder(SMALL, vocab.size, 0)
    trained, log = run_pretraining(ids[~held], train_labels, enc, cfg)
    initial = log[cfg.running_window - 1]["running_loss"]
    final = log[-1]["running_loss"]
    assert final <= 0.5 * initial
    held_labels = [lab for lab, h in zip(labels, held) if h]
    margin = class_similarity_margin(embed(trained, ids[held]), held_labels)
    assert margin >= 0.1
