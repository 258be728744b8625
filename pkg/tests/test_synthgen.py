import itertools

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from owetc.flows import validate_corpus
from owetc.margins import build_background_index
from owetc.synthgen import CorpusSpec, generate_corpus, token_histograms, total_variation
from owetc.tokenizer import iter_np_tokens

SMALL = dict(num_classes=4, flows_per_class=30, packets=(4, 10))


def test_same_seed_same_corpus():
    spec = CorpusSpec(**SMALL, seed=5)
    assert generate_corpus(spec) == generate_corpus(spec)
    assert generate_corpus(spec) != generate_corpus(CorpusSpec(**SMALL, seed=6))


def test_no_sharing_gives_single_class_backgrounds():
    flows = generate_corpus(CorpusSpec(**SMALL, tpl_share_fraction=0.0))
    index = build_background_index(flows)
    for table in (index.dst, index.sni, index.cert):
        assert all(len(classes) == 1 for classes in table.values())


def test_shared_pool_spans_classes():
    spec = CorpusSpec(**SMALL, tpl_share_fraction=0.3)
    flows = generate_corpus(spec)
    index = build_background_index(flows)
    shared = {k for k, classes in index.sni.items() if len(classes) >= 2}
    assert shared and all(k.endswith("shared-lib.example") for k in shared)
    per_class = round(0.3 * spec.flows_per_class)
    for c in range(spec.num_classes):
        n = sum(f.label == spec.label(c) and f.background.sni in shared for f in flows)
        assert n == per_class


def test_class_sizes_and_labels():
    spec = CorpusSpec(**SMALL)
    flows = generate_corpus(spec)
    assert len(flows) == spec.num_classes * spec.flows_per_class
    assert sorted({f.label for f in flows}) == [spec.label(c) for c in range(spec.num_classes)]
    assert len({f.flow_id for f in flows}) == len(flows)


@pytest.mark.parametrize(
    "bad",
    [
        dict(tpl_share_fraction=1.0),
        dict(tpl_share_fraction=0.2, shared_pool_size=0),
        dict(skew=1.5),
        dict(skew_jitter=-0.1),
        dict(family_size=0),
        dict(packets=(5, 2)),
        dict(num_classes=0),
    ],
)
def test_invalid_specs(bad):
    with pytest.raises(ValueError):
        CorpusSpec(**bad)


def test_siblings_closer_than_strangers():
    spec = CorpusSpec(**SMALL, skew=0.9, skew_jitter=0.0, tpl_share_fraction=0.0, family_size=2, family_overlap=0.5)
    hist = token_histograms(generate_corpus(spec), M=6)
    labels = [spec.label(c) for c in range(spec.num_classes)]
    siblings = total_variation(hist[labels[0]], hist[labels[1]])
    strangers = total_variation(hist[labels[0]], hist[labels[2]])
    assert siblings < strangers


def test_payload_tokens_favour_class_profile():
    spec = CorpusSpec(**SMALL, skew=1.0, skew_jitter=0.0, tpl_share_fraction=0.0, family_size=1)
    flows = generate_corpus(spec)
    for label in {f.label for f in flows}:
        tokens = {t for f in flows if f.label == label for t in iter_np_tokens(f, 6)}
        assert len(tokens) <= spec.favored_tokens


@settings(max_examples=15, deadline=None)
@given(
    st.integers(2, 5),
    st.floats(0.1, 1.0),
    st.sampled_from([0.0, 0.1, 0.25]),
    st.integers(1, 3),
    st.integers(0, 1000),
)
def test_corpora_validate_and_separate(num_classes, skew, share, family, seed):
    spec = CorpusSpec(
        num_classes=num_classes, flows_per_class=25, packets=(4, 8), skew=skew,
        tpl_share_fraction=share, family_size=family, seed=seed,
    )
    flows = generate_corpus(spec)
    assert validate_corpus(flows).errors == []
    hist = token_histograms(flows)
    # skew >= 0.1 with favoured tokens keeps every pair of classes apart
    floor = 0.02
    for a, b in itertools.combinations(sorted(hist), 2):
        assert total_variation(hist[a], hist[b]) >= floor
