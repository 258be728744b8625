import itertools

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from owetc.metrics import closed_metrics, open_metrics

from oracles import HANDCRAFTED, U, ac_ow_from_matrix, expand, macro_f1_from_matrix


def test_two_class_confusion():
    # truths a: 3 right, 1 as b; truths b: 2 as a, 4 right
    preds, truths = expand({("a", "a"): 3, ("a", "b"): 1, ("b", "a"): 2, ("b", "b"): 4})
    r = closed_metrics(preds, truths)
    assert r.accuracy == pytest.approx(0.7)
    assert r.per_class["a"]["f1"] == pytest.approx(0.6667, abs=5e-5)
    assert r.per_class["b"]["f1"] == pytest.approx(0.7273, abs=5e-5)
    assert r.macro_f1 == pytest.approx(0.6970, abs=5e-5)
    assert r.confusion == [[3, 1], [2, 4]]


def test_closed_unknown_prediction_is_wrong():
    r = closed_metrics(["a", U], ["a", "a"])
    assert r.accuracy == 0.5
    assert set(r.per_class) == {"a"}


def test_closed_guards():
    with pytest.raises(ValueError):
        closed_metrics([], [])
    with pytest.raises(ValueError):
        closed_metrics([U], [U])
    with pytest.raises(ValueError):
        closed_metrics(["a"], ["a", "b"])


@pytest.mark.parametrize("matrix,expected", HANDCRAFTED)
def test_open_handcrafted(matrix, expected):
    preds, truths = expand(matrix)
    r = open_metrics(preds, truths)
    assert abs(r.ac_ow - expected) <= 1e-12
    assert abs(r.ac_ow - ac_ow_from_matrix(matrix)) <= 1e-12
    assert abs(r.f1_ow - macro_f1_from_matrix(matrix)) <= 1e-12


def test_open_recall_extremes():
    assert open_metrics(["a", "a"], ["a", U]).ac_ow == 0.5


def test_open_needs_unknowns():
    with pytest.raises(ValueError, match="closed_metrics"):
        open_metrics(["a"], ["a"])


def test_open_all_unknown_guard():
    r = open_metrics([U, U], [U, U])
    assert r.ac_ow == 0.5
    assert r.flags


labels = st.sampled_from(["a", "b", "c", U])


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(labels, labels), min_size=1, max_size=40).filter(lambda xs: any(t == U for t, _ in xs)))
def test_open_matches_oracle(pairs):
    matrix = {}
    for k in pairs:
        matrix[k] = matrix.get(k, 0) + 1
    truths = [t for t, _ in pairs]
    preds = [p for _, p in pairs]
    r = open_metrics(preds, truths)
    assert abs(r.ac_ow - ac_ow_from_matrix(matrix)) <= 1e-12
    assert abs(r.f1_ow - macro_f1_from_matrix(matrix)) <= 1e-12
    assert 0.0 <= r.ac_ow <= 1.0 and 0.0 <= r.f1_ow <= 1.0


@settings(max_examples=30, deadline=None)
@given(st.lists(st.tuples(labels, labels), min_size=2, max_size=30).filter(lambda xs: any(t == U for t, _ in xs)),
       st.randoms())
def test_permutation_invariance(pairs, rnd):
    shuffled = list(pairs)
    rnd.shuffle(shuffled)
    a = open_metrics([p for _, p in pairs], [t for t, _ in pairs])
    b = open_metrics([p for _, p in shuffled], [t for t, _ in shuffled])
    assert a.ac_ow == b.ac_ow and a.f1_ow == b.f1_ow


def test_report_serializes():
    r = open_metrics(*expand(HANDCRAFTED[0][0]))
    import json

    assert json.loads(r.to_json())["ac_ow"] == pytest.approx(0.7)
