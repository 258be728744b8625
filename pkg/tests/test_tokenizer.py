import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from owetc.errors import ConfigError
from owetc.flows import PacketView
from owetc.tokenizer import (
    CLS,
    PAD,
    SEP,
    UNK,
    Vocabulary,
    blank_region,
    build_vocab,
    encode_flow,
    payload_tokens,
    region_slices,
    sequence_length,
)

from conftest import make_flow
from test_flows import flows as flow_strategy


def test_payload_pairs_example():
    assert payload_tokens(bytes.fromhex("1a2b034562aa")) == ["1a2b", "0345", "62aa"]


def test_odd_trailing_byte_dropped_and_window_is_64():
    assert payload_tokens(bytes.fromhex("1a2b03")) == ["1a2b"]
    assert len(payload_tokens(bytes(100))) == 32


def test_signed_length_tokens():
    pk = [PacketView("+", 328), PacketView("-", 1074), PacketView("-", 180), PacketView("+", 328)]
    flow = make_flow(packets=pk)
    vocab = build_vocab([flow], M=6, N=128)
    seq = encode_flow(flow, vocab)
    sep = 1 + 6 * 32
    decoded = [vocab.token(i) for i in seq.ids[sep + 1 : sep + 5]]
    assert decoded == ["+328", "-1074", "-180", "+328"]
    assert seq.ids[sep + 5] == PAD
    assert seq.pl_len_used == 4


def test_default_sequence_length_is_322():
    assert sequence_length(6, 128) == 6 * 64 // 2 + 128 + 2 == 322


def test_zero_payload_flow_pads_np_region():
    flow = make_flow(packets=[PacketView("+", 40), PacketView("-", 40)])
    vocab = build_vocab([flow])
    seq = encode_flow(flow, vocab)
    assert len(seq) == 322
    assert seq.ids[0] == CLS and seq.ids[193] == SEP
    assert np.all(seq.ids[1:193] == PAD)
    assert seq.np_len_used == 0


def test_np_blocks_skip_empty_packets_and_pad_per_packet():
    pk = [PacketView("+", 40), PacketView("+", 100, bytes.fromhex("1a2b03")), PacketView("-", 100, bytes.fromhex("0345"))]
    flow = make_flow(packets=pk)
    vocab = build_vocab([flow], M=2, N=4)
    ids = encode_flow(flow, vocab).ids
    assert len(ids) == 2 * 32 + 4 + 2
    assert vocab.token(ids[1]) == "1a2b" and ids[2] == PAD
    assert vocab.token(ids[33]) == "0345" and ids[34] == PAD


def test_frequency_ordering():
    pk = [PacketView("+", 100, bytes.fromhex("1a2b") * 10 + bytes.fromhex("0345") * 5)]
    vocab = build_vocab([make_flow(packets=pk)])
    assert vocab.np_tokens["1a2b"] < vocab.np_tokens["0345"]
    assert vocab.np_tokens["1a2b"] == 4


def test_ties_broken_lexicographically():
    pk = [PacketView("+", 100, bytes.fromhex("ffff0000aaaa"))]
    vocab = build_vocab([make_flow(packets=pk)], N=0)
    assert [vocab.token(i) for i in range(4, 7)] == ["0000", "aaaa", "ffff"]


def test_capacity_limit():
    # 3 NP tokens + 2 PL tokens = 5 distinct tokens
    pk = [PacketView("+", 100, bytes.fromhex("1a2b1a2b0345")), PacketView("-", 50, bytes.fromhex("62aa"))]
    vocab = build_vocab([make_flow(packets=pk)], max_vocab=6)
    assert vocab.size == 6
    assert len(vocab.np_tokens) + len(vocab.pl_tokens) == 2
    assert vocab.token(4) == "1a2b"


def test_max_vocab_too_small():
    with pytest.raises(ConfigError):
        build_vocab([make_flow()], max_vocab=4)


def test_unseen_tokens_map_to_unk():
    vocab = build_vocab([make_flow()])
    other = make_flow(packets=[PacketView("+", 999, bytes.fromhex("beef"))])
    ids = encode_flow(other, vocab).ids
    assert ids[1] == UNK and ids[194] == UNK


def test_vocab_file_round_trip_and_determinism(tmp_path):
    corpus = [make_flow(f"f{i}", packets=[PacketView("+", 50 + i, bytes([i, i + 1, 7, 7]))]) for i in range(20)]
    a, b = tmp_path / "a.tsv", tmp_path / "b.tsv"
    build_vocab(corpus).save(a)
    build_vocab(list(reversed(corpus))).save(b)
    assert a.read_bytes() == b.read_bytes()
    lines = a.read_text().splitlines()
    assert lines[:4] == ["[CLS]\t0", "[SEP]\t1", "[PAD]\t2", "[UNK]\t3"]
    loaded = Vocabulary.load(a)
    assert loaded.np_tokens == build_vocab(corpus).np_tokens
    assert loaded.pl_tokens == build_vocab(corpus).pl_tokens


def test_blank_region():
    flow = make_flow()
    vocab = build_vocab([flow])
    ids = encode_flow(flow, vocab).ids
    regions = region_slices(6, 128)
    no_np = blank_region(ids, 6, 128, "np")
    assert np.all(no_np[regions["np"]] == PAD)
    assert np.array_equal(no_np[regions["pl"]], ids[regions["pl"]])
    no_pl = blank_region(ids, 6, 128, "pl")
    assert np.all(no_pl[regions["pl"]] == PAD)
    assert no_pl[0] == CLS and no_pl[193] == SEP


@settings(max_examples=40, deadline=None)
@given(st.lists(flow_strategy(), min_size=1, max_size=4), st.integers(0, 3), st.integers(0, 20), st.integers(5, 40))
def test_length_constant_and_ids_in_range(corpus, M, N, max_vocab):
    vocab = build_vocab(corpus, max_vocab=max_vocab, M=M, N=N)
    assert vocab.size <= max_vocab
    for flow in corpus:
        seq = encode_flow(flow, vocab)
        assert len(seq) == sequence_length(M, N)
        assert seq.ids.min() >= 0 and seq.ids.max() < vocab.size
        assert seq.ids[0] == CLS and seq.ids[1 + M * 32] == SEP
