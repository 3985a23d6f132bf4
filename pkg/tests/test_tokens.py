import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dualvcr.tokens import CLS, PAD, SEP, UNK, Vocab, build_vocab, build_vocab_from_texts, split_words, tokenize
from dualvcr.weights_io import WeightsFormatError, decode_weights, encode_weights, load_weights, save_weights


def test_split_words():
    assert split_words("Pick-up Mar22") == ["pick", "-", "up", "mar22"]
    assert split_words("") == []
    assert split_words("[combobox] <NBR> a_b") == ["[", "combobox", "]", "<", "nbr", ">", "a", "_", "b"]


def test_reserved_ids():
    v = build_vocab_from_texts(["x"])
    assert (v.id("<pad>"), v.id("<unk>"), v.id("<sep>"), v.id("<cls>")) == (PAD, UNK, SEP, CLS)


def test_frequency_order_and_min_count():
    v = build_vocab_from_texts(["a a b"])
    assert (v.id("a"), v.id("b")) == (4, 5)
    v2 = build_vocab_from_texts(["a a b"], min_count=2)
    assert v2.id("a") == 4 and v2.id("b") == UNK and len(v2) == 5


def test_tokenize_unknown():
    v = build_vocab_from_texts(["pick up"])
    assert tokenize("Pick-up", v) == [v.id("pick"), UNK, v.id("up")]


def test_vocab_json_round_trip(small_synth):
    v = build_vocab(small_synth.train)
    assert Vocab.from_json(v.to_json()) == v
    with pytest.raises(ValueError):
        Vocab(("a", "b"))
    with pytest.raises(ValueError):
        build_vocab([])


@settings(max_examples=300, deadline=None)
@given(st.text(max_size=40))
def test_tokenize_idempotent(s):
    words = split_words(s)
    assert split_words(" ".join(words)) == words


def test_weights_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    tensors = {"b": rng.normal(size=(2, 3)), "a": rng.normal(size=4), "s": np.array(1.5)}
    cfg = {"kind": "x", "n": 3}
    raw = encode_weights(cfg, tensors)
    c2, t2 = decode_weights(raw)
    assert c2 == cfg and set(t2) == set(tensors)
    assert all(np.array_equal(t2[k], tensors[k]) for k in tensors)
    save_weights(tmp_path / "w", cfg, tensors)
    assert load_weights(tmp_path / "w")[0] == cfg
    assert encode_weights(c2, t2) == raw


@pytest.mark.parametrize("mutate", [lambda b: b"XXXX" + b[4:], lambda b: b[:-3], lambda b: b + b"\0", lambda b: b[:4] + b"\x09" + b[5:]])
def test_weights_corruption(mutate):
    raw = encode_weights({"k": 1}, {"a": np.ones(3)})
    with pytest.raises(WeightsFormatError):
        decode_weights(mutate(raw))


def test_weights_rejects_bad_config_and_nan():
    raw = encode_weights({"k": 1}, {"a": np.array([1.0, np.nan])})
    with pytest.raises(WeightsFormatError, match="non-finite"):
        decode_weights(raw)
    raw = encode_weights({"k": 1}, {})
    with pytest.raises(WeightsFormatError, match="JSON"):
        decode_weights(raw.replace(b'{"k": 1}', b'{"k": 1]'))

