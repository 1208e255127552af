import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from cotrain_vla.codec import (
    ActionChunk,
    CodecError,
    FastVocab,
    NormStats,
    decode_fast,
    dct_matrix,
    denormalize,
    encode_fast,
    fit_normalizer,
    load_codec,
    normalize,
    pad_actions,
    quantize_chunk,
    save_codec,
    train_fast_vocab,
    unpad_actions,
)


def brute_quantile(x, p):
    # textbook linear interpolation between order statistics
    s = sorted(x)
    h = p * (len(s) - 1)
    lo = int(np.floor(h))
    hi = min(lo + 1, len(s) - 1)
    return s[lo] + (h - lo) * (s[hi] - s[lo])


def band_limited(rng, horizon=8, dim=7, k=4, amp=0.9):
    coeffs = np.zeros((horizon, dim))
    coeffs[:k] = rng.uniform(-1, 1, size=(k, dim))
    v = dct_matrix(horizon).T @ coeffs
    return ActionChunk(amp * v / max(np.abs(v).max(), 1e-9), is_normalized=True)


finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, (6, 3), elements=finite), arrays(np.float64, (3,), elements=st.floats(0.1, 20)))
def test_normalize_round_trip(lo, span):
    stats = NormStats(lo.min(axis=0), lo.min(axis=0) + span)
    rng = np.random.default_rng(0)
    v = stats.q_low + rng.random((5, 3)) * span
    back = denormalize(normalize(ActionChunk(v), stats), stats)
    assert np.max(np.abs(back.values - v)) < 1e-9


def test_fit_normalizer_matches_sorted_order_statistics():
    rng = np.random.default_rng(3)
    chunks = [ActionChunk(rng.normal(size=(8, 2)) * [1, 5]) for _ in range(40)]
    stats = fit_normalizer(chunks)
    pooled = np.concatenate([c.values for c in chunks])
    for d in range(2):
        assert stats.q_low[d] == pytest.approx(brute_quantile(pooled[:, d], 0.01), abs=1e-12)
        assert stats.q_high[d] == pytest.approx(brute_quantile(pooled[:, d], 0.99), abs=1e-12)


def test_degenerate_channel_maps_to_zero():
    stats = NormStats([0.0, 1.0], [0.0, 3.0])
    out = normalize(ActionChunk(np.array([[0.0, 2.0], [0.0, 3.0]])), stats).values
    assert np.all(out[:, 0] == 0.0)
    assert out[:, 1].tolist() == [0.0, 1.0]


def test_values_outside_quantiles_are_clipped():
    stats = NormStats([0.0], [1.0])
    out = normalize(ActionChunk(np.array([[-5.0], [7.0]])), stats).values
    assert out.ravel().tolist() == [-1.0, 1.0]


def test_fit_errors():
    with pytest.raises(CodecError):
        fit_normalizer([])
    with pytest.raises(CodecError):
        fit_normalizer([ActionChunk(np.zeros((2, 2))), ActionChunk(np.zeros((2, 3)))])
    with pytest.raises(CodecError):
        normalize(ActionChunk(np.zeros((2, 3))), NormStats([0, 0], [1, 1]))


@given(st.integers(1, 7), st.integers(0, 5))
def test_pad_unpad(d, extra):
    v = np.arange(4 * d, dtype=float).reshape(4, d)
    c = pad_actions(ActionChunk(v), d + extra)
    assert c.dim == d + extra and np.all(c.values[:, d:] == 0)
    assert np.array_equal(unpad_actions(c).values, v)


def test_dct_is_orthonormal():
    m = dct_matrix(8)
    assert np.allclose(m @ m.T, np.eye(8), atol=1e-12)


def test_round_trip_error_within_half_step_bound():
    rng = np.random.default_rng(11)
    chunks = [band_limited(rng) for _ in range(1000)]
    vocab = train_fast_vocab(chunks[:200], merges=64)
    bound = vocab.half_step_bound()
    worst = max(np.abs(decode_fast(encode_fast(c, vocab), vocab).values - c.values).max() for c in chunks)
    assert worst <= bound


def test_merges_do_not_change_the_symbol_stream():
    rng = np.random.default_rng(2)
    chunks = [band_limited(rng, dim=3) for _ in range(50)]
    raw = FastVocab(8, 3, 129, 8)
    merged = train_fast_vocab(chunks, merges=40)
    for c in chunks[:10]:
        a = decode_fast(encode_fast(c, raw), raw).values
        b = decode_fast(encode_fast(c, merged), merged).values
        assert np.array_equal(a, b)
        assert len(encode_fast(c, merged)) <= len(encode_fast(c, raw))


def test_vocab_training_is_deterministic_and_order_free():
    rng = np.random.default_rng(5)
    chunks = [band_limited(rng, dim=2) for _ in range(60)]
    a = train_fast_vocab(chunks, merges=30)
    b = train_fast_vocab(chunks, merges=30)
    c = train_fast_vocab(chunks[::-1], merges=30)
    assert a.merges == b.merges == c.merges


def test_first_merge_is_most_frequent_pair():
    chunks = [ActionChunk(np.zeros((8, 2)), is_normalized=True)] * 3
    stream = quantize_chunk(np.zeros((8, 2)), 8, 129, 8)
    pairs = {}
    for p in zip(stream, stream[1:]):
        pairs[p] = pairs.get(p, 0) + 1
    best = max(pairs.values())
    expect = min(p for p, n in pairs.items() if n == best)
    assert train_fast_vocab(chunks, merges=1).merges[0] == expect


def test_vocab_errors():
    with pytest.raises(CodecError):
        train_fast_vocab([])
    with pytest.raises(CodecError):
        train_fast_vocab([ActionChunk(np.zeros((8, 2)))])  # not normalized
    v = FastVocab(8, 2, 129, 8)
    with pytest.raises(CodecError):
        v.expand(v.size)
    with pytest.raises(CodecError):
        decode_fast([0, 1], v)


def test_codec_file_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    chunks = [band_limited(rng, dim=2) for _ in range(20)]
    vocab = train_fast_vocab(chunks, merges=10)
    stats = {"mobile": NormStats([-1.0, 0.0], [1.0, 2.0])}
    save_codec(tmp_path / "c.json", stats, vocab)
    s2, v2 = load_codec(tmp_path / "c.json")
    assert v2.merges == vocab.merges and np.array_equal(s2["mobile"].q_high, stats["mobile"].q_high)
    doc = json.loads((tmp_path / "c.json").read_text())
    doc["fast_vocab"]["version"] = 99
    (tmp_path / "c.json").write_text(json.dumps(doc))
    with pytest.raises(CodecError):
        load_codec(tmp_path / "c.json")
