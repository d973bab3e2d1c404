import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from captrfuse import tensor as T
from captrfuse.attention import attention_weights
from captrfuse.fusion import pair_qa_decide
from captrfuse.metrics import (
    PredictionRecord,
    accuracy,
    calibration_report,
    caption_length_bins,
    macro_f1,
    weighted_f1,
)
from captrfuse.serialization import decode_tensor, encode_tensor
from captrfuse.tensor import Tensor, precision
from captrfuse.text import Vocabulary, build_sentence_pair, detokenize, tokenize

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)
WORDS = ["alpha", "beta", "gamma", "delta", "eps"]


@given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 6)), elements=finite), finite)
def test_softmax_normalised_and_shift_invariant(x, c):
    with precision("f64"):
        p = T.softmax(Tensor(x), axis=1).data
        q = T.softmax(Tensor(x + c), axis=1).data
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)
    np.testing.assert_allclose(p, q, atol=1e-9)


@given(arrays(np.float64, st.integers(2, 10), elements=finite))
def test_layer_norm_standardises(x):
    with precision("f64"):
        y = T.layer_norm(Tensor(x), Tensor(np.ones(x.size)), Tensor(np.zeros(x.size))).data
    assert abs(y.mean()) < 1e-9
    if x.var() > 1e-3:
        assert abs(y.var() - 1) < 1e-2


@given(st.integers(1, 6), st.integers(1, 8), st.integers(1, 8), st.integers(0, 2**32 - 1))
def test_attention_rows_sum_to_one(d, nq, nkv, seed):
    rng = np.random.default_rng(seed)
    alpha = attention_weights(Tensor(rng.normal(size=(d, nq))), Tensor(rng.normal(size=(d, nkv)))).data
    assert alpha.shape == (nq, nkv)
    assert np.all(np.abs(alpha.sum(axis=1) - 1) < 1e-6)


@given(st.lists(st.sampled_from(WORDS), max_size=12))
def test_tokenize_round_trip(words):
    vocab = Vocabulary(WORDS)
    text = " ".join(words)
    assert detokenize(tokenize(text, vocab), vocab) == text


@given(st.lists(st.integers(4, 50), max_size=20), st.lists(st.integers(4, 50), max_size=20), st.integers(4, 24))
def test_sentence_pair_layout(a, b, length):
    enc = build_sentence_pair(a, b, length)
    n_real = int(enc.mask.sum())
    assert len(enc.ids) == len(enc.segments) == len(enc.mask) == length
    assert enc.ids[0] == 1 and (enc.ids == 2).sum() == 2
    assert np.all(enc.ids[n_real:] == 0) and np.all(enc.mask[:n_real] == 1)
    assert n_real == min(length, len(a) + len(b) + 3)
    first_sep = int(np.argmax(enc.ids == 2))
    kept_a = list(enc.ids[1:first_sep])
    assert kept_a == a[: len(kept_a)]
    assert set(enc.segments[first_sep + 1 : n_real]) <= {1}


@given(st.lists(st.floats(0, 1, allow_nan=False), min_size=1, max_size=6),
       st.sampled_from([np.sqrt, np.exp, lambda v: 3 * v + 1, lambda v: v**3]))
def test_pair_qa_decision_invariant_to_monotone_maps(conf, fn):
    conf = np.asarray(conf)
    mapped = fn(conf)
    # strictly increasing maps keep ties as ties, except where floating point merges values
    if len(np.unique(mapped)) == len(np.unique(conf)):
        assert pair_qa_decide(conf) == pair_qa_decide(mapped)


@given(arrays(st.sampled_from([np.float32, np.float64]), st.lists(st.integers(0, 4), max_size=3).map(tuple),
              elements=st.floats(-1e6, 1e6, width=32)))
def test_ten_round_trip(arr):
    back = decode_tensor(encode_tensor(arr))
    assert back.dtype == arr.dtype and back.shape == arr.shape
    np.testing.assert_array_equal(back, arr)


record_lists = st.lists(
    st.tuples(st.integers(0, 2), st.integers(0, 2), st.integers(0, 30), st.floats(0, 1)), min_size=1, max_size=40
)


def _records(rows):
    return [PredictionRecord(i, g, p, (c,), n, confidence=c) for i, (g, p, n, c) in enumerate(rows)]


@given(record_lists)
def test_metrics_bounded(rows):
    recs = _records(rows)
    for value in (accuracy(recs), macro_f1(recs, 3), weighted_f1(recs, 3), calibration_report(recs)[0]):
        assert 0.0 <= value <= 1.0


@given(record_lists, st.randoms())
def test_metrics_permutation_invariant(rows, rnd):
    recs = _records(rows)
    shuffled = list(recs)
    rnd.shuffle(shuffled)
    assert accuracy(recs) == accuracy(shuffled)
    assert macro_f1(recs, 3) == macro_f1(shuffled, 3)
    assert weighted_f1(recs, 3) == weighted_f1(shuffled, 3)
    assert abs(calibration_report(recs)[0] - calibration_report(shuffled)[0]) < 1e-12


@given(st.lists(st.integers(0, 2), min_size=1, max_size=10), st.randoms())
def test_weighted_equals_macro_for_equal_support(preds_seed, rnd):
    k = len(preds_seed)
    gold = [0] * k + [1] * k + [2] * k
    pred = [rnd.randrange(3) for _ in gold]
    recs = [PredictionRecord(i, g, p, (1.0,)) for i, (g, p) in enumerate(zip(gold, pred))]
    assert abs(weighted_f1(recs, 3) - macro_f1(recs, 3)) < 1e-12


@settings(max_examples=50)
@given(record_lists, st.integers(1, 10))
def test_length_bins_partition(rows, width):
    recs = _records(rows)
    bins = caption_length_bins(recs, width)
    assert sum(b.count for b in bins) == len(recs)
    for b in bins:
        members = [r for r in recs if b.low <= r.caption_length < b.high]
        assert len(members) == b.count
