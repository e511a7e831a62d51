import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dcss.errors import DegenerateInputError, ValidationError
from dcss.synth_data import SHAPE_KINDS
from dcss.text_bank import (
    PhraseEmbeddingBank,
    StubTextEncoder,
    aggregate,
    aggregate_batch,
    build_bank,
    default_encoder,
    encode_phrase,
    load_banks,
    phrases_for_class,
    save_banks,
    softmax,
)


def oracle_aggregate(G, v):
    """Straight-line oracle: plain Python loops, no vectorization."""
    rows = [list(map(float, r)) for r in G]
    v = list(map(float, v))
    nv = math.sqrt(sum(x * x for x in v))
    scores = []
    for r in rows:
        nr = math.sqrt(sum(x * x for x in r))
        scores.append(sum(a * b for a, b in zip(r, v)) / (nr * nv))
    top = max(scores)
    ex = [math.exp(s - top) for s in scores]
    z = sum(ex)
    w = [e / z for e in ex]
    e = [sum(w[m] * rows[m][j] for m in range(len(rows))) for j in range(len(v))]
    return scores, w, e


def random_bank(rng, rows, d, class_id=1):
    G = rng.standard_normal((rows, d))
    G /= np.linalg.norm(G, axis=1, keepdims=True)
    return PhraseEmbeddingBank(class_id, tuple(f"p{i}" for i in range(rows)), G)


def test_phrases_counts():
    p = phrases_for_class("disk", 30)
    assert len(p) == 31 and len(set(p)) == 31 and p[-1] == "disk"
    assert phrases_for_class("disk", 1) == ["small disk", "disk"]
    assert phrases_for_class("disk", 30) == p
    long = phrases_for_class("ring", 70)
    assert len(long) == 71 and len(set(long)) == 71


@pytest.mark.parametrize("name,M", [("", 3), ("   ", 3), ("disk", 0)])
def test_phrases_invalid(name, M):
    with pytest.raises(ValidationError):
        phrases_for_class(name, M)


def test_encode_unit_norm_and_deterministic():
    for phrase in ["small disk", "disk", "vivid cross 2", "something else entirely"]:
        v = encode_phrase(phrase)
        assert abs(np.linalg.norm(v) - 1.0) < 1e-12
        assert np.array_equal(v, encode_phrase(phrase))
    assert np.array_equal(encode_phrase("small  disk"), encode_phrase("small disk"))
    with pytest.raises(ValidationError):
        encode_phrase("  ")


def test_intra_class_cosine_at_least_07():
    for name in SHAPE_KINDS:
        G = np.stack([encode_phrase(p) for p in phrases_for_class(name, 30)])
        C = G @ G.T
        assert C.min() >= 0.7


def test_inter_class_anchor_cosine_at_most_03():
    enc = default_encoder()
    A = np.stack([enc.anchor(n) for n in SHAPE_KINDS])
    C = A @ A.T
    off = C[~np.eye(len(SHAPE_KINDS), dtype=bool)]
    assert np.abs(off).max() <= 0.3
    banks = {n: np.stack([encode_phrase(p) for p in phrases_for_class(n, 30)]) for n in SHAPE_KINDS}
    for a in SHAPE_KINDS:
        for b in SHAPE_KINDS:
            if a < b:
                assert (banks[a] @ banks[b].T).mean() <= 0.3


def test_unknown_names_get_stable_anchors():
    enc = StubTextEncoder(32, ["disk"], seed=0)
    assert enc.class_token("bright hexagon 3") == "hexagon"
    assert enc.class_token("very small disk thing") == "disk"
    v1 = enc("bright hexagon")
    v2 = StubTextEncoder(32, ["disk"], seed=0)("bright hexagon")
    assert np.array_equal(v1, v2)
    with pytest.raises(ValidationError):
        StubTextEncoder(2, ["a", "b", "c"])


def test_bank_requires_unit_rows():
    with pytest.raises(ValidationError):
        PhraseEmbeddingBank(1, ("a", "b"), np.ones((2, 4)))
    with pytest.raises(ValidationError):
        PhraseEmbeddingBank(1, ("a",), np.eye(2))
    b = build_bank(3, "ring", 30)
    assert b.M == 30 and b.embeddings.shape == (31, 32)


def test_identical_rows_give_uniform_weights():
    g = np.zeros(8)
    g[2] = 1.0
    bank = PhraseEmbeddingBank(1, tuple("abcde"), np.tile(g, (5, 1)))
    res = aggregate(bank, np.arange(8) + 1.0)
    assert np.allclose(res.weights, 0.2, atol=1e-15)
    assert np.allclose(res.embedding, g, atol=1e-15)


def test_closed_form_softmax():
    # s = (ln 3, 0) -> (0.75, 0.25)
    s = np.array([math.log(3.0), 0.0])
    assert np.allclose(softmax(s), [0.75, 0.25], atol=1e-15)


def test_two_row_bank_weights():
    # rows chosen so the cls token has cosine 1 with row 0 and 0 with row 1
    bank = PhraseEmbeddingBank(1, ("a", "b"), np.eye(2))
    res = aggregate(bank, [2.0, 0.0])
    e = math.e
    assert np.allclose(res.weights, [e / (e + 1), 1 / (e + 1)], atol=1e-12)


def test_matches_oracle_on_100_random_banks(rng):
    for i in range(100):
        rows = int(rng.integers(2, 32))
        d = int(rng.integers(2, 33))
        bank = random_bank(rng, rows, d)
        v = rng.standard_normal(d) * rng.uniform(0.1, 10)
        res = aggregate(bank, v)
        s, w, e = oracle_aggregate(bank.embeddings, v)
        assert np.max(np.abs(res.scores - s)) <= 1e-9
        assert np.max(np.abs(res.weights - w)) <= 1e-9
        assert np.max(np.abs(res.embedding - e)) <= 1e-9


def test_zero_cls_token():
    bank = build_bank(1, "disk", 3)
    with pytest.raises(DegenerateInputError):
        aggregate(bank, np.zeros(32))
    with pytest.raises(DegenerateInputError):
        aggregate(bank, np.full(32, np.nan))


unit_rows = st.integers(2, 12).flatmap(lambda m: st.integers(2, 10).flatmap(
    lambda d: st.tuples(arrays(np.float64, (m, d), elements=st.floats(-1, 1)),
                        arrays(np.float64, (d,), elements=st.floats(-1, 1)))))


def _bank_or_skip(G):
    n = np.linalg.norm(G, axis=1, keepdims=True)
    if np.any(n < 1e-3):
        return None
    return PhraseEmbeddingBank(1, tuple(str(i) for i in range(len(G))), G / n)


@given(unit_rows)
def test_simplex_and_convex_hull(args):
    G, v = args
    bank = _bank_or_skip(G)
    if bank is None or np.linalg.norm(v) < 1e-3:
        return
    res = aggregate(bank, v)
    assert np.all(res.weights > 0)
    assert abs(res.weights.sum() - 1.0) <= 1e-9
    lo, hi = bank.embeddings.min(axis=0), bank.embeddings.max(axis=0)
    assert np.all(res.embedding >= lo - 1e-12) and np.all(res.embedding <= hi + 1e-12)


@given(arrays(np.float64, st.integers(1, 20), elements=st.floats(-5, 5)), st.floats(-100, 100))
def test_softmax_shift_invariance(s, c):
    assert np.max(np.abs(softmax(s) - softmax(s + c))) <= 1e-9


def test_distinct_cls_tokens_give_distinct_embeddings():
    bank = build_bank(1, "disk", 30)
    a = aggregate(bank, bank.embeddings[0]).embedding
    b = aggregate(bank, bank.embeddings[5]).embedding
    assert not np.array_equal(a, b)


def test_batch_form_matches_scalar(rng):
    banks = [random_bank(rng, 7, 16, c) for c in range(3)]
    cls = rng.standard_normal((4, 16))
    E = aggregate_batch(torch.from_numpy(np.stack([b.embeddings for b in banks])), torch.from_numpy(cls))
    for i in range(4):
        for k in range(3):
            assert np.allclose(E[i, k].numpy(), aggregate(banks[k], cls[i]).embedding, atol=1e-12)


def test_bank_file_round_trip(tmp_path):
    banks = [build_bank(c, n, 30) for c, n in [(1, "disk"), (2, "ring")]]
    save_banks(tmp_path, banks)
    raw = (tmp_path / "bank_1.bin").read_bytes()
    assert raw[:4] == b"DCSS"
    assert np.frombuffer(raw[4:16], "<u4").tolist() == [31, 32, 1]
    back = load_banks(tmp_path)
    for b in banks:
        got = back[b.class_id]
        assert got.phrases == b.phrases
        assert np.array_equal(got.embeddings, b.embeddings.astype(np.float32).astype(np.float64))
    save_banks(tmp_path / "again", list(back.values()))
    assert (tmp_path / "again" / "bank_1.bin").read_bytes() == raw
