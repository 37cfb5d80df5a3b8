import math

import httpx
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from collabchain.embedder import (
    DimMismatch,
    EmbeddingVector,
    EmptyText,
    EncoderUnavailable,
    HashingEncoder,
    RemoteEncoder,
    ZeroVector,
    cosine,
)

import world

vectors = st.lists(st.floats(-100, 100, allow_nan=False), min_size=3, max_size=3)


def test_encoding_is_deterministic():
    a, b = HashingEncoder(), HashingEncoder()
    assert a.encode("carbon fiber panel") == b.encode("carbon fiber panel")
    assert a.encode("carbon fiber panel").dim == 256


def test_vectors_are_unit_length():
    v = HashingEncoder().encode("stamping line cycle time")
    assert math.isclose(sum(x * x for x in v.values), 1.0, rel_tol=1e-12)


def test_distinct_corpus_texts_get_distinct_vectors():
    enc = HashingEncoder()
    texts = {t for row in world.CORPUS for triple in row[3] + [row[4]] for t in (triple[0], triple[2])}
    texts |= set(world.QUERIES)
    vecs = {enc.encode(t) for t in texts}
    assert len(vecs) == len(texts)


def test_empty_text():
    with pytest.raises(EmptyText):
        HashingEncoder().encode("  \n")


def test_punctuation_only_text_encodes():
    assert HashingEncoder().encode("?!").dim == 256


class TestCosine:
    def test_examples(self):
        e = EmbeddingVector.of
        assert cosine(e([1, 0]), e([2, 0])) == 1.0
        assert cosine(e([1, 0]), e([0, 3])) == 0.0
        assert cosine(e([1, 0]), e([1, 1])) == pytest.approx(0.7071068, abs=1e-7)

    def test_dim_mismatch(self):
        with pytest.raises(DimMismatch):
            cosine(EmbeddingVector.of([1, 0]), EmbeddingVector.of([1, 0, 0]))

    def test_zero_vector(self):
        with pytest.raises(ZeroVector):
            cosine(EmbeddingVector.of([0, 0]), EmbeddingVector.of([1, 0]))

    @settings(max_examples=200)
    @given(vectors, vectors, st.floats(0.01, 1000))
    def test_properties(self, a, b, k):
        assume(any(abs(x) > 1e-6 for x in a) and any(abs(x) > 1e-6 for x in b))
        va, vb = EmbeddingVector.of(a), EmbeddingVector.of(b)
        c = cosine(va, vb)
        assert -1.0 <= c <= 1.0
        assert cosine(vb, va) == c
        assert cosine(EmbeddingVector.of([x * k for x in a]), vb) == pytest.approx(c, abs=1e-9)


class TestRemote:
    def make(self, handler):
        client = httpx.Client(transport=httpx.MockTransport(handler))
        return RemoteEncoder("http://emb.test/embed", "e5", client=client)

    def test_bare_array(self):
        enc = self.make(lambda r: httpx.Response(200, json=[0.6, 0.8]))
        assert enc.encode("x").values == (0.6, 0.8)
        assert enc.dim == 2

    def test_openai_envelope(self):
        enc = self.make(lambda r: httpx.Response(200, json={"data": [{"embedding": [1.0, 0.0, 0.0]}]}))
        assert enc.encode("x").dim == 3

    def test_failure_is_unavailable(self):
        enc = self.make(lambda r: httpx.Response(503))
        with pytest.raises(EncoderUnavailable):
            enc.encode("x")

    def test_dim_change_is_unavailable(self):
        sizes = iter([[1.0, 0.0], [1.0, 0.0, 0.0]])
        enc = self.make(lambda r: httpx.Response(200, json=next(sizes)))
        enc.encode("a")
        with pytest.raises(EncoderUnavailable):
            enc.encode("b")
