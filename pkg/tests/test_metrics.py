from itertools import combinations

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from collabchain.metrics import EmptyText, MetricScore, gleu, lcs_length, rouge_l

VOCAB = list("abcdefg")
sentences = st.lists(st.sampled_from(VOCAB), min_size=1, max_size=9).map(" ".join)


def brute_lcs(a, b):
    """Longest subsequence of ``a`` that is also a subsequence of ``b``, by enumeration."""
    def is_subseq(sub, seq):
        it = iter(seq)
        return all(tok in it for tok in sub)
    for k in range(min(len(a), len(b)), 0, -1):
        if any(is_subseq(sub, b) for sub in combinations(a, k)):
            return k
    return 0


def oracle_gleu(cand, ref, max_n=4):
    cand, ref = cand.lower().split(), ref.lower().split()
    matched = total_c = total_r = 0
    for n in range(1, max_n + 1):
        cg = [tuple(cand[i:i + n]) for i in range(len(cand) - n + 1)]
        rg = [tuple(ref[i:i + n]) for i in range(len(ref) - n + 1)]
        total_c, total_r = total_c + len(cg), total_r + len(rg)
        pool = list(rg)
        for g in cg:
            if g in pool:
                pool.remove(g)
                matched += 1
    return min(matched / total_c, matched / total_r)


def oracle_rouge(cand, ref):
    c, r = cand.lower().split(), ref.lower().split()
    lcs = brute_lcs(c, r)
    if not lcs:
        return 0.0
    p, rec = lcs / len(c), lcs / len(r)
    return 2 * p * rec / (p + rec)


class TestGleu:
    def test_identity(self):
        assert gleu("the cat sat on the mat", "the cat sat on the mat").value == 1.0

    def test_no_overlap(self):
        assert gleu("red blue", "green yellow").value == 0.0

    def test_pooled_example(self):
        assert gleu("a b", "a b c").value == pytest.approx(0.5, abs=1e-6)
        assert oracle_gleu("a b", "a b c") == 0.5

    def test_case_insensitive(self):
        assert gleu("A B", "a b").value == 1.0

    def test_empty(self):
        with pytest.raises(EmptyText):
            gleu("   ", "a")
        with pytest.raises(EmptyText):
            gleu("a", "")

    def test_metric_name(self):
        assert gleu("a", "a").metric == "gleu"


class TestRougeL:
    def test_identity(self):
        assert rouge_l("x y z", "x y z").value == 1.0

    def test_disjoint(self):
        assert rouge_l("x y", "p q").value == 0.0

    def test_lcs_example(self):
        assert lcs_length(["a", "c", "d"], ["a", "b", "c", "d"]) == 3
        assert rouge_l("a c d", "a b c d").value == pytest.approx(0.857142, abs=1e-6)

    def test_empty(self):
        with pytest.raises(EmptyText):
            rouge_l("", "a")


def test_score_range_validated():
    with pytest.raises(ValueError):
        MetricScore(1.2, "gleu")


@settings(max_examples=300, deadline=None)
@given(sentences, sentences)
def test_match_independent_oracles(a, b):
    assert gleu(a, b).value == pytest.approx(oracle_gleu(a, b), abs=1e-12)
    assert rouge_l(a, b).value == pytest.approx(oracle_rouge(a, b), abs=1e-12)


@settings(max_examples=300, deadline=None)
@given(sentences, sentences)
def test_range_and_symmetry(a, b):
    for metric in (gleu, rouge_l):
        assert 0.0 <= metric(a, b).value <= 1.0
        assert metric(a, a).value == 1.0
    assert gleu(a, b).value == gleu(b, a).value


@settings(max_examples=200, deadline=None)
@given(st.lists(st.sampled_from(VOCAB), min_size=1, max_size=7, unique=True))
def test_reversal_lowers_rouge(tokens):
    x = " ".join(tokens)
    rev = " ".join(reversed(tokens))
    if len(tokens) <= 1:
        assert rouge_l(rev, x).value == 1.0
    else:
        assert rouge_l(rev, x).value < rouge_l(x, x).value
