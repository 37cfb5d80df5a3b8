"""Reference-based scores: sentence GLEU and ROUGE-L.

Both tokenize by lowercasing and splitting on whitespace, with no stemming,
so scores are comparable across runs of this tool but not with numbers
produced under another tokenizer.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass


class EmptyText(ValueError):
    pass


@dataclass(frozen=True)
class MetricScore:
    value: float
    metric: str

    def __post_init__(self):
        if not 0.0 <= self.value <= 1.0:
            raise ValueError(f"{self.metric} score {self.value} outside [0, 1]")

    def __float__(self) -> float:
        return self.value


def tokenize(text: str) -> list[str]:
    return text.lower().split()


def _tokens_or_raise(candidate: str, reference: str) -> tuple[list[str], list[str]]:
    cand, ref = tokenize(candidate), tokenize(reference)
    if not cand or not ref:
        raise EmptyText("candidate and reference must both contain tokens")
    return cand, ref


def ngrams(tokens: list[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def gleu(candidate: str, reference: str, max_n: int = 4) -> MetricScore:
    """min(precision, recall) of n-gram matches pooled over orders 1..max_n."""
    if max_n < 1:
        raise ValueError("max_n must be >= 1")
    cand, ref = _tokens_or_raise(candidate, reference)
    matched = cand_total = ref_total = 0
    for n in range(1, max_n + 1):
        c, r = ngrams(cand, n), ngrams(ref, n)
        matched += sum((c & r).values())
        cand_total += sum(c.values())
        ref_total += sum(r.values())
    return MetricScore(min(matched / cand_total, matched / ref_total), "gleu")


def lcs_length(a: list[str], b: list[str]) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, 1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1]))
        prev = cur
    return prev[-1]


def rouge_l(candidate: str, reference: str) -> MetricScore:
    cand, ref = _tokens_or_raise(candidate, reference)
    lcs = lcs_length(cand, ref)
    if lcs == 0:
        return MetricScore(0.0, "rouge_l")
    p, r = lcs / len(cand), lcs / len(ref)
    return MetricScore(min(1.0, 2 * p * r / (p + r)), "rouge_l")
