"""Corpus-level caption metrics: BLEU-4 (unsmoothed) and CIDEr (tf-idf, Gaussian length penalty)."""
from __future__ import annotations

import math
import warnings
from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Sequence

from .vocab import split_words


@dataclass
class EvalRecord:
    candidate: list[str]
    references: list[list[str]]

    def __post_init__(self):
        if isinstance(self.candidate, str):
            self.candidate = split_words(self.candidate)
        self.references = [split_words(r) if isinstance(r, str) else list(r) for r in self.references]
        self.candidate = list(self.candidate)
        if not self.references:
            raise ValueError("an EvalRecord needs at least one reference")


def _records(records) -> list[EvalRecord]:
    return [r if isinstance(r, EvalRecord) else EvalRecord(*r) for r in records]


def ngrams(tokens: Sequence, n: int) -> Counter:
    return Counter(tuple(tokens[i: i + n]) for i in range(len(tokens) - n + 1))


def bleu_stats(records) -> tuple[list[int], list[int], int, int]:
    """Clipped matches and totals per order 1..4, candidate length, effective reference length."""
    matches = [0] * 4
    totals = [0] * 4
    c_len = r_len = 0
    for rec in _records(records):
        cand = rec.candidate
        c_len += len(cand)
        r_len += min((abs(len(r) - len(cand)), len(r)) for r in rec.references)[1]
        for n in range(1, 5):
            cand_counts = ngrams(cand, n)
            max_ref: Counter = Counter()
            for ref in rec.references:
                for g, k in ngrams(ref, n).items():
                    max_ref[g] = max(max_ref[g], k)
            matches[n - 1] += sum(min(k, max_ref[g]) for g, k in cand_counts.items())
            totals[n - 1] += max(len(cand) - n + 1, 0)
    return matches, totals, c_len, r_len


def bleu4(records) -> float:
    """Corpus BLEU-4 without smoothing; 0 when any n-gram precision is 0."""
    recs = _records(records)
    if not recs:
        raise ValueError("bleu4 needs at least one record")
    matches, totals, c, r = bleu_stats(recs)
    if c == 0 or any(m == 0 for m in matches):
        return 0.0
    log_p = sum(math.log(m / t) for m, t in zip(matches, totals)) / 4.0
    bp = 1.0 if c >= r else math.exp(1.0 - r / c)
    return bp * math.exp(log_p)


class _CiderVector:
    __slots__ = ("vec", "norm", "length")

    def __init__(self, tokens: Sequence[str], df: Counter, log_n: float, n_max: int):
        self.vec = []
        self.norm = []
        for n in range(1, n_max + 1):
            weights = {g: k * (log_n - math.log(max(1.0, df[g]))) for g, k in ngrams(tokens, n).items()}
            self.vec.append(weights)
            self.norm.append(math.sqrt(sum(w * w for w in weights.values())))
        self.length = len(tokens)


def cider_scores(records, n_max: int = 4, sigma: float = 6.0) -> list[float]:
    """Per-record CIDEr.

    Weights are ``tf * (log N - log df)`` with document frequency taken over
    each record's reference set. Per order the candidate/reference similarity
    is the clipped dot product ``sum min(c, r) * r`` over the two norms, scaled
    by ``exp(-(len_c - len_r)^2 / (2 sigma^2))``; orders are averaged, then
    references, and the result is multiplied by 10.
    """
    recs = _records(records)
    if not recs:
        raise ValueError("cider needs at least one record")
    if len(recs) < 2:
        warnings.warn("CIDEr on a single record: document frequencies are degenerate", RuntimeWarning)
    df: Counter = Counter()
    for rec in recs:
        seen = set()
        for ref in rec.references:
            for n in range(1, n_max + 1):
                seen.update(ngrams(ref, n))
        df.update(seen)
    log_n = math.log(float(len(recs)))
    scores = []
    for rec in recs:
        hyp = _CiderVector(rec.candidate, df, log_n, n_max)
        total = 0.0
        for ref_tokens in rec.references:
            ref = _CiderVector(ref_tokens, df, log_n, n_max)
            penalty = math.exp(-((hyp.length - ref.length) ** 2) / (2.0 * sigma ** 2))
            per_order = 0.0
            for n in range(n_max):
                dot = sum(min(w, ref.vec[n].get(g, 0.0)) * ref.vec[n].get(g, 0.0) for g, w in hyp.vec[n].items())
                if hyp.norm[n] != 0 and ref.norm[n] != 0:
                    dot /= hyp.norm[n] * ref.norm[n]
                per_order += dot * penalty
            total += per_order / n_max
        scores.append(10.0 * total / len(rec.references))
    return scores


def cider(records, n_max: int = 4, sigma: float = 6.0) -> float:
    scores = cider_scores(records, n_max, sigma)
    return sum(scores) / len(scores)


def score_corpus(candidates: Iterable, references: Iterable) -> dict[str, float]:
    recs = [EvalRecord(c, r) for c, r in zip(candidates, references)]
    return {"BLEU-4": bleu4(recs), "CIDEr": cider(recs)}
