"""Corpus BLEU, ROUGE-2 and embedding cosine similarity."""
from __future__ import annotations

import json
import math
import re
from collections import Counter
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .numerics import NumericError

_TOKEN = re.compile(r"\w+|[^\w\s]")
MAX_ORDER = 4


def tokenize(text: str) -> list[str]:
    """Lowercase, split punctuation off words, split on whitespace."""
    return _TOKEN.findall(text.lower())


def ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def sacrebleu(hypotheses: Sequence[str], references: Sequence[str]) -> float:
    """Corpus BLEU on a 0-100 scale with exponential smoothing of empty n-gram orders."""
    if len(hypotheses) != len(references):
        raise ValueError(f"{len(hypotheses)} hypotheses but {len(references)} references")
    if not hypotheses:
        raise ValueError("corpus is empty")
    correct = [0] * MAX_ORDER
    total = [0] * MAX_ORDER
    hyp_len = ref_len = 0
    for hyp, ref in zip(hypotheses, references):
        h, r = tokenize(hyp), tokenize(ref)
        hyp_len += len(h)
        ref_len += len(r)
        for n in range(1, MAX_ORDER + 1):
            hc, rc = ngrams(h, n), ngrams(r, n)
            correct[n - 1] += sum(min(c, rc[g]) for g, c in hc.items())
            total[n - 1] += max(len(h) - n + 1, 0)
    if hyp_len == 0:
        return 0.0
    log_p = 0.0
    zeros = 0
    for c, t in zip(correct, total):
        if c == 0:
            zeros += 1
            log_p += -math.log((2 ** zeros) * max(t, 1))
        else:
            log_p += math.log(c / t)
    bp = min(1.0, math.exp(1.0 - ref_len / hyp_len))
    return 100.0 * bp * math.exp(log_p / MAX_ORDER)


@dataclass(frozen=True)
class RougeScore:
    precision: float
    recall: float
    f1: float


def rouge2(hypothesis: str, reference: str) -> RougeScore:
    h, r = ngrams(tokenize(hypothesis), 2), ngrams(tokenize(reference), 2)
    overlap = sum(min(c, r[g]) for g, c in h.items())
    nh, nr = sum(h.values()), sum(r.values())
    p = overlap / nh if nh else 0.0
    rec = overlap / nr if nr else 0.0
    f1 = 2 * p * rec / (p + rec) if p + rec > 0 else 0.0
    return RougeScore(p, rec, f1)


def cosine(u, v) -> float:
    u = np.asarray(u, dtype=np.float64).ravel()
    v = np.asarray(v, dtype=np.float64).ravel()
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        raise NumericError("cosine of a zero-norm embedding")
    return float(np.clip(u @ v / (nu * nv), -1.0, 1.0))


def clip_similarity(image_a, image_b, encode: Callable[[np.ndarray], np.ndarray]) -> float:
    """Cosine between the visual embeddings of two images."""
    return cosine(encode(image_a), encode(image_b))


_RANGES = {"sacrebleu": (0.0, 100.0), "rouge2_f1": (0.0, 1.0), "rouge2_precision": (0.0, 1.0),
           "rouge2_recall": (0.0, 1.0), "clip_similarity": (-1.0, 1.0)}


@dataclass(frozen=True)
class ScoreReport:
    metric: str
    value: float
    n: int

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("a score needs at least one record")
        lo, hi = _RANGES.get(self.metric, (-math.inf, math.inf))
        if not lo <= self.value <= hi:
            raise ValueError(f"{self.metric} value {self.value} outside [{lo}, {hi}]")

    def to_json(self) -> str:
        return json.dumps({"metric": self.metric, "value": self.value, "n": self.n}, sort_keys=True)
