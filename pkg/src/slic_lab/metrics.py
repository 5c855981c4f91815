"""Similarity and quality measures.

``span_similarity`` scores a candidate against a target from their
representation matrices (decoder states or token embeddings).  Rows are
L2-normalized; a span of ``n`` rows is represented by the re-normalized mean of
its rows.  Precision averages, over candidate spans, the best cosine against
any target span; recall swaps the roles; ``F_n`` is their harmonic mean (0 when
P and R do not share a strict sign, since cosines can be negative) and the
score is the sum of ``F_n`` over the span lengths both sequences can
accommodate.

ROUGE here works on whitespace tokens (or token-id lists) without stemming or
sentence splitting, so it is not numerically identical to the reference
``rouge-score`` package.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

DEFAULT_SPANS = (1, 2, 4, 8)


@dataclass(frozen=True)
class SpanMatchConfig:
    span_lengths: tuple[int, ...] = DEFAULT_SPANS
    representation_source: str = "decoder_states"

    def __post_init__(self):
        if not self.span_lengths or any(n < 1 for n in self.span_lengths):
            raise ValueError(f"span_lengths must be non-empty and >= 1, got {self.span_lengths}")
        if self.representation_source not in ("decoder_states", "token_embeddings"):
            raise ValueError(f"unknown representation_source {self.representation_source!r}")
        object.__setattr__(self, "span_lengths", tuple(sorted(set(int(n) for n in self.span_lengths))))


@dataclass
class SimilarityScore:
    value: float
    per_n: dict[int, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"value": self.value, "per_n": {str(n): v for n, v in self.per_n.items()}}

    @classmethod
    def from_dict(cls, d: dict) -> SimilarityScore:
        return cls(float(d["value"]), {int(n): float(v) for n, v in d["per_n"].items()})


@dataclass(frozen=True)
class MetricTriple:
    rouge1: float
    rouge2: float
    rougeL: float

    def to_dict(self) -> dict:
        return {"r1": self.rouge1, "r2": self.rouge2, "rl": self.rougeL}

    @classmethod
    def from_dict(cls, d: dict) -> MetricTriple:
        return cls(float(d["r1"]), float(d["r2"]), float(d["rl"]))


def _unit_rows(a: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(a, axis=-1, keepdims=True)
    return a / np.where(norms == 0, 1.0, norms)


def span_vectors(states: np.ndarray, n: int) -> np.ndarray:
    """Unit vectors for every contiguous span of ``n`` rows, shape (L - n + 1, D)."""
    rows = _unit_rows(np.asarray(states, dtype=np.float64))
    csum = np.concatenate([np.zeros((1, rows.shape[1])), np.cumsum(rows, axis=0)], axis=0)
    return _unit_rows((csum[n:] - csum[:-n]) / n)


def _harmonic(p: float, r: float) -> float:
    """Harmonic mean; 0 unless P and R share a strict sign (keeps |F| <= 1)."""
    if p * r <= 0:
        return 0.0
    return 2 * p * r / (p + r)


def span_similarity(emb_c, emb_t, cfg: SpanMatchConfig = SpanMatchConfig()) -> SimilarityScore:
    c = np.asarray(getattr(emb_c, "hidden", emb_c), dtype=np.float64)
    t = np.asarray(getattr(emb_t, "hidden", emb_t), dtype=np.float64)
    if c.ndim != 2 or t.ndim != 2:
        raise ValueError(f"expected 2-D state matrices, got {c.shape} and {t.shape}")
    if c.shape[0] == 0 or t.shape[0] == 0:
        raise ValueError("span_similarity of an empty sequence")
    if c.shape[1] != t.shape[1]:
        raise ValueError(f"hidden width mismatch: {c.shape[1]} vs {t.shape[1]}")
    per_n = {}
    for n in cfg.span_lengths:
        if n > c.shape[0] or n > t.shape[0]:
            continue
        sim = span_vectors(c, n) @ span_vectors(t, n).T
        p = float(sim.max(axis=1).mean())
        r = float(sim.max(axis=0).mean())
        per_n[n] = _harmonic(p, r)
    return SimilarityScore(float(sum(per_n.values())), per_n)


# ---------------------------------------------------------------------------
# ROUGE


def _words(seq) -> list:
    return seq.split() if isinstance(seq, str) else list(seq)


def _ngrams(words, n: int) -> Counter:
    return Counter(tuple(words[i : i + n]) for i in range(len(words) - n + 1))


def _f1(overlap: float, n_cand: int, n_ref: int) -> float:
    if overlap == 0 or n_cand == 0 or n_ref == 0:
        return 0.0
    p, r = overlap / n_cand, overlap / n_ref
    return 100.0 * 2 * p * r / (p + r)


def rouge_n(candidate, target, n: int = 1) -> float:
    """F1 of clipped n-gram overlap, scaled to [0, 100]."""
    if n < 1:
        raise ValueError("n must be >= 1")
    c, t = _ngrams(_words(candidate), n), _ngrams(_words(target), n)
    overlap = sum((c & t).values())
    return _f1(overlap, sum(c.values()), sum(t.values()))


def lcs_length(a, b) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(candidate, target) -> float:
    c, t = _words(candidate), _words(target)
    return _f1(lcs_length(c, t), len(c), len(t))


def rouge_triple(candidate, target) -> MetricTriple:
    return MetricTriple(rouge_n(candidate, target, 1), rouge_n(candidate, target, 2), rouge_l(candidate, target))


def mean_triple(triples) -> MetricTriple:
    triples = list(triples)
    if not triples:
        raise ValueError("mean of no metric triples")
    return MetricTriple(
        float(np.mean([t.rouge1 for t in triples])),
        float(np.mean([t.rouge2 for t in triples])),
        float(np.mean([t.rougeL for t in triples])),
    )


def has_repetition(words, max_n: int = 4) -> bool:
    """True if some n-gram (n <= max_n) is immediately followed by itself."""
    w = _words(words)
    for n in range(1, max_n + 1):
        for i in range(len(w) - 2 * n + 1):
            if w[i : i + n] == w[i + n : i + 2 * n]:
                return True
    return False


def repetition_rate(outputs, max_n: int = 4) -> float:
    """Percentage of outputs containing a consecutively repeated n-gram."""
    if max_n < 1:
        raise ValueError("max_n must be >= 1")
    outputs = list(outputs)
    if not outputs:
        raise ValueError("repetition_rate of an empty list")
    return 100.0 * sum(has_repetition(o, max_n) for o in outputs) / len(outputs)


def overall_score(per_dataset) -> float:
    """Mean over datasets of the geometric mean of ROUGE-1/2/L."""
    per_dataset = list(per_dataset)
    if not per_dataset:
        raise ValueError("overall_score of an empty list")
    vals = []
    for t in per_dataset:
        prod = t.rouge1 * t.rouge2 * t.rougeL
        vals.append(0.0 if prod <= 0 else prod ** (1.0 / 3.0))
    return float(np.mean(vals))


def kendall_tau(a, b) -> float:
    """Kendall tau-b; 0.0 when either side is constant or fewer than 2 items."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    n = len(a)
    if n < 2:
        return 0.0
    i, j = np.triu_indices(n, k=1)
    da = np.sign(a[i] - a[j])
    db = np.sign(b[i] - b[j])
    n0 = len(i)
    n1 = np.count_nonzero(da == 0)
    n2 = np.count_nonzero(db == 0)
    denom = math.sqrt((n0 - n1) * (n0 - n2))
    if denom == 0:
        return 0.0
    return float(np.sum(da * db) / denom)
