import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from slic_lab.metrics import (
    MetricTriple,
    SimilarityScore,
    SpanMatchConfig,
    has_repetition,
    kendall_tau,
    lcs_length,
    overall_score,
    repetition_rate,
    rouge_l,
    rouge_n,
    rouge_triple,
    span_similarity,
)
from slic_lab.model import DecoderStates


def brute_span_similarity(c, t, lengths=(1, 2, 4, 8)):
    """Plain-loop reference: every span of every length, cosine of re-normalized mean rows."""

    def unit(v):
        norm = math.sqrt(sum(a * a for a in v))
        return [a / norm for a in v] if norm else list(v)

    def spans(rows, n):
        rows = [unit(r) for r in rows]
        out = []
        for i in range(len(rows) - n + 1):
            mean = [sum(rows[i + k][d] for k in range(n)) / n for d in range(len(rows[0]))]
            out.append(unit(mean))
        return out

    total = 0.0
    for n in lengths:
        if n > len(c) or n > len(t):
            continue
        cs, ts = spans(c, n), spans(t, n)
        cos = [[sum(a * b for a, b in zip(u, v)) for v in ts] for u in cs]
        p = sum(max(row) for row in cos) / len(cs)
        r = sum(max(cos[i][j] for i in range(len(cs))) for j in range(len(ts))) / len(ts)
        if (p > 0 and r > 0) or (p < 0 and r < 0):
            total += 2 * p * r / (p + r)
    return total


class TestSpanSimilarity:
    def test_brute_force_oracle_small(self):
        rng = np.random.default_rng(0)
        c, t = rng.normal(size=(5, 3)), rng.normal(size=(7, 3))
        assert span_similarity(c, t).value == pytest.approx(brute_span_similarity(c.tolist(), t.tolist()), abs=1e-9)

    def test_brute_force_oracle_500_pairs(self):
        rng = np.random.default_rng(1)
        for _ in range(500):
            lc, lt, d = rng.integers(1, 12), rng.integers(1, 12), rng.integers(1, 6)
            c, t = rng.normal(size=(lc, d)), rng.normal(size=(lt, d))
            assert abs(span_similarity(c, t).value - brute_span_similarity(c.tolist(), t.tolist())) < 1e-9

    def test_self_similarity_is_four(self):
        s = np.random.default_rng(2).normal(size=(9, 5))
        out = span_similarity(s, s)
        assert out.value == pytest.approx(4.0, abs=1e-12)
        assert set(out.per_n) == {1, 2, 4, 8}

    def test_orthogonal_rows_give_zero(self):
        eye = np.eye(6)
        assert span_similarity(eye[:3], eye[3:]).value == 0.0

    def test_opposite_sign_precision_recall_gives_zero(self):
        # candidate row matches one target row; the other target row is anti-aligned
        c = np.array([[1.0, 0.0]])
        t = np.array([[1.0, 0.0], [-1.0, 0.0], [-1.0, 0.0], [-1.0, 0.0]])
        out = span_similarity(c, t, SpanMatchConfig(span_lengths=(1,)))
        assert out.per_n[1] == 0.0  # P = 1, R = -0.5

    def test_long_spans_skipped_for_short_sequences(self):
        s = np.random.default_rng(3).normal(size=(3, 4))
        assert set(span_similarity(s, s).per_n) == {1, 2}

    def test_accepts_decoder_states(self):
        s = np.random.default_rng(4).normal(size=(4, 3))
        assert span_similarity(DecoderStates(s), DecoderStates(s)).value == pytest.approx(3.0)

    def test_width_mismatch(self):
        with pytest.raises(ValueError, match="width"):
            span_similarity(np.ones((2, 3)), np.ones((2, 4)))

    def test_empty(self):
        with pytest.raises(ValueError):
            span_similarity(np.ones((0, 3)), np.ones((2, 3)))

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_symmetric_and_bounded(self, seed):
        rng = np.random.default_rng(seed)
        c = rng.normal(size=(rng.integers(1, 10), 4))
        t = rng.normal(size=(rng.integers(1, 10), 4))
        a, b = span_similarity(c, t), span_similarity(t, c)
        assert a.value == pytest.approx(b.value, abs=1e-12)
        assert a.value == pytest.approx(sum(a.per_n.values()))
        assert all(abs(v) <= 1 + 1e-12 for v in a.per_n.values())

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_row_rescaling_invariance(self, seed):
        rng = np.random.default_rng(seed)
        c = rng.normal(size=(rng.integers(1, 10), 4))
        t = rng.normal(size=(rng.integers(1, 10), 4))
        scaled = c * rng.uniform(0.01, 100, size=(len(c), 1))
        assert span_similarity(scaled, t).value == pytest.approx(span_similarity(c, t).value, abs=1e-12)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            SpanMatchConfig(span_lengths=())
        with pytest.raises(ValueError):
            SpanMatchConfig(span_lengths=(0, 1))
        with pytest.raises(ValueError):
            SpanMatchConfig(representation_source="tfidf")

    def test_score_roundtrip(self):
        s = SimilarityScore(1.5, {1: 1.0, 2: 0.5})
        assert SimilarityScore.from_dict(s.to_dict()) == s


# (candidate, target, rouge1, rouge2, rougeL), counted by hand
ROUGE_TABLE = [
    ("a b c", "a b c", 100.0, 100.0, 100.0),
    ("a b c", "a b d", 200 / 3, 50.0, 200 / 3),
    ("a c b", "a b c", 100.0, 0.0, 200 / 3),
    ("a b", "c d", 0.0, 0.0, 0.0),
    ("", "a b", 0.0, 0.0, 0.0),
    ("a b", "", 0.0, 0.0, 0.0),
    ("a", "a", 100.0, 0.0, 100.0),
    ("a a a", "a", 50.0, 0.0, 50.0),
    ("a", "a a a", 50.0, 0.0, 50.0),
    ("a b a b", "a b", 2 * 0.5 * 1 / 1.5 * 100, 2 * (1 / 3) * 1 / (4 / 3) * 100, 2 * 0.5 * 1 / 1.5 * 100),
    ("the cat sat", "the cat sat on the mat", 2 * 1 * 0.5 / 1.5 * 100, 2 * 1 * 0.4 / 1.4 * 100, 2 * 1 * 0.5 / 1.5 * 100),
    ("b c d e", "a b c d", 75.0, 2 / 3 * 100, 75.0),
    ("e d c b a", "a b c d e", 100.0, 0.0, 20.0),
    ("a x b y c", "a b c", 2 * 0.6 * 1 / 1.6 * 100, 0.0, 2 * 0.6 * 1 / 1.6 * 100),
    ("x y", "x", 2 * 0.5 / 1.5 * 100, 0.0, 2 * 0.5 / 1.5 * 100),
    ("a b c d", "d c b a", 100.0, 0.0, 25.0),
    ("a a b b", "a b a b", 100.0, 2 * (1 / 3) * (1 / 3) / (2 / 3) * 100, 75.0),
    ("p q r s t", "q r s", 2 * 0.6 * 1 / 1.6 * 100, 2 * 0.5 * 1 / 1.5 * 100, 2 * 0.6 * 1 / 1.6 * 100),
    ("m n", "n m", 100.0, 0.0, 50.0),
    ("a b c a b c", "a b c", 2 * 0.5 / 1.5 * 100, 2 * 0.4 / 1.4 * 100, 2 * 0.5 / 1.5 * 100),
]


class TestRouge:
    @pytest.mark.parametrize("cand,target,r1,r2,rl", ROUGE_TABLE)
    def test_fixture_table(self, cand, target, r1, r2, rl):
        assert rouge_n(cand, target, 1) == pytest.approx(r1, abs=1e-9)
        assert rouge_n(cand, target, 2) == pytest.approx(r2, abs=1e-9)
        assert rouge_l(cand, target) == pytest.approx(rl, abs=1e-9)

    def test_fixture_table_size(self):
        assert len(ROUGE_TABLE) == 20

    def test_token_id_lists(self):
        assert rouge_triple([5, 6, 7], [5, 6, 8]) == rouge_triple("5 6 7", "5 6 8")

    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.integers(0, 4), max_size=8), st.lists(st.integers(0, 4), max_size=8))
    def test_symmetric_and_in_range(self, a, b):
        for f in (lambda x, y: rouge_n(x, y, 1), lambda x, y: rouge_n(x, y, 2), rouge_l):
            v = f(a, b)
            assert 0.0 <= v <= 100.0
            assert v == pytest.approx(f(b, a))

    def test_lcs(self):
        assert lcs_length("a b c b d a b".split(), "b d c a b a".split()) == 4

    def test_bad_n(self):
        with pytest.raises(ValueError):
            rouge_n("a", "a", 0)


class TestRepetition:
    @pytest.mark.parametrize("text,rep", [("a a b", 100.0), ("a b a b c", 100.0), ("a b c", 0.0)])
    def test_single_output(self, text, rep):
        assert repetition_rate([text]) == rep

    def test_fraction(self):
        assert repetition_rate(["a a", "a b", "x y z x y z", "p"]) == 50.0

    def test_non_consecutive_repeat_is_not_counted(self):
        assert not has_repetition("a b a")

    def test_max_n_limits_search(self):
        assert not has_repetition("a b c a b c", max_n=2)
        assert has_repetition("a b c a b c", max_n=3)

    def test_empty_list(self):
        with pytest.raises(ValueError):
            repetition_rate([])


class TestOverallScore:
    def test_equal_components(self):
        assert overall_score([MetricTriple(30, 30, 30)] * 4) == pytest.approx(30.0)

    def test_geometric_mean(self):
        assert overall_score([MetricTriple(8, 1, 27)]) == pytest.approx(6.0)

    def test_mean_over_datasets(self):
        assert overall_score([MetricTriple(10, 10, 10), MetricTriple(20, 20, 20)]) == pytest.approx(15.0)

    def test_empty(self):
        with pytest.raises(ValueError):
            overall_score([])


def brute_tau_b(a, b):
    conc = disc = ta = tb = 0
    n = len(a)
    for i in range(n):
        for j in range(i + 1, n):
            da, db = a[i] - a[j], b[i] - b[j]
            if da == 0 and db == 0:
                continue
            if da == 0:
                ta += 1
            elif db == 0:
                tb += 1
            elif da * db > 0:
                conc += 1
            else:
                disc += 1
    denom = math.sqrt((conc + disc + ta) * (conc + disc + tb))
    return 0.0 if denom == 0 else (conc - disc) / denom


class TestKendallTau:
    def test_perfect(self):
        assert kendall_tau([1, 2, 3], [10, 20, 30]) == 1.0
        assert kendall_tau([1, 2, 3], [3, 2, 1]) == -1.0

    def test_degenerate(self):
        assert kendall_tau([1], [2]) == 0.0
        assert kendall_tau([1, 1, 1], [1, 2, 3]) == 0.0

    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.tuples(st.integers(0, 3), st.integers(0, 3)), min_size=2, max_size=9))
    def test_matches_pair_counting(self, pairs):
        a, b = zip(*pairs)
        assert kendall_tau(a, b) == pytest.approx(brute_tau_b(a, b), abs=1e-12)
