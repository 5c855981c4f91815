import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from slic_lab.decoding import (
    DecodeConfig,
    ScoredCandidate,
    beam_search,
    beam_search_batch,
    decode_batch,
    diverse_beam_search,
    greedy_decode,
    normalize,
    nucleus_filter,
    nucleus_sample,
    nucleus_sample_batch,
    select_best,
)
from slic_lab.model import EOS, Seq2Seq

from conftest import micro_config, micro_model


def tiny(seed):
    """vocab 5 (three emittable tokens), max_len 4, sharp-ish distributions."""
    return Seq2Seq.initialize(micro_config(vocab_size=5, max_dec_len=4, init_std=1.0), seed)


def all_sequences(emittable, max_len):
    """Every sequence the decoder can emit: EOS-terminated, or cut at max_len."""
    content = [t for t in emittable if t != EOS]
    for n in range(1, max_len + 1):
        for body in itertools.product(content, repeat=n - 1):
            yield body + (EOS,)
    yield from itertools.product(content, repeat=max_len)


def exhaustive_argmax(model, x, max_len):
    seqs = list(all_sequences(range(2, model.cfg.vocab_size), max_len))
    lps = model.sequence_log_probs([x], seqs, [0] * len(seqs)).data
    return seqs[int(np.argmax(lps))], float(lps.max())


class TestBeamSearch:
    def test_matches_exhaustive_enumeration(self):
        for seed in range(100):
            model = tiny(seed)
            x = [3, 4, 3]
            best, lp = exhaustive_argmax(model, x, 4)
            out = beam_search(model, x, DecodeConfig(num_candidates=81, max_len=4))
            assert out[0].tokens == best, seed
            assert out[0].log_prob == pytest.approx(lp, abs=1e-9)

    @pytest.mark.parametrize("seed", range(10))
    def test_width_one_is_greedy(self, seed):
        model = micro_model(seed)
        x = [3, 5, 7, 4]
        out = beam_search(model, x, DecodeConfig(num_candidates=1, max_len=6))
        assert out[0].tokens == greedy_decode(model, x, 6)

    def test_stored_log_prob_matches_recomputation(self, model):
        for c in beam_search(model, [3, 4, 5], DecodeConfig(num_candidates=6, max_len=6, alpha=1.0)):
            assert abs(c.log_prob - model.sequence_log_prob([3, 4, 5], c.tokens)) < 1e-6
            assert c.normalized_score == pytest.approx(c.log_prob / len(c.tokens))

    def test_alpha_zero_scores_are_log_probs(self, model):
        for c in beam_search(model, [3, 4], DecodeConfig(num_candidates=4, max_len=5)):
            assert c.normalized_score == c.log_prob

    def test_distinct_and_sorted(self, model):
        out = beam_search(model, [6, 3], DecodeConfig(num_candidates=8, max_len=6))
        assert len({c.tokens for c in out}) == len(out) == 8
        scores = [c.normalized_score for c in out]
        assert scores == sorted(scores, reverse=True)

    def test_batch_equals_single(self, model):
        xs = [[3], [4, 5, 6, 7], [7, 7]]
        cfg = DecodeConfig(num_candidates=3, max_len=5)
        batch = beam_search_batch(model, xs, cfg)
        for x, b in zip(xs, batch):
            single = beam_search(model, x, cfg)
            assert [c.tokens for c in single] == [c.tokens for c in b]

    def test_log_probs_only_decrease_along_a_beam(self, model):
        out = beam_search(model, [3, 4], DecodeConfig(num_candidates=4, max_len=6))
        for c in out:
            prefix = [model.sequence_log_prob([3, 4], c.tokens[:k]) for k in range(1, len(c.tokens) + 1)]
            assert all(a >= b for a, b in zip(prefix, prefix[1:]))


class TestDiverseBeam:
    def test_one_group_is_beam_search(self, model):
        a = beam_search(model, [3, 4, 5], DecodeConfig(num_candidates=4, max_len=6))
        b = diverse_beam_search(
            model, [3, 4, 5], DecodeConfig(method="diverse_beam", num_candidates=4, num_groups=1, diversity_penalty=3.0, max_len=6)
        )
        assert [c.tokens for c in a] == [c.tokens for c in b]

    def test_zero_penalty_groups_equal_plain_beam(self, model):
        cfg = DecodeConfig(method="diverse_beam", num_candidates=6, num_groups=3, diversity_penalty=0.0, max_len=6)
        out = diverse_beam_search(model, [5, 3], cfg)
        plain = [c.tokens for c in beam_search(model, [5, 3], DecodeConfig(num_candidates=2, max_len=6))]
        for g in range(3):
            assert sorted(c.tokens for c in out if c.group == g) == sorted(plain)

    def test_large_penalty_separates_first_tokens(self):
        for seed in range(20):
            model = micro_model(seed)
            cfg = DecodeConfig(method="diverse_beam", num_candidates=2, num_groups=2, diversity_penalty=1e6, max_len=5)
            out = diverse_beam_search(model, [3, 4, 6], cfg)
            g0 = [c for c in out if c.group == 0][0]
            g1 = [c for c in out if c.group == 1][0]
            assert g0.tokens[0] != g1.tokens[0]

    def test_true_log_prob_stored(self, model):
        cfg = DecodeConfig(method="diverse_beam", num_candidates=4, num_groups=2, diversity_penalty=2.0, max_len=6)
        for c in diverse_beam_search(model, [3, 7], cfg):
            assert abs(c.log_prob - model.sequence_log_prob([3, 7], c.tokens)) < 1e-6

    def test_groups_must_divide(self):
        with pytest.raises(ValueError, match="divide"):
            DecodeConfig(method="diverse_beam", num_candidates=5, num_groups=2)


class TestNucleus:
    def test_filter_keeps_smallest_prefix(self):
        p = np.array([[0.5, 0.3, 0.15, 0.05]])
        np.testing.assert_allclose(nucleus_filter(p, 0.8), [[0.625, 0.375, 0, 0]])
        np.testing.assert_allclose(nucleus_filter(p, 1.0), p)

    def test_invalid_p(self):
        with pytest.raises(ValueError):
            nucleus_filter(np.ones((1, 2)) / 2, 0.0)
        with pytest.raises(ValueError):
            DecodeConfig(nucleus_p=0)

    @pytest.mark.parametrize("seed", range(5))
    def test_tiny_p_is_greedy(self, seed):
        model = micro_model(seed)
        out = nucleus_sample(model, [3, 4], DecodeConfig(method="nucleus", num_candidates=4, nucleus_p=1e-9, max_len=6))
        assert len(out) == 1
        assert out[0].tokens == greedy_decode(model, [3, 4], 6)

    def test_first_token_frequencies_match_model(self):
        model = micro_model(2, init_std=0.8)
        x = [3, 5]
        n = 10_000
        cfg = DecodeConfig(method="nucleus", num_candidates=1, nucleus_p=1.0, max_len=1)
        out = nucleus_sample_batch(model, [x] * n, cfg, seeds=list(range(n)))
        counts = np.bincount([c[0].tokens[0] for c in out], minlength=model.cfg.vocab_size)[2:]
        logp, _ = model.teacher_forced(x, [EOS])
        p = np.exp(logp.data[0])
        sigma = np.sqrt(n * p * (1 - p))
        assert np.all(np.abs(counts - n * p) <= 3 * sigma + 1e-9), (counts, n * p)
        chi2 = float(np.sum((counts - n * p) ** 2 / (n * p)))
        assert chi2 < 20.52  # 0.999 quantile of chi-square with 5 degrees of freedom

    def test_same_seed_same_output(self, model):
        cfg = DecodeConfig(method="nucleus", num_candidates=6, nucleus_p=0.9, max_len=6, seed=4)
        a = nucleus_sample(model, [3, 4], cfg)
        b = nucleus_sample(model, [3, 4], cfg)
        assert a == b

    def test_deduplicated_and_true_log_probs(self, model):
        cfg = DecodeConfig(method="nucleus", num_candidates=12, nucleus_p=0.95, max_len=6)
        out = nucleus_sample(model, [6, 6, 3], cfg)
        assert len({c.tokens for c in out}) == len(out) <= 12
        for c in out:
            assert abs(c.log_prob - model.sequence_log_prob([6, 6, 3], c.tokens)) < 1e-6

    def test_decode_batch_dispatch(self, model):
        cfg = DecodeConfig(method="nucleus", num_candidates=3, max_len=4)
        assert decode_batch(model, [[3]], cfg, seeds=[0]) == nucleus_sample_batch(model, [[3]], cfg, seeds=[0])


class TestSelectBest:
    def c(self, toks, score):
        return ScoredCandidate(tuple(toks), score, score)

    def test_singleton(self):
        only = self.c([3], -1.0)
        assert select_best([only]) is only

    def test_tie_prefers_shorter(self):
        assert select_best([self.c([3, 4, 5, 6, 2], -2.0), self.c([3, 4, 2], -2.0)]).tokens == (3, 4, 2)

    def test_higher_score(self):
        assert select_best([self.c([3], -1.0), self.c([4], -2.0)]).tokens == (3,)

    def test_empty(self):
        with pytest.raises(ValueError):
            select_best([])

    @settings(max_examples=100, deadline=None)
    @given(st.floats(-50, 0), st.integers(1, 16), st.floats(0, 3))
    def test_normalize_formula(self, lp, n, a):
        assert normalize(lp, n, a) == pytest.approx(lp / n**a)
        assert normalize(lp, n, 0.0) == lp
