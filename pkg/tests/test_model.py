import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from slic_lab import autodiff as ad
from slic_lab.model import (
    EOS,
    Adam,
    ModelCheckpoint,
    ModelConfig,
    Seq2Seq,
    SequenceError,
    count_params,
    mle_loss,
    mle_train_step,
    param_shapes,
)

from conftest import micro_config, micro_model, uniform_model


def rand_seq(rng, n, vocab, eos=False):
    body = [int(t) for t in rng.integers(3, vocab, size=n)]
    return body + [EOS] if eos else body


class TestConfig:
    def test_heads_must_divide_width(self):
        with pytest.raises(ValueError):
            ModelConfig(d_model=10, num_heads=4)

    def test_reserved_ids(self):
        with pytest.raises(ValueError):
            ModelConfig(vocab_size=3)

    def test_untied_adds_output_matrix(self):
        assert "out.w" not in param_shapes(micro_config())
        assert param_shapes(micro_config(tie_embeddings=False))["out.w"] == (8, 6)

    def test_preset_size_under_a_million(self):
        assert count_params(ModelConfig()) < 1_000_000


class TestEncoder:
    def test_deterministic(self, model, rng):
        x = rand_seq(rng, 5, 8)
        assert np.array_equal(model.encode(x).data, model.encode(x).data)

    def test_overlong_rejected(self, model):
        with pytest.raises(SequenceError):
            model.encode([3] * 11)

    def test_empty_rejected(self, model):
        with pytest.raises(SequenceError):
            model.encode([])

    def test_out_of_vocab_rejected(self, model):
        with pytest.raises(SequenceError):
            model.encode([3, 8])


class TestTeacherForced:
    def test_rows_are_distributions(self, model, rng):
        logp, states = model.teacher_forced(rand_seq(rng, 4, 8), rand_seq(rng, 4, 8, eos=True))
        np.testing.assert_allclose(np.exp(logp.data).sum(axis=-1), 1.0, atol=1e-9)
        assert states.hidden.shape[0] == 5

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000), st.integers(1, 5))
    def test_causality(self, seed, t):
        rng = np.random.default_rng(seed)
        model = micro_model(seed % 7)
        x = rand_seq(rng, 4, 8)
        y = rand_seq(rng, 6, 8)
        y2 = list(y)
        y2[t:] = rand_seq(rng, 6 - t, 8)
        a, _ = model.teacher_forced(x, y)
        b, _ = model.teacher_forced(x, y2)
        assert np.array_equal(a.data[: t + 1], b.data[: t + 1])

    def test_overlong_target_rejected(self, model):
        with pytest.raises(SequenceError):
            model.teacher_forced([3], [3] * 7)

    def test_interior_eos_rejected(self, model):
        with pytest.raises(SequenceError):
            model.teacher_forced([3], [3, EOS, 4])


class TestSequenceLogProb:
    def test_uniform_model(self):
        m = uniform_model(4)
        assert m.sequence_log_prob([3, 4], [3, 4, EOS]) == pytest.approx(-3 * math.log(4), abs=1e-12)

    def test_equals_sum_of_gathered(self, model, rng):
        x, y = rand_seq(rng, 3, 8), rand_seq(rng, 4, 8, eos=True)
        logp, _ = model.teacher_forced(x, y)
        total = sum(logp.data[i, t - 2] for i, t in enumerate(y))
        assert model.sequence_log_prob(x, y) == pytest.approx(total, abs=1e-9)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000))
    def test_nonpositive(self, seed):
        rng = np.random.default_rng(seed)
        model = micro_model(seed % 5)
        assert model.sequence_log_prob(rand_seq(rng, 3, 8), rand_seq(rng, 2, 8, True)) <= 0

    def test_padding_invariance(self, model, rng):
        xs = [rand_seq(rng, n, 8) for n in (2, 9, 5)]
        ys = [rand_seq(rng, n, 8, eos=True) for n in (1, 5, 3)]
        batched = model.sequence_log_probs(xs, ys).data
        for i in range(3):
            assert abs(batched[i] - model.sequence_log_prob(xs[i], ys[i])) < 1e-9


class TestPerplexity:
    def test_uniform_is_vocab(self):
        m = uniform_model(4)
        data = [([3, 4], [5, EOS]), ([4], [3, 3, 4])]
        assert m.perplexity(data) == pytest.approx(4.0, abs=1e-6)

    def test_single_example_definition(self, model):
        x, y = [3, 4, 5], [6, 7, EOS]
        lp = model.sequence_log_prob(x, y)
        assert model.perplexity([(x, y)]) == pytest.approx(math.exp(-lp / 3), rel=1e-12)
        assert model.perplexity([(x, y)]) >= 1

    def test_empty_rejected(self, model):
        with pytest.raises(ValueError):
            model.perplexity([])


class TestTraining:
    def test_zero_learning_rate_keeps_parameters(self, model, rng):
        before = model.numpy_params()
        mle_train_step(model, Adam(), [[3, 4]], [[5, EOS]], 0.0)
        for n, a in model.numpy_params().items():
            assert np.array_equal(a, before[n])

    def test_loss_decreases_on_copy_batch(self):
        rng = np.random.default_rng(0)
        model = micro_model(1, vocab_size=12, d_model=16, d_ff=32, init_std=0.1)
        xs = [rand_seq(rng, 4, 12) for _ in range(8)]
        ys = [x + [EOS] for x in xs]
        opt = Adam()
        losses = [mle_train_step(model, opt, xs, ys, 1e-2) for _ in range(200)]
        assert losses[-1] < 0.5 * losses[0]
        assert min(losses[-20:]) < losses[0]

    @pytest.mark.parametrize("tied", [True, False])
    @pytest.mark.parametrize("act", ["gelu", "relu"])
    def test_mle_gradient_finite_differences(self, tied, act):
        model = micro_model(3, num_enc_layers=2, num_dec_layers=2, tie_embeddings=tied, activation=act)
        xs, ys = [[3, 4, 5], [6, 7]], [[4, EOS], [5, 6, 7]]
        model.zero_grad()
        mle_loss(model, xs, ys).backward()
        rng = np.random.default_rng(0)
        for name, p in model.params.items():
            idx = tuple(rng.integers(0, s) for s in p.data.shape)
            old = p.data[idx]
            h = 1e-5
            p.data[idx] = old + h
            with ad.no_grad():
                up = mle_loss(model, xs, ys).item()
            p.data[idx] = old - h
            with ad.no_grad():
                down = mle_loss(model, xs, ys).item()
            p.data[idx] = old
            num = (up - down) / (2 * h)
            got = p.grad[idx]
            assert abs(got - num) <= 1e-3 * max(1e-4, abs(got) + abs(num)), name

    def test_label_smoothing_changes_loss(self, model):
        a = mle_loss(model, [[3]], [[4, EOS]]).item()
        b = mle_loss(model, [[3]], [[4, EOS]], label_smoothing=0.1).item()
        assert a != b


class TestCheckpoint:
    def test_roundtrip_bit_exact(self, model, tmp_path):
        x, y = [3, 4, 5], [6, EOS]
        before = model.sequence_log_prob(x, y)
        opt = Adam()
        mle_train_step(model, opt, [x], [y], 1e-3)
        ck = ModelCheckpoint.from_model(model, step=1, val_perplexity=2.5, extra=opt.state_arrays())
        digest = ck.save(tmp_path / "a.ckpt")
        back = ModelCheckpoint.load(tmp_path / "a.ckpt")
        assert back.model().sequence_log_prob(x, y) == model.sequence_log_prob(x, y) != before
        assert back.checkpoint_id() == ck.checkpoint_id()
        assert back.save(tmp_path / "b.ckpt") == digest
        assert back.step == 1 and back.val_perplexity == 2.5

    def test_id_ignores_metadata(self, model):
        a = ModelCheckpoint.from_model(model, step=1)
        b = ModelCheckpoint.from_model(model, step=9, meta={"k": 1})
        assert a.checkpoint_id() == b.checkpoint_id()
        assert a.to_bytes() != b.to_bytes()

    def test_bad_magic(self):
        with pytest.raises(ValueError):
            ModelCheckpoint.from_bytes(b"NOTACKPT" + bytes(8))

    def test_optimizer_state_restores(self, model):
        opt = Adam()
        mle_train_step(model, opt, [[3]], [[4, EOS]], 1e-2)
        clone = Adam()
        clone.load_state_arrays(opt.state_arrays())
        m2 = Seq2Seq(model.cfg, model.numpy_params())
        mle_train_step(model, opt, [[3]], [[4, EOS]], 1e-2)
        mle_train_step(m2, clone, [[3]], [[4, EOS]], 1e-2)
        for n, a in model.numpy_params().items():
            assert np.array_equal(a, m2.numpy_params()[n])
