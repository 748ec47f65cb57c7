"""Alignment transformer tests: masking (causality and batch isolation),
attention-weight normalization, greedy self-replay, memorization on a tiny
corpus, a full gradient check on a miniature model, and the P2NA checkpoint
round trip."""

import numpy as np
import pytest

from gradcheck import assert_grads_match
from promptnerf import align, binio
from promptnerf import tensor as T
from promptnerf.tensor import Tensor

TINY = align.AlignArch(embed_dim=4, latent_dim=3, model_dim=8, n_heads=2,
                       enc_layers=1, dec_layers=1, ff_mult=2)


def random_examples(n, arch, seed=0, views=3):
    rng = np.random.default_rng(seed)
    return [align.AlignExample(f"s{i}",
                               rng.normal(size=(views, arch.embed_dim)),
                               rng.normal(size=(align.SEQ_LEN, arch.latent_dim)))
            for i in range(n)]


class TestArch:
    def test_head_split_must_divide(self):
        with pytest.raises(ValueError, match="divisible"):
            align.AlignArch(model_dim=10, n_heads=4)

    def test_init_is_deterministic(self):
        a = align.AlignModel.init(TINY, seed=5)
        b = align.AlignModel.init(TINY, seed=5)
        for k in align.param_keys(TINY):
            assert np.array_equal(a.params[k], b.params[k])

    def test_param_keys_cover_shapes_exactly(self):
        keys = align.param_keys(TINY)
        shapes = align.param_shapes(TINY)
        assert sorted(keys) == sorted(shapes)
        assert len(keys) == len(set(keys))

    def test_layernorm_gains_start_at_one(self):
        m = align.AlignModel.init(TINY, seed=0)
        assert np.all(m.params["final_ln_gain"] == 1.0)
        assert np.all(m.params["final_ln_bias"] == 0.0)


class TestPositions:
    def test_table_shape_and_range(self):
        table = align.positional_table(8)
        assert table.shape == (align.SEQ_LEN + 1, 8)
        assert np.abs(table).max() <= 1.0

    def test_rows_are_distinct(self):
        table = align.positional_table(16)
        for i in range(table.shape[0]):
            for j in range(i + 1, table.shape[0]):
                assert np.abs(table[i] - table[j]).max() > 1e-6


class TestMasks:
    def test_causal_block_structure(self):
        mask = align.causal_block_mask(2, 3)
        assert mask.shape == (6, 6)
        # within a block: lower triangle open, upper closed
        assert mask[1, 0] == 0.0 and mask[0, 1] == align.NEG_INF
        assert mask[2, 2] == 0.0
        # across blocks: always closed
        assert np.all(mask[:3, 3:] == align.NEG_INF)
        assert np.all(mask[3:, :3] == align.NEG_INF)

    def test_cross_block_structure(self):
        mask = align.cross_block_mask(3, 2, 1)
        assert mask.shape == (6, 3)
        for b in range(3):
            assert np.all(mask[2 * b:2 * b + 2, b] == 0.0)
        assert mask[0, 1] == align.NEG_INF

    def test_masked_softmax_rows_sum_to_one(self):
        rng = np.random.default_rng(3)
        scores = rng.normal(size=(6, 6))
        weights = T.softmax_rows(Tensor(scores),
                                 bias=align.causal_block_mask(2, 3)).data
        assert np.allclose(weights.sum(axis=1), 1.0)
        # masked slots carry zero weight
        assert np.all(weights[:3, 3:] == 0.0)
        assert weights[0, 1] == 0.0


class TestForward:
    def test_causality_under_teacher_forcing(self):
        # perturbing target token t leaves predictions at positions <= t alone
        model = align.AlignModel.init(TINY, seed=1)
        rng = np.random.default_rng(0)
        emb = rng.normal(size=(1, TINY.embed_dim))
        targets = rng.normal(size=(1, align.SEQ_LEN, TINY.latent_dim))
        base = align.predict_teacher_forced(model, emb, targets)
        t = 6
        bumped = targets.copy()
        bumped[0, t] += 1.0
        moved = align.predict_teacher_forced(model, emb, bumped)
        assert np.array_equal(moved[0, :t + 1], base[0, :t + 1])
        assert np.abs(moved[0, t + 1:] - base[0, t + 1:]).max() > 1e-8

    def test_batch_isolation(self):
        # a sample's predictions do not depend on its batch companions
        model = align.AlignModel.init(TINY, seed=2)
        rng = np.random.default_rng(4)
        emb = rng.normal(size=(3, TINY.embed_dim))
        targets = rng.normal(size=(3, align.SEQ_LEN, TINY.latent_dim))
        batched = align.predict_teacher_forced(model, emb, targets)
        solo = align.predict_teacher_forced(model, emb[1:2], targets[1:2])
        assert np.abs(batched[1] - solo[0]).max() < 1e-9

    def test_greedy_self_replay(self):
        # teacher forcing on the greedy outputs reproduces them exactly
        model = align.AlignModel.init(TINY, seed=3)
        emb = np.random.default_rng(6).normal(size=TINY.embed_dim)
        code = align.infer_latent(model, emb)
        assert code.shape == (align.SEQ_LEN, TINY.latent_dim)
        replay = align.predict_teacher_forced(model, emb[None, :], code[None])
        assert np.abs(replay[0] - code).max() <= 1e-10

    def test_infer_latent_rejects_bad_shape(self):
        model = align.AlignModel.init(TINY, seed=0)
        with pytest.raises(ValueError, match="embedding shape"):
            align.infer_latent(model, np.zeros(TINY.embed_dim + 1))

    def test_teacher_inputs_shift(self):
        targets = np.arange(2 * align.SEQ_LEN * 3, dtype=float).reshape(
            2, align.SEQ_LEN, 3)
        flat = align.teacher_inputs(targets)
        assert flat.shape == (2 * align.SEQ_LEN, 3)
        assert np.all(flat[0] == 0.0)  # start symbol
        assert np.all(flat[align.SEQ_LEN] == 0.0)
        assert np.array_equal(flat[1], targets[0, 0])


class TestGradients:
    def test_full_loss_gradcheck_miniature(self):
        arch = align.AlignArch(embed_dim=2, latent_dim=2, model_dim=4,
                               n_heads=2, enc_layers=1, dec_layers=1, ff_mult=1)
        model = align.AlignModel.init(arch, seed=7)
        tensors = model.tensors(requires_grad=True)
        rng = np.random.default_rng(8)
        emb = rng.normal(size=(2, 2))
        targets = rng.normal(size=(2, align.SEQ_LEN, 2))
        params = [tensors[k] for k in align.param_keys(arch)]

        def build_loss():
            return align.teacher_forced_loss(tensors, emb, targets, arch)

        assert_grads_match(build_loss, params, rtol=2e-4, afloor=1e-3, h=1e-5)


class TestTraining:
    def test_memorizes_tiny_corpus(self):
        examples = random_examples(2, TINY, seed=1, views=1)
        cfg = align.AlignTrainConfig(lr=3e-3, epochs=1200, seed=0,
                                     view_policy="fixed_view")
        model, losses = align.train_align(examples, TINY, cfg)
        assert losses[-1] < 1e-5
        assert losses[-1] < losses[0]
        for ex in examples:
            code = align.infer_latent(model, ex.view_embeddings[0])
            assert np.abs(code - ex.latent).max() < 0.05

    def test_training_is_deterministic(self):
        examples = random_examples(2, TINY, seed=2)
        cfg = align.AlignTrainConfig(lr=1e-3, epochs=8, seed=4)
        _, l1 = align.train_align(examples, TINY, cfg)
        _, l2 = align.train_align(examples, TINY, cfg)
        assert l1 == l2

    def test_view_policies(self):
        examples = random_examples(2, TINY, seed=3, views=4)
        cfg_fixed = align.AlignTrainConfig(view_policy="fixed_view", fixed_view=1)
        emb_a = align._epoch_embeddings(examples, cfg_fixed, 0)
        emb_b = align._epoch_embeddings(examples, cfg_fixed, 5)
        assert np.array_equal(emb_a, emb_b)
        assert np.array_equal(emb_a[0], examples[0].view_embeddings[1])
        cfg_rand = align.AlignTrainConfig(view_policy="random_per_epoch", seed=0)
        draws = [align._epoch_embeddings(examples, cfg_rand, e) for e in range(6)]
        assert any(not np.array_equal(draws[0], d) for d in draws[1:])
        # and the random policy is reproducible for a given epoch
        assert np.array_equal(draws[2], align._epoch_embeddings(examples, cfg_rand, 2))

    def test_validation_errors(self):
        with pytest.raises(ValueError, match="no training examples"):
            align.train_align([], TINY, align.AlignTrainConfig())
        bad = random_examples(1, TINY)
        bad[0].view_embeddings = bad[0].view_embeddings[:, :2]
        with pytest.raises(ValueError, match="embedding dim"):
            align.train_align(bad, TINY, align.AlignTrainConfig())
        with pytest.raises(ValueError, match="view policy"):
            align.AlignTrainConfig(view_policy="sometimes")


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        model = align.AlignModel.init(TINY, seed=9)
        path = tmp_path / "align.p2na"
        align.save_align(model, path)
        loaded = align.load_align(path)
        assert loaded.arch == TINY
        for k in align.param_keys(TINY):
            assert np.array_equal(loaded.params[k], model.params[k])

    def test_corruption_detected(self, tmp_path):
        model = align.AlignModel.init(TINY, seed=9)
        path = tmp_path / "align.p2na"
        align.save_align(model, path)
        raw = bytearray(path.read_bytes())
        raw[len(raw) - 20] ^= 0x01
        path.write_bytes(bytes(raw))
        with pytest.raises(binio.FormatError):
            align.load_align(path)
