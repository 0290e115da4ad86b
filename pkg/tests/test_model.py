import math

import numpy as np
import pytest
import torch

from aakt.data import ConfigError
from aakt.model import (
    AAKTModel,
    ModelConfig,
    SkillClassifier,
    collate_windows,
    load_checkpoint,
    predict_prob,
    rope_rotate,
    save_checkpoint,
    true_skill_distribution,
)
from aakt.sequencing import Token, TokenKind, build_alternate_sequence, window_train

from conftest import make_sequence


def small_config(**kw):
    base = dict(n_questions=12, n_skills=4, dim=32, n_blocks=2, n_heads=4, dropout=0.0)
    base.update(kw)
    return ModelConfig(**base)


def make_batch(n_interactions=4, max_len=8, n_students=2, n_skills=4, seed=0):
    torch.manual_seed(seed)
    windows = []
    for s in range(n_students):
        seq = make_sequence(
            [((s + k) % 12, (k % n_skills, ), k % 2, 10_000 + 100 * k) for k in range(n_interactions)],
            student_id=f"s{s}",
        )
        windows.extend(window_train(build_alternate_sequence(seq), max_len, 0.0, seq.student_id))
    return collate_windows(windows, n_skills)


class TestConfig:
    def test_rotary_dim(self):
        cfg = ModelConfig(n_questions=5, n_skills=2, dim=64, n_heads=8)
        assert cfg.rotary_dim == 4
        assert cfg.head_dim % cfg.rotary_dim == 0

    def test_indivisible_heads_rejected(self):
        with pytest.raises(ConfigError):
            ModelConfig(n_questions=5, n_skills=2, dim=60, n_heads=8)

    def test_odd_rotary_rejected(self):
        # dim / (2 * heads) = 3
        with pytest.raises(ConfigError):
            ModelConfig(n_questions=5, n_skills=2, dim=24, n_heads=4)


class TestQuestionEmbedding:
    def test_same_id_same_vector(self):
        model = AAKTModel(small_config())
        a = model.embed_question(torch.tensor([7]))
        b = model.embed_question(torch.tensor([7]))
        assert torch.equal(a, b)

    def test_out_of_range(self):
        model = AAKTModel(small_config())
        with pytest.raises(IndexError):
            model.embed_question(torch.tensor([12]))

    def test_gradient_touches_only_seen_rows(self):
        model = AAKTModel(small_config(skill_mode="none"))
        before = model.question_emb.weight.detach().clone()
        opt = torch.optim.Adam(model.parameters(), lr=0.1)
        emb = model.embed_question(torch.tensor([7]))
        loss = emb.square().sum()
        loss.backward()
        opt.step()
        after = model.question_emb.weight.detach()
        assert not torch.equal(before[7], after[7])
        mask = torch.ones(12, dtype=torch.bool)
        mask[7] = False
        assert torch.equal(before[mask], after[mask])


class TestResponseEmbedding:
    def test_zero_time_gives_base_vectors(self):
        model = AAKTModel(small_config())
        emb = model.response_emb
        zero = torch.zeros(1)
        assert torch.equal(emb(torch.ones(1), zero)[0], emb.right)
        assert torch.equal(emb(torch.zeros(1), zero)[0], emb.wrong)

    def test_linearity_in_time(self):
        emb = AAKTModel(small_config()).response_emb
        t = torch.tensor([0.37])
        diff = emb(torch.ones(1), 2 * t) - emb(torch.ones(1), t)
        assert torch.allclose(diff[0], t * emb.time, atol=1e-7)


class TestSkillDistributions:
    def test_singleton(self):
        dist = true_skill_distribution({3}, 5)
        assert torch.equal(dist, torch.tensor([0.0, 0.0, 0.0, 1.0, 0.0]))

    def test_pair_splits_mass(self):
        dist = true_skill_distribution({1, 4}, 5)
        assert torch.equal(dist, torch.tensor([0.0, 0.5, 0.0, 0.0, 0.5]))

    def test_sums_to_one(self):
        for ids in ({0}, {0, 1, 2}, {2, 3}):
            assert true_skill_distribution(ids, 4).sum() == pytest.approx(1.0)

    def test_empty_raises(self):
        with pytest.raises(ValueError):
            true_skill_distribution(set(), 4)

    def test_zeroed_head_is_uniform(self):
        head = SkillClassifier(dim=8, n_skills=5)
        for p in head.parameters():
            torch.nn.init.zeros_(p)
        out = head(torch.randn(3, 8))
        assert torch.allclose(out, torch.full((3, 5), 0.2))

    def test_softmax_of_known_logits(self):
        head = SkillClassifier(dim=4, n_skills=2)
        for p in head.parameters():
            torch.nn.init.zeros_(p)
        head.net[2].bias.data = torch.tensor([math.log(2.0), 0.0])
        out = head(torch.zeros(1, 4))
        assert torch.allclose(out, torch.tensor([[2 / 3, 1 / 3]]), atol=1e-6)

    def test_model_aux_output_is_distribution(self):
        model = AAKTModel(small_config())
        out = model(make_batch())
        assert out.aux_probs is not None
        sums = out.aux_probs.sum(-1)
        assert torch.allclose(sums, torch.ones_like(sums), atol=1e-6)
        assert (out.aux_probs > 0).all()


class TestRope:
    def test_position_zero_is_identity(self):
        x = torch.randn(2, 3, 8, dtype=torch.float64)
        out = rope_rotate(x, torch.zeros(3, dtype=torch.long))
        assert torch.equal(out, x)

    def test_norm_preserved(self):
        x = torch.randn(5, 8)
        out = rope_rotate(x, torch.arange(5))
        assert torch.allclose(out.norm(dim=-1), x.norm(dim=-1), atol=1e-6)

    def test_inner_product_depends_on_offset_only(self):
        torch.manual_seed(0)
        q = torch.randn(8, dtype=torch.float64)
        k = torch.randn(8, dtype=torch.float64)

        def score(m, n):
            positions = torch.arange(max(m, n) + 1)
            qr = rope_rotate(q.expand(len(positions), 8), positions)[m]
            kr = rope_rotate(k.expand(len(positions), 8), positions)[n]
            return float(qr @ kr)

        assert score(5, 3) == pytest.approx(score(7, 5), abs=1e-9)
        assert score(5, 3) != pytest.approx(score(6, 3), abs=1e-6)

    def test_odd_dim_rejected(self):
        with pytest.raises(ConfigError):
            rope_rotate(torch.randn(2, 3), torch.arange(2), rotary_dim=3)

    def test_partial_rotation_leaves_tail(self):
        x = torch.randn(4, 8)
        out = rope_rotate(x, torch.arange(4), rotary_dim=4)
        assert torch.equal(out[..., 4:], x[..., 4:])


class TestPredictProb:
    def test_symmetric_pair(self):
        assert predict_prob(torch.tensor([0.0, 0.0])) == pytest.approx(0.5)

    def test_known_values(self):
        assert float(predict_prob(torch.tensor([1.0, 0.0]))) == pytest.approx(0.73106, abs=1e-5)
        assert float(predict_prob(torch.tensor([0.0, 3.0]))) == pytest.approx(0.04743, abs=1e-5)

    def test_antisymmetry(self):
        torch.manual_seed(1)
        v = torch.randn(100, 2, dtype=torch.float64)
        swapped = v[:, [1, 0]]
        total = predict_prob(v) + predict_prob(swapped)
        assert torch.allclose(total, torch.ones_like(total), atol=1e-9)


class TestForward:
    def test_output_shape(self):
        model = AAKTModel(small_config())
        out = model(make_batch(n_interactions=4, max_len=8, n_students=2))
        assert out.probs.shape == (2, 4)
        assert ((out.probs > 0) & (out.probs < 1)).all()

    def test_causality_probe(self):
        torch.manual_seed(3)
        model = AAKTModel(small_config())
        model.eval()
        batch = make_batch(n_interactions=4, max_len=8, n_students=2)
        with torch.no_grad():
            base = model(batch).probs
        perturbed = {k: v.clone() for k, v in batch.items()}
        # Perturb token index 6 = question slot 3.
        perturbed["question_ids"][:, 3] = (perturbed["question_ids"][:, 3] + 1) % 12
        with torch.no_grad():
            changed = model(perturbed).probs
        assert torch.allclose(base[:, :3], changed[:, :3], atol=1e-5)
        assert not torch.allclose(base[:, 3], changed[:, 3], atol=1e-5)

    def test_padding_neutrality(self):
        torch.manual_seed(4)
        model = AAKTModel(small_config())
        model.eval()
        seq = make_sequence([(k, k % 4, k % 2, 1000) for k in range(3)])
        tokens = build_alternate_sequence(seq)
        short = collate_windows(window_train(tokens, 8, 0.0), 4)
        long = collate_windows(window_train(tokens, 16, 0.0), 4)
        with torch.no_grad():
            p_short = model(short).probs[0, :3]
            p_long = model(long).probs[0, :3]
        assert torch.allclose(p_short, p_long, atol=1e-6)

    def test_alternation_violation_raises(self):
        bad = Token(kind=TokenKind.RESPONSE, correct=1)
        window = window_train(build_alternate_sequence(make_sequence([(0, 0, 1, 10)] * 2)), 4, 0.0)[0]
        window.tokens[0] = bad
        with pytest.raises(ValueError, match="alternate"):
            collate_windows([window], 4)

    def test_attention_weights_rows_sum_to_one(self):
        model = AAKTModel(small_config())
        model.eval()
        batch = make_batch()
        with torch.no_grad():
            out = model(batch, collect_attention=True)
        assert len(out.attn_weights) == 2
        weights = out.attn_weights[0]
        sums = weights.sum(-1)
        assert torch.allclose(sums, torch.ones_like(sums), atol=1e-5)
        # Causal: strictly-upper entries are zero.
        upper = torch.triu(torch.ones_like(weights, dtype=torch.bool), diagonal=1)
        assert weights[upper].abs().max() == 0


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        torch.manual_seed(5)
        model = AAKTModel(small_config())
        model.eval()
        path = save_checkpoint(model, tmp_path / "ckpt.npz")
        loaded = load_checkpoint(path)
        loaded.eval()
        assert loaded.cfg == model.cfg
        batch = make_batch()
        with torch.no_grad():
            assert torch.allclose(model(batch).probs, loaded(batch).probs, atol=1e-6)

    def test_arrays_are_little_endian_float32(self, tmp_path):
        model = AAKTModel(small_config())
        path = save_checkpoint(model, tmp_path / "ckpt.npz")
        with np.load(path) as archive:
            for name in archive.files:
                if name == "__config__":
                    continue
                assert archive[name].dtype == np.dtype("<f4")
