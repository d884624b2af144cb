import math

import numpy as np
import pytest

from distilrank.encoder import Encoder, EncoderConfig
from distilrank.losses import (
    KDHyper,
    LossError,
    ProjectionSet,
    STANDARD_KD_GRID,
    UnsupportedMapError,
    combine_loss,
    hard_loss,
    intermediate_losses,
    soft_loss,
    uniform_layer_map,
)
from distilrank.tensor import ContractError, Tensor


class TestSoftLoss:
    def test_uniform_distributions(self):
        loss = soft_loss(Tensor([[0.0, 0.0]]), np.array([[0.0, 0.0]]), 1.0)
        assert loss.item() == pytest.approx(math.log(2))

    def test_equal_logits_loss_is_teacher_entropy(self):
        logits = np.array([[1.3, -0.4]])
        p = np.exp(logits[0]) / np.exp(logits[0]).sum()
        entropy = -(p * np.log(p)).sum()
        loss = soft_loss(Tensor(logits.copy()), logits, 1.0)
        assert loss.item() == pytest.approx(entropy, abs=1e-12)

    def test_equal_logits_gradient_at_kl_minimum(self):
        logits = np.array([[1.3, -0.4]])
        s = Tensor(logits.copy(), requires_grad=True)
        soft_loss(s, logits, 1.0).backward()
        # grad of CE at p == q is zero (the KL component's minimum)
        assert np.allclose(s.grad, 0.0, atol=1e-12)

    def test_high_precision_value(self):
        from mpmath import mp, exp as e, log as ln

        mp.dps = 40
        T = 5.0
        t = [2.0, -2.0]
        s = [0.0, 0.0]
        pt = [e(x / T) for x in t]
        Z = sum(pt)
        pt = [x / Z for x in pt]
        ps = [e(x / T) for x in s]
        Zs = sum(ps)
        expected = float(-sum(p * ln(q / Zs) for p, q in zip(pt, ps)) * T * T)
        loss = soft_loss(Tensor([[0.0, 0.0]]), np.array([[2.0, -2.0]]), T)
        assert loss.item() == pytest.approx(expected, rel=1e-12)

    def test_temperature_scaling_keeps_gradient_bounded(self):
        # classic KD property: with the T^2 factor, gradient magnitude stays
        # of the same order across T
        logits = np.array([[2.0, -1.0]])
        teacher = np.array([[1.0, 0.5]])
        mags = []
        for T in (1.0, 5.0, 10.0):
            s = Tensor(logits.copy(), requires_grad=True)
            soft_loss(s, teacher, T).backward()
            mags.append(np.abs(s.grad).max())
        assert max(mags) / min(mags) < 10.0

    def test_non_finite_rejected(self):
        with pytest.raises(LossError):
            soft_loss(Tensor([[0.0, np.inf]]), np.array([[0.0, 0.0]]), 1.0)

    def test_shape_mismatch(self):
        with pytest.raises(ContractError):
            soft_loss(Tensor([[0.0, 0.0]]), np.array([[0.0, 0.0, 0.0]]), 1.0)


class TestHardLoss:
    def test_uniform(self):
        assert hard_loss(Tensor([[0.0, 0.0]]), [1]).item() == \
            pytest.approx(math.log(2))

    def test_confident_correct_is_near_zero(self):
        assert hard_loss(Tensor([[-10.0, 10.0]]), [1]).item() < 1e-4

    def test_invalid_label(self):
        with pytest.raises(ContractError):
            hard_loss(Tensor([[0.0, 0.0]]), [2])

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(0)
        logits = rng.uniform(-1, 1, (3, 2))
        labels = [0, 1, 1]
        s = Tensor(logits.copy(), requires_grad=True)
        hard_loss(s, labels).backward()
        h = 1e-6
        for i in range(3):
            for j in range(2):
                up, down = logits.copy(), logits.copy()
                up[i, j] += h
                down[i, j] -= h
                fd = (hard_loss(Tensor(up), labels).item()
                      - hard_loss(Tensor(down), labels).item()) / (2 * h)
                assert s.grad[i, j] == pytest.approx(fd, abs=1e-6)


class TestLayerMap:
    def test_uniform_6_12(self):
        assert uniform_layer_map(6, 12).mapping == (2, 4, 6, 8, 10, 12)

    def test_uniform_3_12(self):
        assert uniform_layer_map(3, 12).mapping == (4, 8, 12)

    def test_identity(self):
        assert uniform_layer_map(4, 4).mapping == (1, 2, 3, 4)

    def test_non_divisible(self):
        with pytest.raises(UnsupportedMapError):
            uniform_layer_map(5, 12)


class TestProjections:
    def test_same_width_identity_frozen(self):
        proj = ProjectionSet.create(8, 8)
        assert np.array_equal(proj.hidden_proj.data, np.eye(8))
        assert proj.parameters() == []

    def test_cross_width_trainable(self):
        proj = ProjectionSet.create(8, 16, seed=1)
        assert proj.hidden_proj.shape == (8, 16)
        assert len(proj.parameters()) == 2
        assert all(p.requires_grad for p in proj.parameters())


def traces_for(student_seed=1, teacher_seed=2, widths=(8, 8), layers=(2, 4)):
    tok = np.array([[2, 5, 6, 3, 7, 8, 3, 0, 0]])
    seg = np.array([[0, 0, 0, 0, 1, 1, 1, 0, 0]])
    mask = np.array([[1, 1, 1, 1, 1, 1, 1, 0, 0]], dtype=float)
    s_cfg = EncoderConfig(layers[0], widths[0], 2, vocab_size=20,
                          max_position=16)
    t_cfg = EncoderConfig(layers[1], widths[1], 2, vocab_size=20,
                          max_position=16)
    s = Encoder(s_cfg, seed=student_seed).forward(tok, seg, mask)
    t = Encoder(t_cfg, seed=teacher_seed).forward(tok, seg, mask)
    return s, t, mask


class TestIntermediateLosses:
    def test_identical_traces_give_zero(self):
        tok = np.array([[2, 5, 6, 3, 0]])
        mask = np.array([[1, 1, 1, 1, 0]], dtype=float)
        cfg = EncoderConfig(2, 8, 2, vocab_size=20, max_position=16)
        enc = Encoder(cfg, seed=4)
        tr1 = enc.forward(tok, attention_mask=mask)
        tr2 = enc.forward(tok, attention_mask=mask)
        lm = uniform_layer_map(2, 2)
        proj = ProjectionSet.create(8, 8)
        la, lh, le = intermediate_losses(tr1, tr2, lm, proj)
        assert la.item() == 0.0
        assert lh.item() == 0.0
        assert le.item() == 0.0

    def test_zero_teacher_zero_projection(self):
        s, t, mask = traces_for()
        for hs in t.hidden_states:
            hs.data[...] = 0.0
        proj = ProjectionSet.create(8, 8)
        proj.hidden_proj = Tensor(np.zeros((8, 8)))
        lm = uniform_layer_map(2, 4)
        _, lh, _ = intermediate_losses(s, t, lm, proj)
        assert lh.item() == 0.0

    def test_matches_direct_recomputation(self):
        s, t, mask = traces_for()
        lm = uniform_layer_map(2, 4)
        proj = ProjectionSet.create(8, 8)
        la, lh, le = intermediate_losses(s, t, lm, proj)

        m = mask[0]
        pair_mask = np.outer(m, m)
        n_pairs = pair_mask.sum()
        attn_expect = 0.0
        hidn_expect = 0.0
        for sm, tl in enumerate(lm.mapping):
            ds = s.attention_scores[sm].data[0] - \
                t.attention_scores[tl - 1].data[0]
            attn_expect += (ds ** 2 * pair_mask).sum() / \
                (pair_mask.sum() * ds.shape[0])
            dh = s.hidden_states[sm].data[0] @ proj.hidden_proj.data \
                - t.hidden_states[tl - 1].data[0]
            hidn_expect += (dh ** 2 * m[:, None]).sum() / (m.sum() * dh.shape[1])
        attn_expect /= len(lm.mapping)
        hidn_expect /= len(lm.mapping)
        de = s.embedding_output.data[0] @ proj.embed_proj.data \
            - t.embedding_output.data[0]
        emb_expect = (de ** 2 * m[:, None]).sum() / (m.sum() * de.shape[1])
        assert la.item() == pytest.approx(attn_expect, rel=1e-12)
        assert lh.item() == pytest.approx(hidn_expect, rel=1e-12)
        assert le.item() == pytest.approx(emb_expect, rel=1e-12)

    def test_mse_components_nonnegative(self):
        s, t, _ = traces_for(widths=(8, 16))
        lm = uniform_layer_map(2, 4)
        proj = ProjectionSet.create(8, 16, seed=3)
        for term in intermediate_losses(s, t, lm, proj):
            assert term.item() >= 0.0

    def test_head_count_mismatch_averages(self):
        tok = np.array([[2, 5, 6, 0]])
        mask = np.array([[1, 1, 1, 0]], dtype=float)
        s_cfg = EncoderConfig(1, 8, 1, vocab_size=20, max_position=16)
        t_cfg = EncoderConfig(1, 8, 4, vocab_size=20, max_position=16)
        s = Encoder(s_cfg, seed=1).forward(tok, attention_mask=mask)
        t = Encoder(t_cfg, seed=2).forward(tok, attention_mask=mask)
        la, _, _ = intermediate_losses(
            s, t, uniform_layer_map(1, 1), ProjectionSet.create(8, 8)
        )
        ds = s.attention_scores[0].data.mean(axis=1) \
            - t.attention_scores[0].data.mean(axis=1)
        pm = np.outer(mask[0], mask[0])
        expected = (ds[0] ** 2 * pm).sum() / pm.sum()
        assert la.item() == pytest.approx(expected, rel=1e-12)

    def test_mismatched_masks_rejected(self):
        s, t, _ = traces_for()
        t.attention_mask = 1.0 - t.attention_mask
        with pytest.raises(ContractError):
            intermediate_losses(s, t, uniform_layer_map(2, 4),
                                ProjectionSet.create(8, 8))


class TestCombineLoss:
    def c(self, **kwargs):
        return {k: Tensor(np.array(v)) for k, v in kwargs.items()}

    def test_simplified_is_unweighted_sum(self):
        comp = self.c(l_attn=1.0, l_hidn=1.0, l_emb=1.0, l_soft=1.0,
                      l_hard=1.0)
        total, bd = combine_loss(comp, "simplified_one_step")
        assert total.item() == 5.0
        assert bd.total == 5.0

    def test_standard_kd_alpha_half(self):
        comp = self.c(l_soft=math.log(2), l_hard=math.log(2))
        total, _ = combine_loss(comp, "standard_kd", KDHyper(alpha=0.5))
        assert total.item() == pytest.approx(math.log(2))

    def test_all_zero_components(self):
        full = self.c(l_attn=0.0, l_hidn=0.0, l_emb=0.0, l_soft=0.0,
                      l_hard=0.0)
        for mode in ("intermediate", "prediction_soft", "prediction_soft_hard",
                     "one_step", "simplified_one_step"):
            total, _ = combine_loss(full, mode)
            assert total.item() == 0.0
        total, _ = combine_loss(full, "standard_kd", KDHyper())
        assert total.item() == 0.0

    def test_adding_hard_term_shifts_total_by_hard_loss(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            comp = self.c(**{k: float(rng.uniform(0, 3)) for k in
                             ("l_attn", "l_hidn", "l_emb", "l_soft",
                              "l_hard")})
            with_hard, _ = combine_loss(comp, "simplified_one_step")
            without, _ = combine_loss(comp, "one_step")
            assert with_hard.item() - without.item() == \
                pytest.approx(comp["l_hard"].item(), abs=1e-12)

    def test_missing_component(self):
        with pytest.raises(ContractError, match="l_hard"):
            combine_loss(self.c(l_soft=1.0), "standard_kd", KDHyper())

    def test_unknown_mode(self):
        with pytest.raises(ContractError):
            combine_loss({}, "nope")


def test_grid_covers_expected_values_in_order():
    assert len(STANDARD_KD_GRID) == 9
    assert {h.temperature for h in STANDARD_KD_GRID} == {1.0, 5.0, 10.0}
    assert {h.alpha for h in STANDARD_KD_GRID} == {0.2, 0.5, 0.7}
    # ascending (T, alpha) so that ties keep the smallest values
    keys = [(h.temperature, h.alpha) for h in STANDARD_KD_GRID]
    assert keys == sorted(keys)


def test_kd_hyper_validation():
    with pytest.raises(ValueError):
        KDHyper(temperature=0.0)
    with pytest.raises(ValueError):
        KDHyper(alpha=1.5)
