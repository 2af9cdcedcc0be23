import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from vibmil import autodiff as ad
from vibmil import nn
from vibmil import synthgen as sg

probs_arrays = hnp.arrays(np.float64, st.integers(1, 12), elements=st.floats(0.01, 0.99))


class TestEncoder:
    def test_identity_layer_passes_input_through(self):
        x = np.random.default_rng(0).normal(size=(5, 3))
        np.testing.assert_array_equal(nn.encode_array(nn.EncoderModel.identity(3), x), x)

    def test_dims_must_chain(self):
        a = nn.EncoderModel.build([4, 3], seed=0).layers[0]
        b = nn.EncoderModel.build([5, 2], seed=0).layers[0]
        with pytest.raises(ValueError, match="chain"):
            nn.EncoderModel([a, b])

    def test_input_dim_mismatch(self):
        with pytest.raises(ValueError, match="expects"):
            nn.encode(nn.EncoderModel.build([4, 3]), np.zeros((2, 5)))

    def test_frozen_layer_gets_no_gradient(self):
        enc = nn.EncoderModel.build([4, 6, 3], seed=1)
        enc.freeze(1)
        ad.backward(ad.sum(nn.encode(enc, np.ones((3, 4)))))
        assert enc.layers[0].weight.grad is None
        assert enc.layers[1].weight.grad is not None
        assert enc.parameters(trainable_only=True) == [enc.layers[1].weight, enc.layers[1].bias]

    def test_first_layer_gradient_matches_finite_differences(self):
        enc = nn.EncoderModel.build([4, 6, 3], norm=True, seed=2)
        x = np.random.default_rng(2).normal(size=(5, 4))
        enc.calibrate(x)
        w = enc.layers[0].weight
        err = ad.finite_diff_check(lambda w_: ad.sum(nn.encode(enc, x) * nn.encode(enc, x)), [w])
        assert err < 1e-4

    def test_frozen_stats_are_used_and_not_updated(self):
        enc = nn.EncoderModel.build([3, 2], norm=True, seed=0)
        enc.layers[0].norm.running_mean = np.array([0.5, -0.5])
        enc.layers[0].norm.running_var = np.array([2.0, 3.0])
        enc.training = True
        enc.freeze_stats(True)
        x = np.random.default_rng(0).normal(size=(6, 3))
        out = nn.encode_array(enc, x)
        z = x @ enc.layers[0].weight.data
        expected = np.tanh((z - [0.5, -0.5]) / np.sqrt(np.array([2.0, 3.0]) + nn.NORM_EPS))
        np.testing.assert_allclose(out, expected, rtol=1e-12)
        np.testing.assert_array_equal(enc.layers[0].norm.running_mean, [0.5, -0.5])

    def test_training_stats_update_when_unfrozen(self):
        enc = nn.EncoderModel.build([3, 2], norm=True, seed=0)
        enc.training = True
        enc.freeze_stats(False)
        nn.encode(enc, np.random.default_rng(0).normal(size=(6, 3)))
        assert not np.array_equal(enc.layers[0].norm.running_mean, np.zeros(2))

    def test_copy_is_independent(self):
        enc = nn.EncoderModel.build([3, 2], seed=0)
        dup = enc.copy()
        dup.layers[0].weight.data += 1.0
        assert not np.array_equal(dup.layers[0].weight.data, enc.layers[0].weight.data)

    def test_forward_counter(self):
        enc = nn.EncoderModel.build([3, 2])
        nn.encode_array(enc, np.zeros((7, 3)))
        nn.encode_array(enc, np.zeros((5, 3)))
        assert enc.instances_forwarded == 12


class TestGate:
    def test_zero_scorer_gives_half(self):
        gate = nn.IBGate(ad.parameter(np.zeros((3, 1))), ad.parameter(0.0))
        np.testing.assert_array_equal(nn.gate_probs(gate, np.ones((4, 3))).data, 0.5)

    def test_probs_open_interval(self):
        gate = nn.IBGate.build(3, seed=0)
        gate.weight.data[:] = 5.0
        p = nn.gate_probs(gate, np.random.default_rng(0).normal(size=(50, 3))).data
        assert np.all((p > 0) & (p < 1))

    def test_dim_mismatch(self):
        with pytest.raises(ValueError):
            nn.gate_probs(nn.IBGate.build(3), np.ones((2, 4)))

    @pytest.mark.parametrize("prior", [0.0, 1.0, -0.1])
    def test_prior_must_be_open_unit(self, prior):
        with pytest.raises(ValueError):
            nn.IBGate.build(3, prior_rate=prior)

    def test_oracle_scorer_ranks_positives_higher(self):
        cfg = sg.DatasetConfig(n_bags=20, bag_size_min=50, bag_size_max=80, positive_fraction_min=0.2,
                               positive_fraction_max=0.4, prototype_separation=6.0, seed=5)
        ds = sg.generate_dataset(cfg)
        x = np.concatenate([sg.latent_features(cfg, b.bag_id) for b in ds])
        y = np.concatenate([b.instance_labels for b in ds]).astype(float)
        design = np.hstack([x, np.ones((len(x), 1))])
        coef = np.linalg.lstsq(design, 2 * y - 1, rcond=None)[0]  # linear-probe oracle
        gate = nn.IBGate(ad.parameter(coef[:-1, None]), ad.parameter(coef[-1]))
        p = nn.gate_probs(gate, x).data
        assert p[y == 1].mean() > p[y == 0].mean()


class TestMask:
    def test_degenerate_probs_keep_everything(self):
        probs = ad.Tensor(np.full(6, 1 - 1e-12))
        hard, blended = nn.sample_mask(probs, 0)
        np.testing.assert_array_equal(hard, 1.0)
        np.testing.assert_allclose(blended.data, 1.0, atol=1e-11)

    def test_blended_expectation_equals_probs(self):
        p = np.array([0.05, 0.3, 0.5, 0.9])
        n = 25000  # 1e5 draws in total
        _, blended = nn.sample_mask(ad.Tensor(np.tile(p, n)), 0)
        mean = blended.data.reshape(n, 4).mean(axis=0)
        sigma = np.sqrt(p * (1 - p) / n) / 2
        assert np.all(np.abs(mean - p) < 3 * sigma)

    def test_straight_through_derivative_is_half(self):
        p = ad.Tensor(np.array([0.2, 0.7, 0.4]), requires_grad=True)
        _, blended = nn.sample_mask(p, 3)
        ad.backward(ad.sum(blended))
        np.testing.assert_array_equal(p.grad, 0.5)

    def test_seeded(self):
        p = ad.Tensor(np.linspace(0.1, 0.9, 9))
        np.testing.assert_array_equal(nn.sample_mask(p, 4)[0], nn.sample_mask(p, 4)[0])

    def test_apply_mask_ones_and_zeros(self):
        z = np.random.default_rng(0).normal(size=(4, 3))
        np.testing.assert_array_equal(nn.apply_mask(z, np.ones(4)).data, z)
        np.testing.assert_array_equal(nn.apply_mask(z, np.zeros(4)).data, 0.0)

    def test_apply_mask_gradient(self):
        rng = np.random.default_rng(1)
        z = ad.Tensor(rng.normal(size=(4, 3)))
        m = ad.Tensor(rng.uniform(size=4))
        w = ad.Tensor(rng.normal(size=(4, 3)))
        assert ad.finite_diff_check(lambda z_, m_: ad.sum(nn.apply_mask(z_, m_) * w), [z, m]) < 1e-6
        z.grad = None
        ad.backward(ad.sum(nn.apply_mask(z, m) * w))
        np.testing.assert_allclose(z.grad, w.data * m.data[:, None], rtol=1e-12)

    def test_apply_mask_length_mismatch(self):
        with pytest.raises(ValueError):
            nn.apply_mask(np.ones((4, 3)), np.ones(3))


class TestKL:
    def test_identical_is_zero(self):
        assert nn.kl_bernoulli(np.full(5, 0.3), 0.3).item() == 0.0

    def test_closed_form_reference(self):
        assert nn.kl_bernoulli(np.array([0.9]), 0.1).item() == pytest.approx(1.757780, abs=1e-6)

    def test_nonnegative_sweep(self):
        rng = np.random.default_rng(0)
        pairs = rng.uniform(0.001, 0.999, size=(10**4, 2))
        assert all(nn.kl_bernoulli(np.array([p]), prior).item() >= 0 for p, prior in pairs)

    def test_boundaries_are_clamped(self):
        assert math.isfinite(nn.kl_bernoulli(np.array([0.0, 1.0]), 0.5).item())

    @settings(max_examples=200, deadline=None)
    @given(probs_arrays, st.floats(0.01, 0.99))
    def test_nonnegative_and_zero_only_when_equal(self, p, prior):
        kl = nn.kl_bernoulli(p, prior).item()
        assert kl >= 0
        if kl < 1e-12:
            np.testing.assert_allclose(p, prior, atol=1e-5)


class TestTopK:
    def test_direct_ordering(self):
        np.testing.assert_array_equal(nn.top_k_select(np.array([0.1, 0.9, 0.5]), 2), [1, 2])

    def test_ties_prefer_lower_index(self):
        np.testing.assert_array_equal(nn.top_k_select(np.array([0.5, 0.7, 0.5, 0.7]), 3), [1, 3, 0])

    def test_k_larger_than_n(self):
        assert len(nn.top_k_select(np.array([0.2, 0.1]), 5)) == 2

    def test_k_must_be_positive(self):
        with pytest.raises(ValueError):
            nn.top_k_select(np.array([0.2]), 0)

    @settings(max_examples=200, deadline=None)
    @given(probs_arrays, st.integers(1, 15))
    def test_contains_argmax(self, p, k):
        assert p[nn.top_k_select(p, k)].max() == p.max()


class TestHeads:
    @pytest.mark.parametrize("variant", nn.HEAD_VARIANTS)
    def test_singleton_bag_reduces_to_classifier(self, variant):
        head = nn.MILHead.build(variant, 4, 3, seed=0)
        z = np.random.default_rng(0).normal(size=(1, 4))
        logits, _ = nn.mil_forward(head, z)
        np.testing.assert_allclose(logits.data, (z @ head.classifier_w.data + head.classifier_b.data)[0], rtol=1e-12)

    def test_identical_instances_mean_equals_attention(self):
        z = np.tile(np.random.default_rng(1).normal(size=(1, 4)), (6, 1))
        att = nn.MILHead.build("attention", 4, 2, seed=3)
        mean = nn.MILHead.build("mean", 4, 2, seed=3)
        mean.classifier_w.data = att.classifier_w.data.copy()
        la, a = nn.mil_forward(att, z)
        lm, _ = nn.mil_forward(mean, z)
        np.testing.assert_allclose(a.data, 1 / 6, rtol=1e-12)
        np.testing.assert_allclose(la.data, lm.data, rtol=1e-12)

    def test_attention_is_a_distribution(self):
        head = nn.MILHead.build("attention", 4, 2, seed=0)
        _, a = nn.mil_forward(head, np.random.default_rng(2).normal(size=(30, 4)))
        assert np.all(a.data >= 0)
        assert abs(a.data.sum() - 1) < 1e-12

    def test_max_pool_matches_per_instance_brute_force(self):
        head = nn.MILHead.build("max", 4, 3, seed=0)
        z = np.random.default_rng(3).normal(size=(9, 4))
        logits, attn = nn.mil_forward(head, z)
        per = z @ head.classifier_w.data + head.classifier_b.data
        np.testing.assert_array_equal(logits.data, per.max(axis=0))
        assert attn is None

    def test_empty_bag(self):
        with pytest.raises(ValueError):
            nn.mil_forward(nn.MILHead.build("mean", 4), np.zeros((0, 4)))

    def test_unknown_variant(self):
        with pytest.raises(ValueError, match="unknown head"):
            nn.MILHead.build("transformer", 4)

    def test_parameter_names(self):
        head = nn.MILHead.build("attention", 4)
        assert [p.name for p in head.parameters()] == [
            "head.cls_w", "head.cls_b", "head.attn_v", "head.attn_u", "head.attn_w"]


class TestVIBLoss:
    def setup_method(self):
        rng = np.random.default_rng(0)
        self.z = rng.normal(size=(5, 4))
        self.head = nn.MILHead.build("attention", 4, 2, seed=0)
        self.logits, _ = nn.mil_forward(self.head, self.z)

    def test_beta_zero_is_cross_entropy(self):
        gate = nn.IBGate.build(4, beta=0.0)
        probs = nn.gate_probs(gate, self.z)
        assert nn.vib_loss(self.logits, 1, probs, gate).item() == ad.cross_entropy(self.logits, 1).item()

    def test_probs_at_prior_is_cross_entropy(self):
        gate = nn.IBGate.build(4, prior_rate=0.2, beta=3.0)
        loss = nn.vib_loss(self.logits, 0, np.full(5, 0.2), gate).item()
        assert loss == ad.cross_entropy(self.logits, 0).item()

    def test_gate_scorer_gradient(self):
        gate = nn.IBGate.build(4, beta=0.5, seed=1)
        gate.weight.data = np.random.default_rng(1).normal(size=(4, 1))
        z = ad.Tensor(self.z)

        def loss(w, b):
            probs = nn.gate_probs(gate, z)
            _, blended = nn.sample_mask(probs, 9)
            logits, _ = nn.mil_forward(self.head, nn.apply_mask(z, blended))
            return nn.vib_loss(logits, 1, probs, gate)

        assert ad.finite_diff_check(loss, [gate.weight, gate.bias]) < 1e-4
