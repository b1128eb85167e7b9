import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from ygan import losses, model
from ygan.errors import InputError, ProtocolError


def t(values, dtype=torch.float64):
    return torch.as_tensor(np.asarray(values), dtype=dtype)


class TestReconstructionLoss:
    def test_identity_is_zero(self):
        x = t(np.random.default_rng(0).normal(size=(3, 1, 4, 4)))
        assert losses.reconstruction_loss(x, x.clone()).item() == 0.0

    def test_unit_offset(self):
        x = torch.ones(2, 1, 4, 4, dtype=torch.float64)
        assert losses.reconstruction_loss(x, torch.zeros_like(x)).item() == pytest.approx(1.0, abs=1e-12)

    def test_matches_scalar_loop_oracle(self, rng):
        x = rng.normal(size=(4, 2, 3, 3))
        y = rng.normal(size=(4, 2, 3, 3))
        total = 0.0
        for a, b in zip(x.ravel(), y.ravel()):
            total += abs(a - b)
        expected = total / x.size
        assert losses.reconstruction_loss(t(x), t(y)).item() == pytest.approx(expected, rel=1e-6)

    def test_shape_mismatch(self):
        with pytest.raises(InputError):
            losses.reconstruction_loss(torch.zeros(2, 1, 4, 4), torch.zeros(2, 1, 5, 5))


class TestAdversarialLoss:
    def test_identical_features(self):
        f = t(np.random.default_rng(1).normal(size=(4, 8)))
        assert losses.adversarial_loss(f, f.clone()).item() == 0.0

    def test_analytic_mean_reduction(self):
        f_real = t([[1.0, 0.0], [1.0, 0.0]])
        f_fake = torch.zeros(2, 2, dtype=torch.float64)
        assert losses.adversarial_loss(f_real, f_fake).item() == pytest.approx(0.5, abs=1e-12)

    def test_matches_scalar_loop_oracle(self, rng):
        a = rng.normal(size=(5, 7))
        b = rng.normal(size=(5, 7))
        expected = sum((x - y) ** 2 for x, y in zip(a.ravel(), b.ravel())) / a.size
        assert losses.adversarial_loss(t(a), t(b)).item() == pytest.approx(expected, rel=1e-6)


class TestDiscriminatorBce:
    def test_perfect_discriminator_near_zero(self):
        real = torch.full((8,), 1.0 - 1e-7, dtype=torch.float64)
        fake = torch.full((8,), 1e-7, dtype=torch.float64)
        assert losses.discriminator_bce(real, fake).item() == pytest.approx(0.0, abs=1e-5)

    def test_coin_flip_value(self):
        p = torch.full((4,), 0.5, dtype=torch.float64)
        assert losses.discriminator_bce(p, p).item() == pytest.approx(2 * math.log(2), abs=1e-9)

    def test_matches_scalar_loop_oracle(self, rng):
        real = rng.uniform(0.01, 0.99, size=6)
        fake = rng.uniform(0.01, 0.99, size=6)
        expected = -sum(math.log(r) + math.log(1 - f) for r, f in zip(real, fake)) / 6
        assert losses.discriminator_bce(t(real), t(fake)).item() == pytest.approx(expected, rel=1e-6)

    def test_clamping_prevents_log_zero(self):
        out = losses.discriminator_bce(torch.zeros(3), torch.ones(3))
        assert torch.isfinite(out)


def ce_oracle(logits, labels):
    total = 0.0
    for row, label in zip(logits, labels):
        shifted = row - row.max()
        p = np.exp(shifted) / np.exp(shifted).sum()
        total += -math.log(p[label])
    return total / len(labels)


class TestClassificationLosses:
    def test_confident_correct_logit(self):
        logits = torch.zeros(2, 9, dtype=torch.float64)
        logits[:, 3] = 1e4
        labels = torch.full((2,), 3)
        assert losses.semantic_classification_loss(logits, labels).item() == pytest.approx(0.0, abs=1e-6)

    def test_uniform_logits_log_n(self):
        logits = torch.zeros(4, 9, dtype=torch.float64)
        labels = torch.arange(4)
        assert losses.semantic_classification_loss(logits, labels).item() == pytest.approx(math.log(9), abs=1e-9)

    def test_matches_softmax_loop_oracle(self, rng):
        logits = rng.normal(size=(8, 5))
        labels = rng.integers(0, 5, size=8)
        expected = ce_oracle(logits, labels)
        got = losses.semantic_classification_loss(t(logits), torch.as_tensor(labels)).item()
        assert got == pytest.approx(expected, rel=1e-6)

    def test_label_out_of_range(self):
        with pytest.raises(InputError):
            losses.semantic_classification_loss(torch.zeros(2, 3), torch.tensor([0, 3]))

    def test_residual_loss_same_forward_formula(self, rng):
        logits = t(rng.normal(size=(6, 4)))
        labels = torch.as_tensor(rng.integers(0, 4, size=6))
        assert losses.residual_confusion_loss(logits, labels).item() == pytest.approx(
            losses.semantic_classification_loss(logits, labels).item(), abs=1e-12)

    def test_reversal_gradient_scales_linearly(self):
        # gradient through grad_reverse at several weights, against the
        # identity-path gradient
        logits_net = torch.nn.Linear(4, 3).double()
        labels = torch.tensor([0, 1])
        z0 = torch.randn(2, 4, dtype=torch.float64, generator=torch.Generator().manual_seed(0))

        def grad_at(lam):
            z = z0.clone().requires_grad_(True)
            out = losses.residual_confusion_loss(logits_net(model.grad_reverse(z, lam)), labels)
            out.backward()
            return z.grad

        base = grad_at(1.0)
        for lam in (0.5, 1.0, 2.0):
            assert torch.allclose(grad_at(lam), lam * base, rtol=1e-12, atol=0)

        z = z0.clone().requires_grad_(True)
        losses.residual_confusion_loss(logits_net(z), labels).backward()
        assert torch.allclose(base, -z.grad, rtol=1e-12, atol=0)


class TestShuffleResiduals:
    def test_smallest_batch_swap(self, rng):
        assert losses.shuffle_residuals(2, rng).tolist() == [1, 0]

    def test_batch_of_one_rejected(self, rng):
        with pytest.raises(ProtocolError):
            losses.shuffle_residuals(1, rng)

    def test_no_fixed_points_many_seeds(self):
        for seed in range(1000):
            perm = losses.shuffle_residuals(16, np.random.default_rng(seed))
            assert not np.any(perm == np.arange(16))

    @given(st.integers(min_value=2, max_value=64), st.integers(min_value=0, max_value=10_000))
    @settings(max_examples=200, deadline=None)
    def test_always_a_derangement(self, batch_size, seed):
        perm = losses.shuffle_residuals(batch_size, np.random.default_rng(seed))
        assert sorted(perm.tolist()) == list(range(batch_size))  # bijection
        assert not np.any(perm == np.arange(batch_size))  # fixed-point-free


class TestConsistencyLoss:
    def test_identical_codes_give_minimum(self, rng):
        z = t(rng.normal(size=(4, 10)))
        assert losses.consistency_loss(z, z.clone()).item() == pytest.approx(-1.0, abs=1e-9)

    def test_orthogonal_codes_give_zero(self):
        a = t([[1.0, 0.0], [0.0, 1.0]])
        b = t([[0.0, 1.0], [1.0, 0.0]])
        assert losses.consistency_loss(a, b).item() == pytest.approx(0.0, abs=1e-12)

    def test_forty_five_degrees(self):
        a = t([[1.0, 0.0]])
        b = t([[1.0, 1.0]]) / math.sqrt(2)
        assert losses.consistency_loss(a, b).item() == pytest.approx(-math.cos(math.pi / 4), abs=1e-9)

    def test_zero_norm_guarded(self):
        a = torch.zeros(2, 4)
        b = torch.ones(2, 4)
        assert torch.isfinite(losses.consistency_loss(a, b))

    @given(st.integers(min_value=1, max_value=6), st.integers(min_value=0, max_value=1000))
    @settings(max_examples=100, deadline=None)
    def test_bounded_by_unit_interval(self, batch, seed):
        rng = np.random.default_rng(seed)
        a = t(rng.normal(size=(batch, 8)))
        b = t(rng.normal(size=(batch, 8)))
        value = losses.consistency_loss(a, b).item()
        assert -1.0 - 1e-9 <= value <= 1.0 + 1e-9


class TestObjectives:
    def test_all_zero_components(self):
        zeros = losses.LossBreakdown(0, 0, 0, 0, 0, 0, 0, 0)
        w = losses.LossWeights()
        assert losses.generator_objective(zeros, w) == 0.0
        assert losses.discriminator_objective(zeros, w) == 0.0

    def test_default_weights_emphasize_rec_and_con(self):
        terms = losses.LossBreakdown(rec=1.0, adv=0, bce=0, cls_s=0, cls_r=0, con=1.0,
                                     total_G=0, total_D=0)
        assert losses.generator_objective(terms, losses.LossWeights()) == pytest.approx(100.0)

    def test_discriminator_objective_value(self):
        terms = losses.LossBreakdown(rec=0.0, adv=0, bce=2 * math.log(2), cls_s=0, cls_r=0,
                                     con=0, total_G=0, total_D=0)
        assert losses.discriminator_objective(terms, losses.LossWeights()) == pytest.approx(1.3862943611, abs=1e-9)

    def test_matches_hand_sum(self, rng):
        vals = rng.uniform(0, 2, size=6)
        terms = losses.LossBreakdown(*vals, total_G=0, total_D=0)
        w = losses.LossWeights(lambda1=3, lambda2=0.5, lambda3=2, lambda4=1.5, lambda5=7, lambda6=0.25)
        expected_g = 3 * vals[0] + 0.5 * vals[1] + 2 * vals[3] + 1.5 * vals[4] + 7 * vals[5]
        expected_d = 3 * vals[0] + 0.25 * vals[2]
        assert losses.generator_objective(terms, w) == pytest.approx(expected_g, rel=1e-12)
        assert losses.discriminator_objective(terms, w) == pytest.approx(expected_d, rel=1e-12)

    def test_rec_term_carries_no_discriminator_gradient(self, tiny_bundle):
        # gradient of total_D w.r.t. discriminator parameters equals the
        # gradient of the BCE term alone
        tiny_bundle.eval_mode()
        g = torch.Generator().manual_seed(3)
        x = torch.rand((4, 1, 32, 32), generator=g) * 2 - 1
        z_s = model.encode_semantic(tiny_bundle, x)
        z_r = model.encode_residual(tiny_bundle, x)
        x_hat = model.decode(tiny_bundle, z_s, z_r)
        p_real, _ = model.discriminate(tiny_bundle, x)
        p_fake, _ = model.discriminate(tiny_bundle, x_hat)
        rec = losses.reconstruction_loss(x, x_hat)
        bce = losses.discriminator_bce(p_real, p_fake)
        w = losses.LossWeights()
        total_d = w.lambda1 * rec + w.lambda6 * bce
        ds_params = list(tiny_bundle.discriminator.parameters())
        grads_total = torch.autograd.grad(total_d, ds_params, retain_graph=True, allow_unused=True)
        grads_bce = torch.autograd.grad(w.lambda6 * bce, ds_params, allow_unused=True)
        for gt, gb in zip(grads_total, grads_bce):
            assert torch.equal(gt, gb)


class TestWeightsValidation:
    def test_rejects_negative(self):
        with pytest.raises(InputError):
            losses.LossWeights(lambda3=-1.0)

    def test_rejects_non_finite(self):
        with pytest.raises(InputError):
            losses.LossWeights(lambda1=float("nan"))


class TestFiniteness:
    @given(st.integers(min_value=0, max_value=500))
    @settings(max_examples=60, deadline=None)
    def test_all_losses_finite_and_signed_correctly(self, seed):
        rng = np.random.default_rng(seed)
        x = t(rng.uniform(-1, 1, size=(3, 1, 4, 4)))
        y = t(rng.uniform(-1, 1, size=(3, 1, 4, 4)))
        f1 = t(rng.normal(size=(3, 6)))
        f2 = t(rng.normal(size=(3, 6)))
        probs1 = t(rng.uniform(0, 1, size=3))
        probs2 = t(rng.uniform(0, 1, size=3))
        logits = t(rng.normal(size=(3, 5)))
        labels = torch.as_tensor(rng.integers(0, 5, size=3))
        values = {
            "rec": losses.reconstruction_loss(x, y).item(),
            "adv": losses.adversarial_loss(f1, f2).item(),
            "bce": losses.discriminator_bce(probs1, probs2).item(),
            "cls": losses.semantic_classification_loss(logits, labels).item(),
        }
        for name, v in values.items():
            assert math.isfinite(v) and v >= 0, name
