import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from maskd import autodiff as ad
from maskd import core
from maskd.autodiff import ShapeError, Tensor
from maskd.core import MaskSet, Projector, ReceptiveTokens, WeightingNet


@pytest.fixture
def rng():
    return np.random.default_rng(7)


def random_setup(rng, T=3, C=4, Cs=2, H=3, W=3, batch=None):
    lead = () if batch is None else (batch,)
    tokens = ReceptiveTokens(T, C, rng)
    Ft = Tensor(rng.normal(size=lead + (C, H, W)))
    Fs = Tensor(rng.normal(size=lead + (Cs, H, W)), requires_grad=True)
    phi = Projector(Cs, C, rng)
    phi.proj.bias.data[...] = rng.normal(size=C)
    weighting = WeightingNet(C, T, rng)
    weighting.head.weight.data[...] = rng.normal(size=weighting.head.weight.shape)
    weighting.head.bias.data[...] = rng.normal(size=T)
    return tokens, Ft, Fs, phi, weighting


def proj_np(phi, Fs):
    return oracles.project(phi.proj.weight.data[:, :, 0, 0], phi.proj.bias.data, Fs)


class TestComputeMasks:
    def test_zero_tokens_give_half(self, rng):
        tok = ReceptiveTokens(3, 4, E=np.zeros((3, 4)))
        M = core.compute_masks(tok, Tensor(rng.normal(size=(4, 6)))).M.data
        assert np.all(M == 0.5)

    def test_single_entry(self):
        tok = ReceptiveTokens(1, 1, E=[[math.log(3)]])
        M = core.compute_masks(tok, Tensor([[1.0]])).M.data
        assert abs(M[0, 0] - 0.75) < 1e-15

    def test_matches_scalar_loop(self, rng):
        tok = ReceptiveTokens(3, 4, rng)
        F = rng.normal(size=(4, 6))
        M = core.compute_masks(tok, Tensor(F)).M.data
        np.testing.assert_allclose(M, oracles.masks(tok.E.data, F), atol=1e-12, rtol=0)

    def test_channel_mismatch(self, rng):
        with pytest.raises(ShapeError):
            core.compute_masks(ReceptiveTokens(2, 3, rng), ad.zeros((4, 5)))

    def test_entries_in_open_interval(self, rng):
        tok = ReceptiveTokens(5, 8, rng)
        M = core.compute_masks(tok, Tensor(rng.normal(size=(8, 50)) * 3)).M.data
        assert np.all((M > 0) & (M < 1))

    def test_token_init_scale(self):
        tok = ReceptiveTokens(200, 64, np.random.default_rng(0))
        assert abs(tok.E.data.std() - 1 / 8) < 0.01


class TestMaskedFeature:
    def test_single_full_mask(self, rng):
        F = rng.normal(size=(3, 5))
        out = core.masked_feature(MaskSet(ad.ones((1, 5))), Tensor(F), [1.0])
        np.testing.assert_array_equal(out.data, F)

    def test_zero_weights(self, rng):
        M = MaskSet(Tensor(rng.uniform(size=(2, 5))))
        out = core.masked_feature(M, Tensor(rng.normal(size=(3, 5))), [0.0, 0.0])
        np.testing.assert_array_equal(out.data, 0)

    def test_loop_oracle(self, rng):
        M, F, w = rng.uniform(size=(2, 6)), rng.normal(size=(3, 6)), rng.uniform(size=2)
        expected = np.zeros((3, 6))
        for i in range(2):
            for c in range(3):
                for p in range(6):
                    expected[c, p] += w[i] * M[i, p] * F[c, p]
        got = core.masked_feature(MaskSet(Tensor(M)), Tensor(F), Tensor(w)).data
        np.testing.assert_allclose(got, expected, atol=1e-12, rtol=0)
        unweighted = core.masked_feature(MaskSet(Tensor(M)), Tensor(F)).data
        np.testing.assert_allclose(unweighted, (M.sum(0)[None] * F), atol=1e-12, rtol=0)

    def test_weight_length_mismatch(self, rng):
        with pytest.raises(ShapeError):
            core.masked_feature(MaskSet(ad.ones((2, 4))), ad.ones((3, 4)), [1.0, 2.0, 3.0])


class TestDice:
    def test_self_similarity(self, rng):
        a = rng.uniform(size=10)
        assert core.dice(a, a).item() == pytest.approx(1.0, abs=1e-15)

    def test_disjoint(self):
        assert core.dice([1.0, 0.0], [0.0, 1.0]).item() == 0.0

    def test_two_thirds(self):
        assert core.dice([1.0, 0.0], [1.0, 1.0]).item() == pytest.approx(2 / 3, abs=1e-15)

    def test_degenerate(self):
        with pytest.raises(core.DegenerateInputError):
            core.dice([0.0, 0.0], [0.0, 0.0])

    @settings(max_examples=200)
    @given(st.integers(0, 2**31 - 1), st.integers(1, 30))
    def test_symmetric_and_bounded(self, seed, n):
        rng = np.random.default_rng(seed)
        a, b = rng.uniform(size=n), rng.uniform(size=n)
        ab, ba = core.dice(a, b).item(), core.dice(b, a).item()
        assert abs(ab - ba) <= 1e-12
        assert 0.0 <= ab <= 1.0
        assert abs(ab - oracles.dice(a, b)) <= 1e-12

    def test_gradient(self, rng):
        a = Tensor(rng.uniform(0.1, 1, size=8), requires_grad=True)
        b = Tensor(rng.uniform(0.1, 1, size=8), requires_grad=True)
        assert ad.grad_check(core.dice, [a, b]) <= 1e-5


class TestDiversity:
    @settings(max_examples=200, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.integers(1, 6), st.integers(1, 40), st.sampled_from([None, 3]))
    def test_identical_masks_give_exactly_one(self, seed, T, P, batch):
        m = np.random.default_rng(seed).uniform(size=(P,) if batch is None else (batch, 1, P))
        M = np.tile(m, (T, 1)) if batch is None else np.tile(m, (1, T, 1))
        assert core.diversity_loss(MaskSet(Tensor(M))).item() == 1.0

    def test_disjoint_pair(self):
        assert core.diversity_loss(MaskSet(Tensor([[1.0, 0.0], [0.0, 1.0]]))).item() == 0.5

    def test_single_mask(self, rng):
        assert core.diversity_loss(MaskSet(Tensor(rng.uniform(size=(1, 9))))).item() == pytest.approx(1.0)

    def test_matches_pairwise_definition(self, rng):
        M = rng.uniform(size=(4, 9))
        expected = sum(oracles.dice(M[i], M[j]) for i in range(4) for j in range(4)) / 16
        assert abs(core.diversity_loss(MaskSet(Tensor(M))).item() - expected) <= 1e-12

    def test_batched_is_mean_of_images(self, rng):
        M = rng.uniform(size=(3, 4, 9))
        per = [core.diversity_loss(MaskSet(Tensor(M[n]))).item() for n in range(3)]
        assert core.diversity_loss(MaskSet(Tensor(M))).item() == pytest.approx(np.mean(per), abs=1e-14)

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.integers(1, 6))
    def test_range_for_sigmoid_masks(self, seed, T):
        rng = np.random.default_rng(seed)
        tok = ReceptiveTokens(T, 5, rng)
        masks = core.compute_masks(tok, Tensor(rng.normal(size=(5, 12)) * 2))
        v = core.diversity_loss(masks).item()
        assert 1.0 / T - 1e-12 <= v <= 1.0 + 1e-12

    def test_gradient(self, rng):
        tok = ReceptiveTokens(3, 4, rng)
        F = Tensor(rng.normal(size=(4, 6)), requires_grad=True)
        f = lambda E, F: core.diversity_loss(core.compute_masks(tok, F))
        assert ad.grad_check(f, [tok.E, F]) <= 1e-5


class TestTokenLoss:
    def test_arithmetic(self):
        assert core.token_loss(Tensor(0.3), Tensor(0.2), 1.0).item() == pytest.approx(0.5)

    def test_mu_zero(self):
        assert core.token_loss(Tensor(0.3), Tensor(0.2), 0.0).item() == pytest.approx(0.3)

    def test_default_mu_is_one(self):
        assert core.token_loss(Tensor(0.25), Tensor(0.5)).item() == 0.75

    def test_negative_mu(self):
        with pytest.raises(ValueError):
            core.token_loss(Tensor(0.3), Tensor(0.2), -1.0)


class TestMaskWeights:
    def test_zero_head_is_uniform(self, rng):
        net = WeightingNet(4, 5, rng)
        w = core.mask_weights(net, Tensor(rng.normal(size=(4, 6, 6)))).data
        np.testing.assert_allclose(w, np.full(5, 0.2), atol=1e-15)

    def test_normalized_and_positive(self, rng):
        net = WeightingNet(4, 5, rng)
        net.head.weight.data[...] = rng.normal(size=net.head.weight.shape) * 3
        w = core.mask_weights(net, Tensor(rng.normal(size=(3, 4, 6, 6)))).data
        assert np.all(w > 0)
        np.testing.assert_allclose(w.sum(-1), 1.0, atol=1e-12)

    def test_composed_primitive_oracle(self, rng):
        net = WeightingNet(3, 4, rng)
        net.conv3.bias.data[...] = rng.normal(size=3)
        net.head.weight.data[...] = rng.normal(size=net.head.weight.shape)
        net.head.bias.data[...] = rng.normal(size=4)
        F = rng.normal(size=(3, 5, 5))
        h = np.maximum(oracles.conv2d(F, net.conv3.weight.data, net.conv3.bias.data), 0)
        pooled = h.mean(axis=(1, 2))
        logits = [net.head.bias.data[t] + sum(net.head.weight.data[t, c, 0, 0] * pooled[c] for c in range(3))
                  for t in range(4)]
        expected = oracles.softmax(logits)
        np.testing.assert_allclose(core.mask_weights(net, Tensor(F)).data, expected, atol=1e-10, rtol=0)

    def test_channel_mismatch(self, rng):
        with pytest.raises(ShapeError):
            core.mask_weights(WeightingNet(4, 2, rng), ad.zeros((3, 5, 5)))

    def test_gradient(self, rng):
        net = WeightingNet(3, 4, rng)
        net.head.weight.data[...] = rng.normal(size=net.head.weight.shape)
        F = Tensor(rng.normal(size=(2, 3, 4, 4)), requires_grad=True)
        r = Tensor(rng.normal(size=(2, 4)))
        assert ad.grad_check(lambda F, *p: ad.reduce(core.mask_weights(net, F) * r), [F] + net.parameters()) <= 1e-5


class TestMimicAndRegion:
    def test_mimic_zero_when_matched(self, rng):
        Fs = rng.normal(size=(2, 3, 3))
        phi = Projector(2, 2, rng)
        phi.proj.weight.data[...] = np.eye(2)[:, :, None, None]
        assert core.mimic_loss(Tensor(Fs), Tensor(Fs), phi).item() == 0.0

    def test_mimic_scalar_case(self, rng):
        phi = Projector(1, 1, rng)
        phi.proj.weight.data[...] = 0.0
        assert core.mimic_loss(Tensor([[[2.0]]]), Tensor([[[5.0]]]), phi).item() == 4.0

    def test_mimic_loop_oracle(self, rng):
        tokens, Ft, Fs, phi, _ = random_setup(rng)
        expected = oracles.mimic(Ft.data, proj_np(phi, Fs.data))
        assert abs(core.mimic_loss(Ft, Fs, phi).item() - expected) <= 1e-10

    def test_mimic_spatial_mismatch(self, rng):
        with pytest.raises(ShapeError, match="spatial"):
            core.mimic_loss(ad.zeros((4, 3, 3)), ad.zeros((2, 3, 4)), Projector(2, 4, rng))

    def test_region_with_full_mask_differs_from_mimic_by_epsilon_only(self, rng):
        _, Ft, Fs, phi, _ = random_setup(rng)
        M = MaskSet(ad.ones((1, 9)))
        mimic = core.mimic_loss(Ft, Fs, phi).item()
        expected = mimic * 9 / (9 + core.MASK_EPS)
        assert abs(core.region_loss(M, Ft, Fs, phi).item() - expected) <= 1e-14

    def test_region_reduces_to_mimic_at_default_map_size(self, rng):
        _, Ft, Fs, phi, _ = random_setup(rng, H=64, W=64)
        M = MaskSet(ad.ones((1, 64 * 64)))
        assert abs(core.region_loss(M, Ft, Fs, phi).item() - core.mimic_loss(Ft, Fs, phi).item()) <= 1e-9

    def test_region_zero_when_matched(self, rng):
        Fs = rng.normal(size=(2, 3, 3))
        phi = Projector(2, 2, rng)
        phi.proj.weight.data[...] = np.eye(2)[:, :, None, None]
        M = MaskSet(Tensor(rng.uniform(size=(3, 9))))
        assert core.region_loss(M, Tensor(Fs), Tensor(Fs), phi).item() == 0.0

    def test_region_loop_oracle(self, rng):
        tokens, Ft, Fs, phi, _ = random_setup(rng)
        M = rng.uniform(size=(3, 9))
        expected = oracles.region(M, Ft.data, proj_np(phi, Fs.data))
        assert abs(core.region_loss(MaskSet(Tensor(M)), Ft, Fs, phi).item() - expected) <= 1e-10

    def test_region_empty_mask_is_finite(self, rng):
        _, Ft, Fs, phi, _ = random_setup(rng)
        M = np.zeros((2, 9))
        M[0] = 1.0
        v = core.region_loss(MaskSet(Tensor(M)), Ft, Fs, phi).item()
        assert np.isfinite(v)


class TestWeightedLoss:
    def test_reduces_to_mimic(self, rng):
        _, Ft, Fs, phi, _ = random_setup(rng, H=64, W=64)
        got = core.weighted_maskd_loss(MaskSet(ad.ones((1, 64 * 64))), [1.0], Ft, Fs, phi).item()
        assert abs(got - core.mimic_loss(Ft, Fs, phi).item()) <= 1e-9

    def test_zero_weights(self, rng):
        _, Ft, Fs, phi, _ = random_setup(rng)
        M = MaskSet(Tensor(rng.uniform(size=(3, 9))))
        assert core.weighted_maskd_loss(M, [0.0, 0.0, 0.0], Ft, Fs, phi).item() == 0.0

    def test_loop_oracle(self, rng):
        _, Ft, Fs, phi, _ = random_setup(rng)
        M, w = rng.uniform(size=(3, 9)), rng.uniform(size=3)
        expected = oracles.weighted_region(M, w, Ft.data, proj_np(phi, Fs.data))
        got = core.weighted_maskd_loss(MaskSet(Tensor(M)), Tensor(w), Ft, Fs, phi).item()
        assert abs(got - expected) <= 1e-10

    def test_length_mismatch(self, rng):
        _, Ft, Fs, phi, _ = random_setup(rng)
        with pytest.raises(ShapeError):
            core.weighted_maskd_loss(MaskSet(ad.ones((3, 9))), [1.0, 1.0], Ft, Fs, phi)

    def test_batched_is_mean(self, rng):
        _, Ft, Fs, phi, _ = random_setup(rng, batch=3)
        M, w = rng.uniform(size=(3, 3, 9)), rng.uniform(size=(3, 3))
        per = [oracles.weighted_region(M[n], w[n], Ft.data[n], proj_np(phi, Fs.data[n])) for n in range(3)]
        got = core.weighted_maskd_loss(MaskSet(Tensor(M)), Tensor(w), Ft, Fs, phi).item()
        assert abs(got - np.mean(per)) <= 1e-10


class TestCustomize:
    def test_matched_student_squares_masks(self, rng):
        tokens, Ft, _, _, _ = random_setup(rng)
        Ftf = core.flatten_spatial(Ft)
        Mt = core.compute_masks(tokens, Ftf)
        Mr = core.customize_masks(tokens, Ftf, Mt)
        assert Mr.origin == "customized"
        np.testing.assert_allclose(Mr.M.data, Mt.M.data ** 2, atol=1e-15)

    def test_zero_tokens(self, rng):
        tokens = ReceptiveTokens(2, 3, E=np.zeros((2, 3)))
        Mt = MaskSet(Tensor(rng.uniform(size=(2, 5))))
        Mr = core.customize_masks(tokens, Tensor(rng.normal(size=(3, 5))), Mt)
        np.testing.assert_allclose(Mr.M.data, 0.5 * Mt.M.data, atol=1e-15)

    def test_composed_oracle(self, rng):
        tokens, Ft, Fs, phi, _ = random_setup(rng)
        P = proj_np(phi, Fs.data).reshape(4, 9)
        Mt = oracles.masks(tokens.E.data, Ft.data.reshape(4, 9))
        expected = oracles.masks(tokens.E.data, P) * Mt
        got = core.customize_masks(tokens, Tensor(P), MaskSet(Tensor(Mt))).M.data
        np.testing.assert_allclose(got, expected, atol=1e-12, rtol=0)

    def test_origin_checked(self, rng):
        tokens = ReceptiveTokens(2, 3, rng)
        with pytest.raises(ValueError, match="origin"):
            core.customize_masks(tokens, ad.zeros((3, 4)), MaskSet(ad.ones((2, 4)), "student"))

    def test_no_gradient_through_student_mask(self, rng):
        tokens = ReceptiveTokens(2, 3, rng)
        P = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        Mr = core.customize_masks(tokens, P, MaskSet(Tensor(rng.uniform(size=(2, 4)))))
        assert not Mr.M.requires_grad


class TestMaskdLoss:
    def test_without_customization_is_weighted_loss(self, rng):
        tokens, Ft, Fs, phi, weighting = random_setup(rng, batch=2)
        M = core.compute_masks(tokens, core.flatten_spatial(Ft))
        w = core.mask_weights(weighting, Ft)
        expected = core.weighted_maskd_loss(M, w, Ft, Fs, phi).item()
        assert core.maskd_loss(tokens, Ft, Fs, phi, weighting, customize=False).item() == expected

    def test_zero_when_student_matches(self, rng):
        tokens, Ft, _, _, weighting = random_setup(rng)
        phi = Projector(4, 4, rng)
        phi.proj.weight.data[...] = np.eye(4)[:, :, None, None]
        assert core.maskd_loss(tokens, Ft, Ft, phi, weighting, customize=True).item() == 0.0

    def test_composed_oracle(self, rng):
        tokens, Ft, Fs, phi, weighting = random_setup(rng)
        P = proj_np(phi, Fs.data)
        Mt = oracles.masks(tokens.E.data, Ft.data.reshape(4, 9))
        Mr = oracles.masks(tokens.E.data, P.reshape(4, 9)) * Mt
        w = core.mask_weights(weighting, Ft).data
        expected = oracles.weighted_region(Mr, w, Ft.data, P)
        assert abs(core.maskd_loss(tokens, Ft, Fs, phi, weighting, True).item() - expected) <= 1e-10

    def test_gradients_reach_only_student_side(self, rng):
        tokens, Ft, Fs, phi, weighting = random_setup(rng, batch=2)
        Ft.requires_grad = True
        ad.backward(core.maskd_loss(tokens, Ft, Fs, phi, weighting, customize=True))
        assert Ft.grad is None and tokens.E.grad is None
        assert all(p.grad is None for p in weighting.parameters())
        assert Fs.grad is not None and phi.proj.weight.grad is not None

    def test_gradcheck_without_customization(self, rng):
        tokens, Ft, Fs, phi, weighting = random_setup(rng, batch=2)
        f = lambda Fs, *p: core.maskd_loss(tokens, Ft, Fs, phi, weighting, customize=False)
        assert ad.grad_check(f, [Fs] + phi.parameters()) <= 1e-5

    def test_gradcheck_customized_with_student_mask_held(self, rng):
        # the student mask is a stop-gradient constant, so the reference freezes it at the evaluation point
        tokens, Ft, Fs, phi, weighting = random_setup(rng, batch=2)
        with ad.no_grad():
            Mt = core.compute_masks(tokens, core.flatten_spatial(Ft))
            Mr = core.customize_masks(tokens, phi(Fs), Mt)
            w = core.mask_weights(weighting, Ft)
        analytic_vs_frozen = ad.grad_check(lambda Fs, *p: core.weighted_maskd_loss(Mr, w, Ft, Fs, phi),
                                           [Fs] + phi.parameters())
        assert analytic_vs_frozen <= 1e-5
        Fs.grad = None
        ad.backward(core.maskd_loss(tokens, Ft, Fs, phi, weighting, True))
        full = Fs.grad.copy()
        Fs.grad = None
        for p in phi.parameters():
            p.grad = None
        ad.backward(core.weighted_maskd_loss(Mr, w, Ft, Fs, phi))
        np.testing.assert_allclose(full, Fs.grad, rtol=1e-12, atol=1e-15)

    def test_multi_stage_sums(self, rng):
        a = random_setup(rng)
        b = random_setup(rng)
        total = core.multi_stage_maskd_loss([a, b]).item()
        assert total == pytest.approx(core.maskd_loss(*a).item() + core.maskd_loss(*b).item(), abs=1e-14)


class TestStudentTotal:
    def test_arithmetic(self):
        assert core.student_total_loss(Tensor(1.0), Tensor(2.0), None, 0.5, 1.0).item() == 2.0

    def test_with_aux(self):
        assert core.student_total_loss(Tensor(1.0), Tensor(2.0), Tensor(3.0), 1.0, 1.0).item() == 6.0

    def test_negative_factor(self):
        with pytest.raises(ValueError):
            core.student_total_loss(Tensor(1.0), Tensor(2.0), None, -1.0)
