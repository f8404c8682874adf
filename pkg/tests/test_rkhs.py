"""Trainable-kernel MMD machinery against brute-force oracles.

The oracle below expands the off-diagonal estimator term by term with
explicit double loops so the vectorized Gram-matrix path cannot share a
mistake with it.
"""

from __future__ import annotations

import math
import warnings

import numpy as np
import pytest

from deskpose import (
    DomainError,
    FitDivergenceError,
    KernelWeights,
    LinearKernel,
    RbfKernel,
    fit_kernel_weights,
    kernel_linear_trainable,
    kernel_rbf_trainable,
    kl_divergence_gaussianized,
    lift_features,
    mmd_biased,
    mmd_grad_weights,
    mmd_offdiag,
    mmd_unbiased,
    wasserstein_1d_sliced,
)


def offdiag_oracle(sr, r, kfun, scaling="m2") -> float:
    """Summation-by-definition reference for the off-diagonal estimator."""
    m = len(sr)
    s = 0.0
    for i in range(m):
        for j in range(m):
            if i != j:
                s += kfun(sr[i], sr[j]) - kfun(sr[i], r[j]) + kfun(r[i], r[j])
    denom = m * m if scaling == "m2" else m
    return math.sqrt(max(s / denom, 0.0))


class TestLinearKernel:
    def test_identity_weights_plain_dot(self):
        w = KernelWeights.identity(2)
        assert kernel_linear_trainable(np.array([1.0, 0.0]),
                                       np.array([1.0, 0.0]), w) == 1.0
        assert kernel_linear_trainable(np.array([1.0, 0.0]),
                                       np.array([0.0, 1.0]), w) == 0.0

    def test_bilinear_in_weights(self):
        w = KernelWeights(2.0 * np.eye(3), 3.0 * np.eye(3))
        x = np.array([1.0, 2.0, 0.0])
        y = np.array([1.0, 2.0, 0.0])  # x . y = 5
        assert kernel_linear_trainable(x, y, w) == pytest.approx(30.0)

    def test_dimension_mismatch_rejected(self):
        with pytest.raises(DomainError):
            kernel_linear_trainable(np.zeros(2), np.zeros(3),
                                    KernelWeights.identity(2))

    def test_matches_plain_inner_product_exactly(self):
        rng = np.random.default_rng(0)
        w = KernelWeights.identity(5)
        for _ in range(20):
            x, y = rng.standard_normal(5), rng.standard_normal(5)
            assert kernel_linear_trainable(x, y, w) == float(x @ y)


class TestRbfKernel:
    def test_coincident_points(self):
        assert kernel_rbf_trainable(np.ones(3), np.ones(3), 1.0) == 1.0

    def test_analytic_half_value(self):
        x = np.zeros(1)
        y = np.array([math.sqrt(math.log(2.0))])
        assert kernel_rbf_trainable(x, y, 1.0) == pytest.approx(0.5, abs=1e-12)

    def test_monotone_decreasing_in_distance(self):
        rng = np.random.default_rng(1)
        pairs = sorted((float(np.linalg.norm(a - b)),
                        kernel_rbf_trainable(a, b, 0.7))
                       for a, b in rng.standard_normal((100, 2, 4)))
        values = [v for _, v in pairs]
        assert all(values[i + 1] <= values[i] + 1e-15
                   for i in range(len(values) - 1))

    def test_non_positive_width_rejected(self):
        with pytest.raises(DomainError):
            kernel_rbf_trainable(np.zeros(2), np.ones(2), 0.0)


class TestOffdiagEstimator:
    def test_equal_batches_leave_one_offdiag_sum(self):
        # with sr = r the cross terms cancel one within-batch sum, leaving
        # sqrt(sum_{i != j} <x_i, x_j>) / m when that sum is non-negative
        rng = np.random.default_rng(2)
        x = rng.standard_normal((6, 3)) + 0.5
        kern = LinearKernel(KernelWeights.identity(3))
        rep = mmd_offdiag(x, x, kern)
        s = sum(float(x[i] @ x[j]) for i in range(6) for j in range(6) if i != j)
        assert rep.value == pytest.approx(math.sqrt(max(s, 0.0)) / 6, abs=1e-12)

    def test_all_zero_batches(self):
        z = np.zeros((2, 1))
        rep = mmd_offdiag(z, z, LinearKernel(KernelWeights.identity(1)))
        assert rep.value == 0.0

    def test_matches_double_loop_oracle(self):
        rng = np.random.default_rng(3)
        w = KernelWeights.identity(4)
        kern = LinearKernel(w)
        for _ in range(20):
            sr = rng.standard_normal((7, 4))
            r = rng.standard_normal((7, 4)) + 0.3
            got = mmd_offdiag(sr, r, kern).value
            want = offdiag_oracle(sr, r, lambda a, b: float(a @ b))
            assert abs(got - want) < 1e-10

    def test_rbf_kernel_also_matches_oracle(self):
        rng = np.random.default_rng(4)
        kern = RbfKernel(0.8)
        sr = rng.standard_normal((6, 3))
        r = rng.standard_normal((6, 3)) + 1.0
        want = offdiag_oracle(sr, r, lambda a, b: math.exp(-0.8 * float(np.sum((a - b) ** 2))))
        assert abs(mmd_offdiag(sr, r, kern).value - want) < 1e-10

    def test_alternative_scaling_flag(self):
        rng = np.random.default_rng(5)
        sr = rng.standard_normal((5, 2))
        r = rng.standard_normal((5, 2)) + 1.0
        kern = LinearKernel(KernelWeights.identity(2))
        got = mmd_offdiag(sr, r, kern, scaling="m").value
        want = offdiag_oracle(sr, r, lambda a, b: float(a @ b), scaling="m")
        assert abs(got - want) < 1e-10

    def test_clamp_flag_set_on_negative_bracket(self):
        # antipodal batches: every off-diagonal within-batch product is -1,
        # so the bracketed sum is negative and the report clamps and says so
        sr = np.array([[1.0], [-1.0]])
        r = np.array([[1.0], [-1.0]])
        rep = mmd_offdiag(sr, r, LinearKernel(KernelWeights.identity(1)))
        assert rep.clamped
        assert rep.value == 0.0

    def test_unequal_sizes_rejected(self):
        kern = LinearKernel(KernelWeights.identity(2))
        with pytest.raises(DomainError):
            mmd_offdiag(np.zeros((3, 2)), np.zeros((4, 2)), kern)

    def test_swap_symmetric_under_shared_weights(self):
        rng = np.random.default_rng(6)
        sr = rng.standard_normal((8, 3))
        r = rng.standard_normal((8, 3)) + 0.5
        kern = LinearKernel(KernelWeights.identity(3))
        assert mmd_offdiag(sr, r, kern).value == pytest.approx(
            mmd_offdiag(r, sr, kern).value, abs=1e-12)


class TestTextbookEstimators:
    def test_biased_zero_on_identical_batches(self):
        rng = np.random.default_rng(7)
        x = rng.standard_normal((9, 4))
        for kern in (LinearKernel(KernelWeights.identity(4)), RbfKernel(1.0)):
            rep = mmd_biased(x, x, kern)
            assert rep.value == 0.0

    def test_biased_point_masses_closed_form(self):
        # constant batches at 0 and 1 with an RBF kernel: the population MMD
        # sqrt(2 - 2 e^{-1}) is exact at any sample size
        sr = np.zeros((4, 1))
        r = np.ones((4, 1))
        rep = mmd_biased(sr, r, RbfKernel(1.0))
        assert rep.value == pytest.approx(math.sqrt(2 - 2 * math.exp(-1)), abs=1e-9)

    def test_unbiased_statistic_centers_near_zero(self):
        # same-distribution batches: the U-statistic straddles zero, so the
        # clamped square root stays small and the clamp fires often
        rng = np.random.default_rng(8)
        kern = LinearKernel(KernelWeights.identity(3))
        values, clamped = [], 0
        for _ in range(300):
            x = rng.standard_normal((50, 3))
            y = rng.standard_normal((50, 3))
            rep = mmd_unbiased(x, y, kern)
            values.append(rep.value)
            clamped += rep.clamped
        assert np.mean(values) < 0.2
        assert 0.2 < clamped / 300 < 0.9


class TestGradients:
    def test_matches_central_finite_differences(self):
        rng = np.random.default_rng(9)
        h = 1e-5
        for _ in range(10):
            # strong mean separation keeps the pre-sqrt value positive, where
            # the gradient of the square root is defined
            sr = rng.standard_normal((5, 4)) + 1.0
            r = rng.standard_normal((5, 4)) - 1.0
            w = KernelWeights(np.eye(4) + 0.1 * rng.standard_normal((4, 4)),
                              np.eye(4) + 0.1 * rng.standard_normal((4, 4)))
            grad = mmd_grad_weights(sr, r, w)
            assert grad.defined

            def value(wx, wy):
                return mmd_offdiag(sr, r, LinearKernel(KernelWeights(wx, wy))).value

            for a in range(4):
                for b in range(4):
                    e = np.zeros((4, 4))
                    e[a, b] = h
                    fd = (value(w.w_x + e, w.w_y) - value(w.w_x - e, w.w_y)) / (2 * h)
                    denom = max(abs(fd), abs(grad.d_wx[a, b]), 1e-8)
                    assert abs(grad.d_wx[a, b] - fd) / denom < 1e-5
                    fd = (value(w.w_x, w.w_y + e) - value(w.w_x, w.w_y - e)) / (2 * h)
                    denom = max(abs(fd), abs(grad.d_wy[a, b]), 1e-8)
                    assert abs(grad.d_wy[a, b] - fd) / denom < 1e-5

    def test_zero_batches_zero_gradient(self):
        z = np.zeros((3, 2))
        grad = mmd_grad_weights(z, z, KernelWeights.identity(2))
        assert not grad.defined  # clamped value, gradient flagged undefined
        assert not grad.d_wx.any()
        assert not grad.d_wy.any()

    def test_homogeneity_of_the_linear_kernel(self):
        rng = np.random.default_rng(10)
        sr = rng.standard_normal((6, 3)) + 1.0
        r = rng.standard_normal((6, 3)) + 0.5
        kern = LinearKernel(KernelWeights.identity(3))
        v1 = mmd_offdiag(sr, r, kern)
        v2 = mmd_offdiag(2 * sr, 2 * r, kern)
        if not v1.clamped:
            assert v2.value == pytest.approx(2 * v1.value, rel=1e-12)


class TestFitKernelWeights:
    def _shifted_pairs(self, rng, n_pairs=3, m=16, d=4):
        a = np.eye(d) + 0.3 * rng.standard_normal((d, d))
        out = []
        for _ in range(n_pairs):
            sr = rng.standard_normal((m, d)) + 1.0
            out.append((sr, sr @ a.T))
        return out

    def test_zero_epochs_returns_identity_weights(self):
        rng = np.random.default_rng(11)
        res = fit_kernel_weights(self._shifted_pairs(rng), lr=0.01, epochs=0)
        assert np.array_equal(res.weights.w_x, np.eye(4))
        assert np.array_equal(res.weights.w_y, np.eye(4))
        assert len(res.trace) == 1

    def test_linear_map_gap_halved_within_200_epochs(self):
        rng = np.random.default_rng(5)
        res = fit_kernel_weights(self._shifted_pairs(rng), lr=0.01, epochs=200)
        assert res.trace[0] > 0
        assert res.trace[-1] < 0.5 * res.trace[0]

    def test_identical_distributions_stay_near_initial(self):
        rng = np.random.default_rng(12)
        pairs = []
        for _ in range(3):
            base = rng.standard_normal((24, 3)) + 0.5
            pairs.append((base, base[rng.permutation(24)]))
        res = fit_kernel_weights(pairs, lr=1e-3, epochs=50)
        assert res.trace[-1] <= res.trace[0] + 0.05

    def test_unequal_batches_truncated_with_warning(self):
        rng = np.random.default_rng(13)
        pair = (rng.standard_normal((6, 2)), rng.standard_normal((9, 2)))
        with pytest.warns(UserWarning, match="truncat"):
            fit_kernel_weights([pair], lr=0.01, epochs=0)

    def test_divergence_raises_with_trace(self):
        rng = np.random.default_rng(14)
        sr = rng.standard_normal((8, 3)) + 2.0
        r = rng.standard_normal((8, 3)) - 2.0
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            with pytest.raises(FitDivergenceError) as exc:
                fit_kernel_weights([(sr, r)], lr=1e300, epochs=5,
                                   objective="maximize")
        assert len(exc.value.trace) >= 1

    def test_parameter_validation(self):
        rng = np.random.default_rng(15)
        pair = (rng.standard_normal((4, 2)), rng.standard_normal((4, 2)))
        with pytest.raises(DomainError):
            fit_kernel_weights([], lr=0.01, epochs=1)
        with pytest.raises(DomainError):
            fit_kernel_weights([pair], lr=0.0, epochs=1)
        with pytest.raises(DomainError):
            fit_kernel_weights([pair], lr=0.01, epochs=1, objective="sideways")


class TestAuxiliaryDivergences:
    def test_identical_batches_give_zero(self):
        rng = np.random.default_rng(16)
        x = rng.standard_normal((40, 3))
        assert kl_divergence_gaussianized(x, x) == pytest.approx(0.0, abs=1e-9)
        assert wasserstein_1d_sliced(x, x, seed=0) == pytest.approx(0.0, abs=1e-9)

    def test_kl_of_shifted_unit_gaussians(self):
        rng = np.random.default_rng(17)
        mu = 0.7
        a = rng.standard_normal((10000, 1))
        b = rng.standard_normal((10000, 1)) + mu
        assert kl_divergence_gaussianized(a, b) == pytest.approx(mu * mu / 2, abs=0.02)

    def test_sliced_wasserstein_of_point_masses(self):
        c = 0.37
        sw = wasserstein_1d_sliced(np.zeros((5, 1)), np.full((5, 1), c),
                                   n_projections=16, seed=0)
        assert sw == pytest.approx(c, abs=1e-9)

    def test_sliced_wasserstein_deterministic_per_seed(self):
        rng = np.random.default_rng(18)
        a = rng.standard_normal((30, 4))
        b = rng.standard_normal((30, 4)) + 0.3
        assert wasserstein_1d_sliced(a, b, seed=5) == wasserstein_1d_sliced(a, b, seed=5)


class TestLiftFeatures:
    def test_shape_and_determinism(self):
        rng = np.random.default_rng(19)
        x = rng.standard_normal((10, 3))
        a = lift_features(x, factor=4, seed=7)
        b = lift_features(x, factor=4, seed=7)
        assert a.shape == (10, 12)
        assert np.array_equal(a, b)

    def test_linear_in_input(self):
        rng = np.random.default_rng(20)
        x = rng.standard_normal((6, 3))
        y = rng.standard_normal((6, 3))
        lx = lift_features(x, seed=0) + lift_features(y, seed=0)
        both = lift_features(x + y, seed=0)
        assert np.allclose(lx, both, atol=1e-12)
