import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import random_spd
from fls_lab.fisher import (
    GradientBatch,
    SpectralFisher,
    empirical_fvp,
    exact_masked_inverse,
    fisher_vector_product,
    make_linear_task,
    make_spectral_fisher,
    parse_spectrum,
    sample_gradient_batch,
    spectrum_values,
)


class TestSpectrum:
    def test_parse_forms(self):
        assert parse_spectrum("power:2") == ("power", 2.0)
        assert parse_spectrum("exp:30") == ("exp", 30.0)
        assert parse_spectrum("list:[1, 0.5]") == ("list", [1, 0.5])
        assert parse_spectrum([2, 1]) == ("list", [2.0, 1.0])

    @pytest.mark.parametrize("bad", ["power:-1", "exp:0", "cubic:3", "power"])
    def test_parse_rejects(self, bad):
        with pytest.raises(ValueError):
            parse_spectrum(bad)

    def test_power_values(self):
        np.testing.assert_allclose(spectrum_values(4, "power:2"), [1, 1 / 4, 1 / 9, 1 / 16])

    def test_exp_values(self):
        np.testing.assert_allclose(spectrum_values(3, "exp:2"), [1, np.exp(-0.5), np.exp(-1.0)])

    def test_negative_list_rejected(self):
        with pytest.raises(ValueError, match="PSD"):
            spectrum_values(2, [1.0, -0.1])

    def test_list_length_checked(self):
        with pytest.raises(ValueError):
            spectrum_values(3, [1.0, 1.0])


class TestSpectralFisher:
    @given(n=st.integers(1, 30), seed=st.integers(0, 2**31))
    def test_basis_orthonormal_and_spd(self, n, seed):
        F = make_spectral_fisher(n, "power:1", 1e-3, seed)
        assert np.max(np.abs(F.basis.T @ F.basis - np.eye(n))) <= 1e-10
        assert np.all(np.diff(F.eigenvalues) <= 0)
        D = F.damped()
        np.testing.assert_allclose(D, D.T, atol=1e-14)
        assert np.linalg.eigvalsh(D)[0] >= 1e-3 * (1 - 1e-8)

    def test_seed_determinism(self):
        a = make_spectral_fisher(10, "exp:3", 0.01, 7)
        b = make_spectral_fisher(10, "exp:3", 0.01, 7)
        assert np.array_equal(a.basis, b.basis)

    def test_fig1_target_range(self):
        F = make_spectral_fisher(100, "power:2", 1e-3, 0)
        target = 1.0 / F.damped_eigenvalues
        # 1/(1+1e-3) and 1/(1e-4+1e-3), evaluated by hand
        assert target.min() == pytest.approx(0.999000999000999, rel=1e-12)
        assert target.max() == pytest.approx(909.090909090909, rel=1e-12)

    def test_exp30_target_range(self):
        F = make_spectral_fisher(100, "exp:30", 0.01, 0)
        target = 1.0 / F.damped_eigenvalues
        assert target.min() == pytest.approx(0.9900990099009901, rel=1e-12)
        # largest is 1/(exp(-99/30) + 0.01)
        assert target.max() == pytest.approx(21.329616905822597, rel=1e-12)

    def test_identity_spectrum(self):
        F = make_spectral_fisher(3, [1, 1, 1], 0.0, 99)
        np.testing.assert_allclose(F.matrix(), np.eye(3), atol=1e-12)

    def test_immutable(self):
        F = make_spectral_fisher(4, "exp:2", 0.1, 0)
        with pytest.raises(ValueError):
            F.basis[0, 0] = 1.0

    def test_inverse_damped(self):
        F = make_spectral_fisher(6, "exp:2", 0.1, 1)
        np.testing.assert_allclose(F.inverse_damped() @ F.damped(), np.eye(6), atol=1e-12)

    def test_sqrt_factor(self):
        F = make_spectral_fisher(6, "exp:2", 0.1, 1)
        S = F.sqrt_factor()
        np.testing.assert_allclose(S @ S.T, F.matrix(), atol=1e-13)

    def test_rejects_unsorted(self):
        with pytest.raises(ValueError):
            SpectralFisher(np.eye(2), np.array([0.5, 1.0]), 0.0)


class TestFvp:
    def test_identity(self, rng):
        F = SpectralFisher(np.eye(4), np.ones(4), 0.0)
        v = rng.standard_normal(4)
        np.testing.assert_allclose(fisher_vector_product(F, v), v)

    def test_eigenvector(self):
        F = make_spectral_fisher(5, "exp:2", 0.1, 3)
        u = F.basis[:, 2]
        np.testing.assert_allclose(F.fvp(u), (F.eigenvalues[2] + 0.1) * u, atol=1e-13)

    def test_dense_oracle(self, rng):
        F = make_spectral_fisher(5, "power:1", 0.05, 4)
        v = rng.standard_normal(5)
        np.testing.assert_allclose(F.fvp(v), (F.matrix() + 0.05 * np.eye(5)) @ v, atol=1e-12)

    def test_stack(self, rng):
        F = make_spectral_fisher(5, "power:1", 0.05, 4)
        V = rng.standard_normal((3, 5))
        np.testing.assert_allclose(F.fvp(V), V @ F.damped(), atol=1e-12)

    def test_dimension_mismatch(self):
        F = make_spectral_fisher(5, "power:1", 0.05, 4)
        with pytest.raises(ValueError):
            F.fvp(np.ones(4))


class TestLinearTask:
    def test_fisher_is_covariance(self):
        task = make_linear_task(8, "exp:3", 0.01, seed=2)
        np.testing.assert_allclose(task.sigma_x(), task.fisher.matrix())
        w = np.linalg.eigvalsh(task.sigma_x())
        assert w[0] > -1e-10

    def test_true_weights_give_noise_floor(self):
        task = make_linear_task(20, seed=1, noise=0.1)
        assert task.test_mse(task.weights) == pytest.approx(0.01, rel=0.2)
        assert task.quadratic_loss(task.weights) == 0.0


class TestGradientBatch:
    def test_bit_identical(self):
        task = make_linear_task(6, seed=0)
        a = sample_gradient_batch(task, 11, m=32)
        b = sample_gradient_batch(task, 11, m=32)
        assert a.grads.tobytes() == b.grads.tobytes()

    def test_isotropic_limit(self):
        F = SpectralFisher(np.eye(3), np.ones(3), 0.0)
        G = sample_gradient_batch(F, 0, m=200_000)
        np.testing.assert_allclose(G.fisher_estimate(), np.eye(3), atol=0.02)

    def test_diagonal_monte_carlo(self):
        # each entry of diag((1/m) G^T G) has variance (E[g^4] - s^2)/m = 8 s^2/m for g = x eps
        s = np.array([1.0, 0.5, 0.25, 0.125])
        F = SpectralFisher(np.eye(4), s, 0.0)
        m = 100_000
        est = np.diag(sample_gradient_batch(F, 5, m=m).fisher_estimate())
        se = np.sqrt(8 * s**2 / m)
        assert np.all(np.abs(est - s) < 3 * se)

    def test_mask_zeroes_columns(self):
        task = make_linear_task(6, seed=0)
        mask = np.array([1, 0, 1, 1, 0, 1], bool)
        G = sample_gradient_batch(task, 3, m=10, mask=mask).grads
        assert np.all(G[:, ~mask] == 0)


class TestEmpiricalFvp:
    def test_zero_grads(self, rng):
        v = rng.standard_normal(4)
        np.testing.assert_allclose(empirical_fvp(GradientBatch(np.zeros((3, 4)), 0.2), v), 0.2 * v)

    def test_rank_one(self, rng):
        g = rng.standard_normal(4)
        v = rng.standard_normal(4)
        out = empirical_fvp(GradientBatch(g[None], 0.3), v)
        np.testing.assert_allclose(out, g * (g @ v) + 0.3 * v, atol=1e-12)

    def test_dense_oracle(self, rng):
        G = rng.standard_normal((7, 5))
        v = rng.standard_normal(5)
        dense = (G.T @ G / 7 + 0.1 * np.eye(5)) @ v
        np.testing.assert_allclose(empirical_fvp(GradientBatch(G, 0.1), v), dense, atol=1e-12)


class TestExactMaskedInverse:
    def test_identity(self):
        F = SpectralFisher(np.eye(3), np.ones(3), 0.0)
        np.testing.assert_allclose(exact_masked_inverse(F, np.ones(3, bool)), np.eye(3))

    def test_single_survivor(self):
        out = exact_masked_inverse(np.diag([2.0, 3.0]), np.array([True, False]))
        np.testing.assert_array_equal(out, [[0.5, 0.0], [0.0, 0.0]])

    def test_submatrix_oracle(self, rng):
        A = random_spd(rng, 6)
        mask = np.array([1, 0, 1, 1, 0, 1], bool)
        out = exact_masked_inverse(A, mask)
        keep = np.flatnonzero(mask)
        np.testing.assert_allclose(out[np.ix_(keep, keep)], np.linalg.inv(A[np.ix_(keep, keep)]), atol=1e-10)
        assert np.all(out[~mask] == 0) and np.all(out[:, ~mask] == 0)

    def test_empty_mask(self):
        with pytest.raises(ValueError):
            exact_masked_inverse(np.eye(2), np.zeros(2, bool))
