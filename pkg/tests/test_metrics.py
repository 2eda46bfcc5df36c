import numpy as np
import pytest
import scipy.linalg
from hypothesis import given
from hypothesis import strategies as st

from conftest import random_spd
from fls_lab.fisher import exact_masked_inverse, make_spectral_fisher
from fls_lab.metrics import (
    MetricSample,
    masked_riemannian_distance,
    normalized_action_error,
    normalized_action_error_exact,
    riemannian_distance,
)
from fls_lab.qparam import DenseOperator


class TestRiemannian:
    def test_self_distance(self, rng):
        A = random_spd(rng, 5)
        assert riemannian_distance(A, A) == pytest.approx(0.0, abs=1e-12)

    @given(n=st.integers(1, 10), c=st.floats(0.01, 100))
    def test_scaled_identity(self, n, c):
        assert riemannian_distance(np.eye(n), c * np.eye(n)) == pytest.approx(np.sqrt(n) * abs(np.log(c)), abs=1e-10)

    def test_generalized_eigen_oracle(self, rng):
        A, B = random_spd(rng, 5), random_spd(rng, 5)
        lam = scipy.linalg.eigh(B, A, eigvals_only=True)
        assert riemannian_distance(A, B) == pytest.approx(np.sqrt(np.sum(np.log(lam) ** 2)), abs=1e-9)

    @given(seed=st.integers(0, 10_000))
    def test_symmetric_and_invariant(self, seed):
        rng = np.random.default_rng(seed)
        A, B = random_spd(rng, 4), random_spd(rng, 4)
        X = rng.standard_normal((4, 4)) + 3 * np.eye(4)
        d = riemannian_distance(A, B)
        assert riemannian_distance(B, A) == pytest.approx(d, rel=1e-8, abs=1e-10)
        assert riemannian_distance(X @ A @ X.T, X @ B @ X.T) == pytest.approx(d, rel=1e-6, abs=1e-8)

    def test_rejects_indefinite(self):
        with pytest.raises(ValueError):
            riemannian_distance(np.eye(2), np.diag([1.0, -1.0]))

    def test_accepts_operator(self, rng):
        A = random_spd(rng, 3)
        assert riemannian_distance(DenseOperator(A), A) == pytest.approx(0.0, abs=1e-12)


class TestActionError:
    F = make_spectral_fisher(10, "exp:3", 0.05, 0)

    def test_exact_inverse(self):
        assert normalized_action_error(self.F.inverse_damped(), self.F) == pytest.approx(0.0, abs=1e-20)

    def test_zero(self):
        assert normalized_action_error(np.zeros((10, 10)), self.F) == pytest.approx(1.0)

    def test_closed_form_oracle(self):
        # diagonal truncation of the target, u ~ N(0, F^-1)
        Finv = self.F.inverse_damped()
        Q = np.diag(np.diag(Finv))
        exact = normalized_action_error_exact(Q, self.F, Finv)
        vals = [normalized_action_error(Q, self.F, Finv, samples=512, seed=s) for s in range(40)]
        se = np.std(vals, ddof=1) / np.sqrt(len(vals))
        assert abs(np.mean(vals) - exact) < 3 * se + 1e-3 * exact

    def test_closed_form_by_hand(self):
        Finv = self.F.inverse_damped()
        E = 0.5 * Finv
        assert normalized_action_error_exact(1.5 * Finv, self.F) == pytest.approx(
            np.trace(E @ E) / np.trace(Finv @ Finv), rel=1e-12
        )


class TestMasked:
    F = make_spectral_fisher(20, "exp:5", 0.01, 1)

    def test_full_mask(self, rng):
        Q = random_spd(rng, 20)
        full = np.ones(20, bool)
        assert masked_riemannian_distance(Q, self.F, full) == pytest.approx(
            riemannian_distance(Q, self.F.inverse_damped()), rel=1e-9
        )

    def test_single_alive(self):
        mask = np.zeros(20, bool)
        mask[7] = True
        Q = np.eye(20) * 3.0
        fii = self.F.damped()[7, 7]
        assert masked_riemannian_distance(Q, self.F, mask) == pytest.approx(abs(np.log(3.0 * fii)), rel=1e-9)

    def test_submatrix_oracle(self, rng):
        mask = rng.random(20) < 0.6
        Q = random_spd(rng, 20)
        keep = np.flatnonzero(mask)
        target = np.linalg.inv(self.F.damped()[np.ix_(keep, keep)])
        expect = riemannian_distance(Q[np.ix_(keep, keep)], target)
        assert masked_riemannian_distance(Q, self.F, mask) == pytest.approx(expect, rel=1e-9)
        np.testing.assert_allclose(exact_masked_inverse(self.F, mask)[np.ix_(keep, keep)], target, atol=1e-9)


class TestMetricSample:
    def test_rejects_nan(self):
        with pytest.raises(ValueError):
            MetricSample("d", float("nan"))
