import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fls_lab.auxloss import (
    Adam,
    AuxConfig,
    AuxEstimator,
    DivergenceError,
    ExactFvp,
    MinibatchFvp,
    aux_gradient,
    aux_loss,
    aux_loss_sample,
    convergence_metric,
    gradient_flow_closed_form,
    matrix_flow_descent,
    minimize_aux,
)
from fls_lab.fisher import SpectralFisher, make_linear_task, make_spectral_fisher
from fls_lab.qparam import DenseOperator, QFull, init_scaled_identity, make_q


@pytest.fixture
def F5():
    return make_spectral_fisher(5, "exp:2", 0.1, 0)


def exact_q(F):
    return QFull.from_dense(F.inverse_damped())


class TestAuxLoss:
    def test_zero_operator(self, F5, rng):
        Z = DenseOperator(np.zeros((5, 5)))
        assert aux_loss_sample(Z, F5.fvp, rng.standard_normal(5)) == 0.0

    def test_optimum_value(self, F5, rng):
        u = rng.standard_normal(5)
        expect = -0.5 * u @ F5.inverse_damped() @ u / (u @ u)
        assert aux_loss_sample(exact_q(F5), F5.fvp, u) == pytest.approx(expect, rel=1e-10)

    def test_dense_oracle(self, F5, rng):
        q = make_q("full", n=5)
        q.set_flat_params(q.flat_params() + 0.2 * rng.standard_normal(q.num_params))
        Q, Fd = q.dense(), F5.damped()
        u = rng.standard_normal(5)
        expect = (0.5 * u @ Q @ Fd @ Q @ u - u @ Q @ u) / (u @ u)
        assert aux_loss_sample(q, F5.fvp, u) == pytest.approx(expect, abs=1e-10)
        U = rng.standard_normal((4, 5))
        batch = np.mean([(0.5 * x @ Q @ Fd @ Q @ x - x @ Q @ x) / (x @ x) for x in U])
        assert aux_loss(q, F5.fvp, U) == pytest.approx(batch, abs=1e-10)

    def test_zero_probe(self, F5):
        with pytest.raises(ValueError):
            aux_loss_sample(make_q("full", n=5), F5.fvp, np.zeros(5))

    def test_single_qv(self, F5, rng):
        q = make_q("full", n=5)
        aux_loss_sample(q, F5.fvp, rng.standard_normal(5))
        assert q.qv_calls == 1


class TestConvergenceMetric:
    def test_zero_at_optimum(self, F5, rng):
        assert abs(convergence_metric(exact_q(F5), F5.fvp, rng.standard_normal((8, 5)))) < 1e-8

    @given(alpha=st.floats(0.01, 100))
    def test_scalar_identity_case(self, alpha):
        F = SpectralFisher(np.eye(3), np.ones(3), 0.0)
        q = init_scaled_identity(QFull(3), alpha)
        U = np.random.default_rng(0).standard_normal((5, 3))
        assert convergence_metric(q, F.fvp, U) == pytest.approx(alpha**2 - alpha, rel=1e-9, abs=1e-9)

    def test_double_inverse_is_positive(self, F5, rng):
        q = QFull.from_dense(2 * F5.inverse_damped())
        for u in rng.standard_normal((10, 5)):
            assert convergence_metric(q, F5.fvp, u) > 0

    def test_half_inverse_is_negative(self, F5, rng):
        q = QFull.from_dense(0.5 * F5.inverse_damped())
        assert convergence_metric(q, F5.fvp, rng.standard_normal((10, 5))) < 0


class TestAuxGradient:
    @pytest.mark.parametrize("pre", ["identity", "q"])
    def test_stationary_at_optimum(self, F5, rng, pre):
        g = aux_gradient(exact_q(F5), F5.fvp, rng.standard_normal((3, 5)), pre)
        assert np.max(np.abs(g)) < 1e-9

    def test_finite_differences(self, F5, rng):
        q = make_q("full", n=5)
        q.set_flat_params(q.flat_params() + 0.2 * rng.standard_normal(q.num_params))
        U = rng.standard_normal((3, 5))
        g = aux_gradient(q, F5.fvp, U)
        theta = q.flat_params()
        fd = np.empty_like(theta)
        for i in range(theta.size):
            e = np.zeros_like(theta)
            e[i] = 1e-5
            q.set_flat_params(theta + e)
            up = aux_loss(q, F5.fvp, U)
            q.set_flat_params(theta - e)
            fd[i] = (up - aux_loss(q, F5.fvp, U)) / 2e-5
        np.testing.assert_allclose(g, fd, rtol=1e-5, atol=1e-9)

    def test_q_mode_costs_one_more_qv(self, F5, rng):
        q = make_q("full", n=5)
        aux_gradient(q, F5.fvp, rng.standard_normal(5), "q")
        assert q.qv_calls == 2

    def test_q_mode_equals_identity_for_identity_q(self, F5, rng):
        q = make_q("full", n=5)
        U = rng.standard_normal((2, 5))
        np.testing.assert_allclose(aux_gradient(q, F5.fvp, U, "q"), aux_gradient(q, F5.fvp, U), rtol=1e-12)

    def test_unknown_preconditioner(self, F5):
        with pytest.raises(ValueError):
            aux_gradient(make_q("full", n=5), F5.fvp, np.ones(5), "adam")

    def test_decoupled_flow_on_diagonal_f(self):
        # F diagonal, Q = alpha I, u = e_i: only the (i, i) Cholesky entry moves
        F = SpectralFisher(np.eye(3), np.array([3.0, 2.0, 1.0]), 0.0)
        q = init_scaled_identity(QFull(3), 2.0)
        g = aux_gradient(q, F.fvp, np.array([0.0, 1.0, 0.0]))
        L = np.zeros((3, 3))
        L[np.tril_indices(3)] = g
        assert np.count_nonzero(L) == 1 and L[1, 1] != 0


class TestAdam:
    def test_first_step_is_signed_lr(self):
        opt = Adam(0.1)
        out = opt.update(np.zeros(3), np.array([2.0, -0.5, 1e-3]))
        np.testing.assert_allclose(out, [-0.1, 0.1, -0.1], rtol=1e-4)


class TestAuxEstimator:
    def test_zero_budget(self, F5):
        q = make_q("full", n=5)
        before = q.flat_params()
        tr = minimize_aux(q, F5, AuxConfig(lr=0.1, steps=0))
        assert len(tr) == 0 and np.array_equal(q.flat_params(), before)

    def test_deterministic(self):
        task = make_linear_task(6, seed=0)
        cfg = AuxConfig(lr=0.02, steps=30, metric_every=10, seed=4)
        a, b = make_q("full", n=6), make_q("full", n=6)
        ta = minimize_aux(a, MinibatchFvp(task, 20), cfg)
        tb = minimize_aux(b, MinibatchFvp(task, 20), cfg)
        assert np.array_equal(a.flat_params(), b.flat_params())
        assert ta.metric == tb.metric
        assert ta.minibatches[-1] == 30

    def test_converges_with_exact_fvp(self, F5):
        q = make_q("full", n=5)
        est = AuxEstimator(q, F5, AuxConfig(lr=0.5, steps=3000, optimizer="sgd",
                                                 u_distribution="basis", metric_every=500))
        est.run()
        np.testing.assert_allclose(q.dense(), F5.inverse_damped(), atol=1e-6)

    def test_divergence_guard(self, F5):
        q = init_scaled_identity(QFull(5), 10.0)
        cfg = AuxConfig(lr=5.0, steps=200, optimizer="sgd", u_distribution="basis", metric_every=1)
        with pytest.raises(DivergenceError):
            minimize_aux(q, F5, cfg)

    def test_taylor_step(self, F5, rng):
        # one small GD step lowers the loss by lr |grad|^2 to first order
        q = make_q("full", n=5)
        q.set_flat_params(q.flat_params() + 0.2 * rng.standard_normal(q.num_params))
        U = rng.standard_normal((6, 5))
        lr = 1e-5
        g = aux_gradient(q, F5.fvp, U)
        before = aux_loss(q, F5.fvp, U)
        est = AuxEstimator(q, F5, AuxConfig(lr=lr, steps=1, optimizer="sgd", u_distribution="samples", u_samples=U))
        est.run(record=False)
        drop = before - aux_loss(q, F5.fvp, U)
        assert drop == pytest.approx(lr * g @ g, rel=0.2)

    def test_masked_exact_fvp(self, F5, rng):
        mask = np.array([1, 1, 0, 1, 0], bool)
        fvp = ExactFvp(F5, mask)
        v = rng.standard_normal(5)
        Fd = F5.damped()
        expect = np.where(mask, (Fd * np.outer(mask, mask)) @ v, 0.1 * v)
        np.testing.assert_allclose(fvp(v), expect, atol=1e-12)

    def test_probe_mask(self, F5):
        # a diagonal Q keeps masked probe coordinates at zero through Qu
        mask = np.array([1, 0, 1, 1, 0], bool)
        seen = []

        def fvp(V):
            seen.append(np.array(V))
            return F5.fvp(V)

        est = AuxEstimator(make_q("diagonal", n=5), F5, AuxConfig(lr=0.01, samples_per_step=3))
        est.source.draw = lambda rng: fvp
        est.probe_mask = mask.astype(float)
        est.run(4, record=False)
        assert len(seen) == 4
        assert all(np.all(V[:, ~mask] == 0) and np.all(V[:, mask] != 0) for V in seen)

    @pytest.mark.slow
    def test_fig1_large_alpha_monotone(self):
        F = make_spectral_fisher(100, "power:2", 1e-3, 0)
        q = init_scaled_identity(QFull(100), 1000.0)
        cfg = AuxConfig(lr=0.1, steps=2000, optimizer="sgd", u_distribution="basis", metric_every=50)
        tr = AuxEstimator(q, F, cfg).run()
        assert np.all(np.diff(tr.aux_loss) <= 0)
        late = np.abs(np.asarray(tr.metric)[np.asarray(tr.step) >= 1000])
        assert np.all(np.diff(late) <= 0)


class TestClosedFormFlow:
    xi = np.array([1.0, 0.25, 0.01])

    def test_initial_value(self):
        np.testing.assert_allclose(gradient_flow_closed_form(self.xi, 1e-3, 7.0, 1.0, 0.0), 7.0)

    def test_steady_state(self):
        out = gradient_flow_closed_form(self.xi, 1e-3, 7.0, 1.0, 1e7)
        np.testing.assert_allclose(out, 1 / (self.xi + 1e-3), rtol=1e-12)

    def test_uniform_rate_when_p_is_target(self):
        target = 1 / (self.xi + 1e-3)
        out = gradient_flow_closed_form(self.xi, 1e-3, 1000.0, target, [0.5, 2.0])
        frac = (out - target) / (1000.0 - target)
        np.testing.assert_allclose(frac, np.exp(-np.array([[0.5], [2.0]])) * np.ones(3), rtol=1e-12)

    def test_discrete_descent_tracks_flow(self):
        F = make_spectral_fisher(10, "power:2", 1e-2, 0)
        lr, steps = 1e-3, 2000
        t, traj = matrix_flow_descent(F, 5.0, lr, steps, record_every=500)
        flow = gradient_flow_closed_form(F.eigenvalues, 1e-2, 5.0, 1.0, t)
        np.testing.assert_allclose(traj, flow, rtol=1e-3)
