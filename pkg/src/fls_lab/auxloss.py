"""Fitting Q(lambda) to the inverse damped Fisher by auxiliary-loss minimization.

For a probe vector u the per-sample objective is

    A(u) = (1/2 u^T Q F_gamma Q u - u^T Q u) / |u|^2,

minimized (over unconstrained symmetric Q) by Q = F_gamma^-1. Dropping the
factor 1/2 gives a diagnostic that is exactly zero at the solution.

Only Fisher-vector products are needed, so F may be exact or a minibatch
estimate; the gradient is linear in the estimate and therefore unbiased.
"""

from __future__ import annotations

import csv
import io
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .fisher import LinearTask, SpectralFisher, fisher_vector_product, sample_gradient_batch
from .qparam import QParam

__all__ = [
    "AuxConfig",
    "AuxTrace",
    "AuxEstimator",
    "Adam",
    "DivergenceError",
    "ExactFvp",
    "MinibatchFvp",
    "as_source",
    "aux_loss_sample",
    "aux_loss",
    "convergence_metric",
    "aux_gradient",
    "minimize_aux",
    "gradient_flow_closed_form",
    "matrix_flow_descent",
]

PRECONDITIONERS = ("identity", "q")
U_DISTRIBUTIONS = ("isotropic", "covariance", "samples", "basis")


class DivergenceError(RuntimeError):
    """Raised when the monitored metric blows up past the configured guard."""


def _rows(u):
    u = np.asarray(u, dtype=np.float64)
    return np.atleast_2d(u)


def _inv_sq_norms(U):
    nrm = np.einsum("ij,ij->i", U, U)
    if np.any(nrm <= 0):
        raise ValueError("probe vector u must be non-zero")
    return 1.0 / nrm


def aux_loss_sample(q: QParam, fvp: Callable, u) -> float:
    """Auxiliary loss for a single probe ``u`` (one qv, one fvp)."""
    u = np.asarray(u, dtype=np.float64)
    if u.ndim != 1:
        raise ValueError("aux_loss_sample takes a single vector; use aux_loss for batches")
    nrm = float(u @ u)
    if nrm <= 0:
        raise ValueError("probe vector u must be non-zero")
    v = q.qv(u)
    return float(0.5 * (v @ fvp(v)) - u @ v) / nrm


def aux_loss(q: QParam, fvp: Callable, U) -> float:
    """Mean auxiliary loss over a batch of probes (rows of ``U``)."""
    U = _rows(U)
    w = _inv_sq_norms(U)
    V = q.qv(U)
    FV = fvp(V)
    per = 0.5 * np.einsum("ij,ij->i", V, FV) - np.einsum("ij,ij->i", U, V)
    return float(np.mean(per * w))


def convergence_metric(q: QParam, fvp: Callable, U) -> float:
    """Mean of (u^T Q F Q u - u^T Q u)/|u|^2; zero when Q = F_gamma^-1."""
    U = _rows(U)
    if U.shape[0] == 0:
        raise ValueError("empty probe batch")
    w = _inv_sq_norms(U)
    V = q.qv(U)
    FV = fvp(V)
    per = np.einsum("ij,ij->i", V, FV) - np.einsum("ij,ij->i", U, V)
    return float(np.mean(per * w))


def aux_gradient(q: QParam, fvp: Callable, u, preconditioner: str = "identity") -> np.ndarray:
    """Gradient of the auxiliary loss w.r.t. the flat parameters, averaged over probes.

    With residual r = F Q u - u the gradient is the vjp of r^T Q u. The
    ``"q"`` preconditioner replaces r by Q r, which costs one extra qv per probe.
    """
    if preconditioner not in PRECONDITIONERS:
        raise ValueError(f"preconditioner must be one of {PRECONDITIONERS}")
    U = _rows(u)
    if U.shape[1] != q.dim:
        raise ValueError(f"probe length {U.shape[1]} != Q dimension {q.dim}")
    w = _inv_sq_norms(U)
    V = q.qv(U)
    Rr = fvp(V) - U
    if preconditioner == "q":
        Rr = q.qv(Rr)
    return q.vjp(U, Rr * w[:, None]) / U.shape[0]


class Adam:
    """Adaptive-moment update on a flat parameter vector."""

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = None
        self.v = None
        self.t = 0

    def update(self, params: np.ndarray, grad: np.ndarray, lr: float = None) -> np.ndarray:
        if self.m is None:
            self.m = np.zeros_like(params)
            self.v = np.zeros_like(params)
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        mhat = self.m / (1 - self.beta1**self.t)
        vhat = self.v / (1 - self.beta2**self.t)
        step = self.lr if lr is None else lr
        return params - step * mhat / (np.sqrt(vhat) + self.eps)


class _GradientDescent:
    def __init__(self, lr: float):
        self.lr = lr

    def update(self, params, grad, lr=None):
        return params - (self.lr if lr is None else lr) * grad


@dataclass
class AuxConfig:
    """Settings for one auxiliary-loss minimization run.

    ``u_distribution`` is one of ``isotropic``, ``covariance`` (with
    ``u_covariance``), ``samples`` (every step uses all rows of
    ``u_samples``) or ``basis`` (every step uses the standard basis, which
    turns the objective into the deterministic trace form).
    """

    lr: float
    steps: int = 1000
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    preconditioner: str = "identity"
    u_distribution: str = "isotropic"
    u_covariance: Optional[np.ndarray] = None
    u_samples: Optional[np.ndarray] = None
    samples_per_step: int = 1
    metric_every: int = 10
    metric_batch: int = 64
    decay_power: float = 0.0
    decay_horizon: float = 100.0
    divergence_factor: float = 1e6
    seed: int = 0

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("aux learning rate must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("Adam betas must lie in [0, 1)")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError("optimizer must be 'adam' or 'sgd'")
        if self.preconditioner not in PRECONDITIONERS:
            raise ValueError(f"preconditioner must be one of {PRECONDITIONERS}")
        if self.u_distribution not in U_DISTRIBUTIONS:
            raise ValueError(f"u_distribution must be one of {U_DISTRIBUTIONS}")
        if self.u_distribution == "covariance" and self.u_covariance is None:
            raise ValueError("covariance u-distribution needs u_covariance")
        if self.u_distribution == "samples" and self.u_samples is None:
            raise ValueError("samples u-distribution needs u_samples")
        if self.samples_per_step < 1 or self.steps < 0 or self.metric_every < 1:
            raise ValueError("samples_per_step and metric_every must be >= 1, steps >= 0")

    def learning_rate(self, step: int) -> float:
        if self.decay_power == 0:
            return self.lr
        return self.lr * (1.0 + step / self.decay_horizon) ** (-self.decay_power)


@dataclass
class AuxTrace:
    step: list = field(default_factory=list)
    minibatches: list = field(default_factory=list)
    metric: list = field(default_factory=list)
    aux_loss: list = field(default_factory=list)
    wall_ms: list = field(default_factory=list)

    def __len__(self):
        return len(self.step)

    def append(self, step, minibatches, metric, loss, wall_ms):
        self.step.append(int(step))
        self.minibatches.append(int(minibatches))
        self.metric.append(float(metric))
        self.aux_loss.append(float(loss))
        self.wall_ms.append(float(wall_ms))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["step", "minibatches_consumed", "convergence_metric", "aux_loss", "wall_ms"])
        for row in zip(self.step, self.minibatches, self.metric, self.aux_loss, self.wall_ms):
            w.writerow([row[0], row[1], repr(row[2]), repr(row[3]), f"{row[4]:.3f}"])
        return buf.getvalue()


class ExactFvp:
    """Exact damped Fisher-vector products, optionally for a masked model."""

    stochastic = False

    def __init__(self, F: SpectralFisher, mask=None):
        self.F = F.covariance if isinstance(F, LinearTask) else F
        self.mask = None if mask is None else np.asarray(mask, dtype=bool)

    def exact(self, v):
        if self.mask is None:
            return fisher_vector_product(self.F, v)
        m = self.mask
        g = self.F.gamma
        return m * fisher_vector_product(self.F, m * v) - g * (m * v) + g * v

    __call__ = exact

    def draw(self, rng):
        return self.exact


class _FixedFvp:
    stochastic = False

    def __init__(self, fn):
        self.exact = fn

    def draw(self, rng):
        return self.exact


def as_source(source):
    """Accept a Fisher, a task, an fvp source, or a plain deterministic fvp callable."""
    if isinstance(source, (SpectralFisher, LinearTask)):
        return ExactFvp(source)
    if hasattr(source, "draw"):
        return source
    if callable(source):
        return _FixedFvp(source)
    raise TypeError(f"cannot use {type(source).__name__} as a Fisher-vector-product source")


class MinibatchFvp(ExactFvp):
    """Fresh minibatch estimate of the (masked) damped Fisher on every draw."""

    stochastic = True

    def __init__(self, task, m: int = None, mask=None):
        super().__init__(task, mask)
        self.task = task
        self.m = m

    def draw(self, rng):
        seed = int(rng.integers(2**63 - 1))
        return sample_gradient_batch(self.task, seed, m=self.m, mask=self.mask).fvp


def _sampler(n: int, cfg: AuxConfig):
    if cfg.u_distribution == "covariance":
        C = np.asarray(cfg.u_covariance, dtype=np.float64)
        evals, evecs = np.linalg.eigh(0.5 * (C + C.T))
        S = evecs * np.sqrt(np.clip(evals, 0.0, None))
        return lambda rng, k: rng.standard_normal((k, n)) @ S.T
    return lambda rng, k: rng.standard_normal((k, n))


class AuxEstimator:
    """Stateful auxiliary-loss minimizer; mutates ``q`` in place.

    Optimizer moments, random streams and the held-out metric batch persist
    across :meth:`run` calls, so a pruning loop can interleave single steps.
    """

    def __init__(self, q: QParam, source, config: AuxConfig):
        source = as_source(source)
        self.q = q
        self.source = source
        self.config = config
        if config.optimizer == "adam":
            self.opt = Adam(config.lr, config.beta1, config.beta2, config.eps)
        else:
            self.opt = _GradientDescent(config.lr)
        u_ss, b_ss, m_ss = np.random.SeedSequence(config.seed).spawn(3)
        self.u_rng = np.random.default_rng(u_ss)
        self.batch_rng = np.random.default_rng(b_ss)
        self._draw = _sampler(q.dim, config)
        n = q.dim
        if config.u_distribution == "basis":
            self._fixed_u = np.eye(n)
        elif config.u_distribution == "samples":
            self._fixed_u = _rows(config.u_samples)
        else:
            self._fixed_u = None
        if self._fixed_u is not None:
            self.metric_u = self._fixed_u
        else:
            self.metric_u = self._draw(np.random.default_rng(m_ss), config.metric_batch)
        exact = getattr(source, "exact", None)
        self._metric_fvp = exact if exact is not None else source.draw(np.random.default_rng(m_ss))
        # random probes are restricted to these coordinates when set
        self.probe_mask = None
        self.steps = 0
        self.minibatches = 0
        self.trace = AuxTrace()
        self._initial = None
        self._elapsed = 0.0

    def metric(self) -> float:
        return convergence_metric(self.q, self._metric_fvp, self.metric_u)

    def loss(self) -> float:
        return aux_loss(self.q, self._metric_fvp, self.metric_u)

    def _record(self):
        m = self.metric()
        if self._initial is None:
            self._initial = max(abs(m), 1e-12)
        if not np.isfinite(m) or abs(m) > self.config.divergence_factor * self._initial:
            raise DivergenceError(
                f"aux metric {m:.3e} exceeded {self.config.divergence_factor:g}x its initial "
                f"magnitude at step {self.steps}"
            )
        self.trace.append(self.steps, self.minibatches, m, self.loss(), self._elapsed * 1e3)

    def step(self) -> None:
        t0 = time.perf_counter()
        cfg = self.config
        if self._fixed_u is not None:
            U = self._fixed_u
        else:
            U = self._draw(self.u_rng, cfg.samples_per_step)
            if self.probe_mask is not None:
                U = U * self.probe_mask
        fvp = self.source.draw(self.batch_rng)
        g = aux_gradient(self.q, fvp, U, cfg.preconditioner)
        theta = self.opt.update(self.q.flat_params(), g, cfg.learning_rate(self.steps))
        if not np.all(np.isfinite(theta)):
            raise DivergenceError(f"non-finite parameters at step {self.steps}")
        self.q.set_flat_params(theta)
        self.steps += 1
        self.minibatches += int(getattr(self.source, "stochastic", False))
        self._elapsed += time.perf_counter() - t0

    def run(self, steps: int = None, record: bool = True) -> AuxTrace:
        steps = self.config.steps if steps is None else steps
        if record and self._initial is None and steps > 0:
            self._record()
        for _ in range(steps):
            self.step()
            if record and self.steps % self.config.metric_every == 0:
                self._record()
        return self.trace


def minimize_aux(q: QParam, source, config: AuxConfig) -> AuxTrace:
    """Run ``config.steps`` steps of auxiliary-loss minimization on ``q``."""
    return AuxEstimator(q, source, config).run()


def gradient_flow_closed_form(xi, gamma: float, alpha: float, p, t) -> np.ndarray:
    """Eigenvalues of Q(t) under the (preconditioned) gradient flow from Q(0) = alpha I.

    beta_i(t) = b_i + (alpha - b_i) exp(-t p_i / b_i) with b_i = 1/(xi_i + gamma).
    ``t`` may be a scalar or an array (result then has shape (len(t), n)).
    """
    xi = np.asarray(xi, dtype=np.float64)
    p = np.broadcast_to(np.asarray(p, dtype=np.float64), xi.shape)
    if np.any(xi < 0) or not gamma > 0 or np.any(p <= 0):
        raise ValueError("need xi >= 0, gamma > 0 and p > 0")
    target = 1.0 / (xi + gamma)
    tau = target / p
    t = np.asarray(t, dtype=np.float64)
    return target + (alpha - target) * np.exp(-np.multiply.outer(t, 1.0 / tau))


def matrix_flow_descent(
    F: SpectralFisher,
    alpha: float,
    lr: float,
    steps: int,
    record_every: int = 1,
    preconditioner=None,
) -> tuple:
    """Explicit-Euler descent Q <- Q - lr P (F_gamma Q - I) on a dense, unconstrained Q.

    This is the non-limiting parameterization in which the closed-form flow
    holds. Returns (times, eigen_trajectory) where the trajectory holds the
    diagonal of U^T Q U at each recorded step.
    """
    n = F.n
    Fd = F.damped()
    P = np.eye(n) if preconditioner is None else np.asarray(preconditioner, dtype=np.float64)
    Q = alpha * np.eye(n)
    U = F.basis
    times, traj = [0.0], [np.einsum("ij,ik,kj->j", U, Q, U)]
    eye = np.eye(n)
    for k in range(1, steps + 1):
        Q = Q - lr * (P @ (Fd @ Q - eye))
        if k % record_every == 0:
            times.append(k * lr)
            traj.append(np.einsum("ij,ik,kj->j", U, Q, U))
    return np.asarray(times), np.asarray(traj)
