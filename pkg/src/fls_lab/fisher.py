"""Ground-truth Fisher matrices with controlled spectra, and linear-Gaussian tasks.

Everything here is immutable after construction and every sampling routine
takes an explicit seed, so replicas can run in parallel and stay reproducible.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from typing import Callable, Sequence, Union

import numpy as np

__all__ = [
    "SpectralFisher",
    "LinearTask",
    "GradientBatch",
    "parse_spectrum",
    "spectrum_values",
    "make_spectral_fisher",
    "make_linear_task",
    "fisher_vector_product",
    "sample_gradient_batch",
    "sample_data",
    "empirical_fvp",
    "exact_masked_inverse",
]

Spectrum = Union[str, tuple, Sequence[float]]


def parse_spectrum(spec: Spectrum) -> tuple:
    """Normalize a spectrum rule into ``(kind, value)``.

    Accepted string forms are ``"power:p"`` (xi_i = i**-p), ``"exp:c"``
    (xi_i = exp(-(i-1)/c), largest eigenvalue 1) and ``"list:[a, b, ...]"``.
    A bare sequence of numbers is an explicit list.
    """
    if isinstance(spec, tuple) and len(spec) == 2 and isinstance(spec[0], str):
        kind, value = spec
    elif isinstance(spec, str):
        m = re.fullmatch(r"\s*(power|exp|list)\s*:\s*(.+?)\s*", spec)
        if m is None:
            raise ValueError(f"unrecognized spectrum rule {spec!r}")
        kind, raw = m.groups()
        value = json.loads(raw) if kind == "list" else float(raw)
    else:
        kind, value = "list", [float(x) for x in spec]
    if kind in ("power", "exp") and not float(value) > 0:
        raise ValueError(f"{kind} spectrum needs a positive parameter, got {value}")
    if kind not in ("power", "exp", "list"):
        raise ValueError(f"unknown spectrum kind {kind!r}")
    return kind, value


def spectrum_values(n: int, spec: Spectrum) -> np.ndarray:
    """Eigenvalues for ``n`` dimensions, sorted non-increasing."""
    kind, value = parse_spectrum(spec)
    i = np.arange(1, n + 1, dtype=np.float64)
    if kind == "power":
        xi = i ** (-float(value))
    elif kind == "exp":
        xi = np.exp(-(i - 1.0) / float(value))
    else:
        xi = np.asarray(value, dtype=np.float64)
        if xi.shape != (n,):
            raise ValueError(f"explicit spectrum has {xi.size} entries, expected {n}")
        if np.any(xi < 0):
            raise ValueError("explicit spectrum has a negative eigenvalue; F would not be PSD")
        xi = np.sort(xi)[::-1]
    return xi


def _random_orthonormal(n: int, rng: np.random.Generator) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((n, n)))
    # sign fix makes the basis a deterministic function of the Gaussian draw
    s = np.sign(np.diag(r))
    s[s == 0] = 1.0
    return q * s


@dataclass(frozen=True)
class SpectralFisher:
    """F = U diag(xi) U^T with damping gamma.

    Attributes
    ----------
    basis : (n, n) orthonormal eigenbasis U
    eigenvalues : (n,) non-negative, non-increasing xi
    gamma : damping added to every eigenvalue when forming F_gamma
    """

    basis: np.ndarray
    eigenvalues: np.ndarray
    gamma: float

    def __post_init__(self):
        U = np.asarray(self.basis, dtype=np.float64)
        xi = np.asarray(self.eigenvalues, dtype=np.float64)
        if U.ndim != 2 or U.shape[0] != U.shape[1] or xi.shape != (U.shape[0],):
            raise ValueError("basis must be n x n and eigenvalues length n")
        if np.any(xi < 0):
            raise ValueError("eigenvalues must be non-negative")
        if np.any(np.diff(xi) > 0):
            raise ValueError("eigenvalues must be sorted non-increasing")
        if self.gamma < 0:
            raise ValueError("damping must be non-negative")
        U.setflags(write=False)
        xi.setflags(write=False)
        object.__setattr__(self, "basis", U)
        object.__setattr__(self, "eigenvalues", xi)
        object.__setattr__(self, "gamma", float(self.gamma))
        S = U * np.sqrt(xi)
        S.setflags(write=False)
        object.__setattr__(self, "_sqrt", S)

    @property
    def n(self) -> int:
        return self.eigenvalues.shape[0]

    @property
    def damped_eigenvalues(self) -> np.ndarray:
        return self.eigenvalues + self.gamma

    def matrix(self) -> np.ndarray:
        """Undamped F."""
        U = self.basis
        return (U * self.eigenvalues) @ U.T

    def damped(self) -> np.ndarray:
        U = self.basis
        return (U * self.damped_eigenvalues) @ U.T

    def inverse_damped(self) -> np.ndarray:
        U = self.basis
        return (U / self.damped_eigenvalues) @ U.T

    def inverse(self) -> np.ndarray:
        """Undamped F^-1; falls back to the damped inverse when F is singular."""
        xi = self.eigenvalues
        if np.any(xi <= 0):
            return self.inverse_damped()
        U = self.basis
        return (U / xi) @ U.T

    def sqrt_factor(self) -> np.ndarray:
        """S with S S^T = F (undamped), for sampling x ~ N(0, F)."""
        return self._sqrt

    def fvp(self, v: np.ndarray) -> np.ndarray:
        return fisher_vector_product(self, v)


def make_spectral_fisher(n: int, spectrum: Spectrum, gamma: float, seed: int) -> SpectralFisher:
    """Random orthonormal eigenbasis (QR of a seeded Gaussian) with a prescribed spectrum."""
    if n < 1:
        raise ValueError("n must be at least 1")
    if gamma < 0:
        raise ValueError("damping must be non-negative")
    xi = spectrum_values(n, spectrum)
    U = _random_orthonormal(n, np.random.default_rng(seed))
    return SpectralFisher(U, xi, gamma)


def fisher_vector_product(F: SpectralFisher, v: np.ndarray) -> np.ndarray:
    """(U Xi U^T + gamma I) v; accepts a single vector or a stack of row vectors."""
    v = np.asarray(v, dtype=np.float64)
    if v.shape[-1] != F.n:
        raise ValueError(f"vector has length {v.shape[-1]}, Fisher has dimension {F.n}")
    U = F.basis
    return ((v @ U) * F.damped_eigenvalues) @ U.T


@dataclass(frozen=True)
class LinearTask:
    """Single-output linear regression y = w.x + noise with x ~ N(0, Sigma_x).

    Under the unit-variance Gaussian predictive model the Fisher of this task
    is exactly Sigma_x, independent of the weights.
    """

    weights: np.ndarray
    covariance: SpectralFisher
    noise: float = 0.1
    batch_size: int = 100
    test_seed: int = 0
    _test: tuple = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if w.shape != (self.covariance.n,):
            raise ValueError("weights must match the covariance dimension")
        if self.noise < 0:
            raise ValueError("noise scale must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch size must be positive")
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)
        X, y = sample_data(self, 10 * self.n, self.test_seed)
        object.__setattr__(self, "_test", (X, y))

    @property
    def n(self) -> int:
        return self.covariance.n

    @property
    def gamma(self) -> float:
        return self.covariance.gamma

    @property
    def fisher(self) -> SpectralFisher:
        return self.covariance

    def sigma_x(self) -> np.ndarray:
        return self.covariance.matrix()

    def test_mse(self, w: np.ndarray) -> float:
        """Mean squared prediction error on the held-out set of 10 n examples."""
        X, y = self._test
        resid = X @ np.asarray(w, dtype=np.float64) - y
        return float(np.mean(resid * resid))

    def quadratic_loss(self, w: np.ndarray) -> float:
        """Population excess loss 1/2 (w - w*)^T Sigma_x (w - w*)."""
        d = np.asarray(w, dtype=np.float64) - self.weights
        return 0.5 * float(d @ self.covariance.matrix() @ d)


def make_linear_task(
    n: int,
    spectrum: Spectrum = "exp:10",
    gamma: float = 0.01,
    seed: int = 0,
    noise: float = 0.1,
    batch_size: int = 100,
) -> LinearTask:
    """Task with w ~ N(0, 1/n) and a random covariance with the given spectrum."""
    ss = np.random.SeedSequence(seed)
    cov_seed, w_seed, test_seed = (int(s.generate_state(1)[0]) for s in ss.spawn(3))
    cov = make_spectral_fisher(n, spectrum, gamma, cov_seed)
    w = np.random.default_rng(w_seed).normal(0.0, 1.0 / np.sqrt(n), size=n)
    return LinearTask(w, cov, noise=noise, batch_size=batch_size, test_seed=test_seed)


@dataclass(frozen=True)
class GradientBatch:
    """Per-example score gradients (rows of ``grads``) plus the damping they serve."""

    grads: np.ndarray
    gamma: float

    @property
    def m(self) -> int:
        return self.grads.shape[0]

    @property
    def n(self) -> int:
        return self.grads.shape[1]

    def fvp(self, v: np.ndarray) -> np.ndarray:
        return empirical_fvp(self, v)

    def fisher_estimate(self) -> np.ndarray:
        """(1/m) G^T G, undamped. Materializes an n x n matrix."""
        G = self.grads
        return (G.T @ G) / G.shape[0]


def _inputs(task_or_fisher, m: int, rng: np.random.Generator) -> np.ndarray:
    cov = task_or_fisher.covariance if isinstance(task_or_fisher, LinearTask) else task_or_fisher
    return rng.standard_normal((m, cov.n)) @ cov._sqrt.T


def sample_data(task: LinearTask, m: int, seed) -> tuple:
    """Draw ``m`` labelled examples (X, y) from the task's generative model."""
    if m < 1:
        raise ValueError("need at least one example")
    rng = np.random.default_rng(seed)
    X = _inputs(task, m, rng)
    y = X @ task.weights + task.noise * rng.standard_normal(m)
    return X, y


def sample_gradient_batch(
    task: Union[LinearTask, SpectralFisher],
    seed,
    m: int = None,
    mask: np.ndarray = None,
) -> GradientBatch:
    """Model-sampled score gradients g_j = x_j * eps_j, eps_j ~ N(0, 1).

    With this construction E[(1/m) G^T G] is the task covariance. When a
    ``mask`` is given the gradients are those of the masked model, i.e. pruned
    coordinates are zero.
    """
    if m is None:
        m = task.batch_size if isinstance(task, LinearTask) else 100
    if m < 1:
        raise ValueError("batch size must be positive")
    rng = np.random.default_rng(seed)
    X = _inputs(task, m, rng)
    G = X * rng.standard_normal((m, 1))
    if mask is not None:
        G *= np.asarray(mask, dtype=bool)
    return GradientBatch(G, task.gamma)


def empirical_fvp(batch: GradientBatch, v: np.ndarray) -> np.ndarray:
    """(1/m) G^T (G v) + gamma v without forming G^T G."""
    v = np.asarray(v, dtype=np.float64)
    if v.shape[-1] != batch.n:
        raise ValueError(f"vector has length {v.shape[-1]}, batch has dimension {batch.n}")
    G = batch.grads
    return ((v @ G.T) @ G) / batch.m + batch.gamma * v


def exact_masked_inverse(F, mask: np.ndarray) -> np.ndarray:
    """Inverse of F_gamma restricted to surviving coordinates, re-embedded with zeros."""
    if isinstance(F, LinearTask):
        F = F.covariance
    Fd = F.damped() if isinstance(F, SpectralFisher) else np.asarray(F, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (Fd.shape[0],):
        raise ValueError("mask length does not match the Fisher dimension")
    alive = np.flatnonzero(mask)
    if alive.size == 0:
        raise ValueError("mask has no surviving coordinates")
    sub = Fd[np.ix_(alive, alive)]
    sub_inv = np.linalg.inv(sub)
    assert np.all(np.isfinite(sub_inv)), "singular masked Fisher"
    out = np.zeros_like(Fd)
    out[np.ix_(alive, alive)] = 0.5 * (sub_inv + sub_inv.T)
    return out


FvpFn = Callable[[np.ndarray], np.ndarray]
