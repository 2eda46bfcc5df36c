"""Distances and error measures between SPD matrices and linear operators."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .fisher import SpectralFisher, exact_masked_inverse

__all__ = [
    "MetricSample",
    "riemannian_distance",
    "normalized_action_error",
    "normalized_action_error_exact",
    "masked_riemannian_distance",
    "as_matrix",
    "apply_operator",
]


@dataclass(frozen=True)
class MetricSample:
    name: str
    value: float
    context: dict = field(default_factory=dict)

    def __post_init__(self):
        if not np.isfinite(self.value):
            raise ValueError(f"metric {self.name} is not finite: {self.value}")


def as_matrix(Q) -> np.ndarray:
    """Dense matrix for an operator (anything with ``dense()``) or an array."""
    if hasattr(Q, "dense"):
        return Q.dense()
    return np.asarray(Q, dtype=np.float64)


def apply_operator(Q, V) -> np.ndarray:
    """Apply Q to the rows of V."""
    if hasattr(Q, "qv"):
        return Q.qv(V)
    return np.asarray(V) @ np.asarray(Q, dtype=np.float64).T


def _spd_eigh(A, name):
    A = 0.5 * (A + A.T)
    w, V = np.linalg.eigh(A)
    if w[0] <= 0:
        raise ValueError(f"{name} is not positive definite (smallest eigenvalue {w[0]:.3e})")
    return w, V


def riemannian_distance(A, B) -> float:
    """Affine-invariant distance |log(A^-1/2 B A^-1/2)|_F via symmetric eigendecompositions."""
    A = as_matrix(A)
    B = as_matrix(B)
    if A.shape != B.shape or A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError("need two square matrices of the same size")
    wa, Va = _spd_eigh(A, "A")
    _spd_eigh(B, "B")
    W = Va / np.sqrt(wa)
    C = W.T @ B @ W
    mu = np.linalg.eigvalsh(0.5 * (C + C.T))
    if mu[0] <= 0:
        raise ValueError("congruence lost positive definiteness; inputs are too ill-conditioned")
    return float(np.sqrt(np.sum(np.log(mu) ** 2)))


def _target_and_sampler(F, sigma_u):
    Finv = F.inverse_damped() if isinstance(F, SpectralFisher) else np.linalg.inv(np.asarray(F))
    n = Finv.shape[0]
    if sigma_u is None:
        S = np.eye(n)
    else:
        w, V = np.linalg.eigh(0.5 * (sigma_u + sigma_u.T))
        S = V * np.sqrt(np.clip(w, 0, None))
    return Finv, S


def normalized_action_error(Q, F, sigma_u=None, samples: int = 4096, seed: int = 0) -> float:
    """Monte-Carlo E|Qu - F_gamma^-1 u|^2 / E|F_gamma^-1 u|^2 with u ~ N(0, sigma_u).

    ``F`` is a SpectralFisher (its damped inverse is the target) or a damped
    Fisher matrix.
    """
    Finv, S = _target_and_sampler(F, sigma_u)
    U = np.random.default_rng(seed).standard_normal((samples, Finv.shape[0])) @ S.T
    ref = U @ Finv
    err = apply_operator(Q, U) - ref
    den = float(np.sum(ref * ref))
    if den <= 0:
        raise ValueError("reference action is identically zero")
    return float(np.sum(err * err)) / den


def normalized_action_error_exact(Q, F, sigma_u=None) -> float:
    """Closed form Tr(E S E) / Tr(F^-1 S F^-1) with E = Q - F_gamma^-1."""
    Finv, _ = _target_and_sampler(F, None)
    S = np.eye(Finv.shape[0]) if sigma_u is None else np.asarray(sigma_u, dtype=np.float64)
    E = as_matrix(Q) - Finv
    return float(np.trace(E @ S @ E) / np.trace(Finv @ S @ Finv))


def masked_riemannian_distance(Q, F, mask) -> float:
    """Distance between Q and the exact masked inverse, both restricted to alive coordinates."""
    mask = np.asarray(mask, dtype=bool)
    alive = np.flatnonzero(mask)
    if alive.size == 0:
        raise ValueError("mask has no alive coordinates")
    target = exact_masked_inverse(F, mask)[np.ix_(alive, alive)]
    Qd = as_matrix(Q)[np.ix_(alive, alive)]
    return riemannian_distance(Qd, target)
