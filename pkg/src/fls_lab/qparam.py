"""Structured positive-definite approximations Q(lambda) of the inverse damped Fisher.

Every parameterization stores a single flat, unconstrained parameter vector.
Positivity (Cholesky diagonals, the Kronecker rescaling D) goes through a
softplus map so that any optimizer can move the parameters freely.

All vector arguments may be a single length-``dim`` vector or a stack of
row vectors with shape ``(k, dim)``. Vector-Jacobian products sum over the
stack.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

__all__ = [
    "QParam",
    "QDiagonal",
    "QBlockDiagonal",
    "QFull",
    "QKroneckerDense",
    "QKroneckerConv",
    "DenseOperator",
    "softplus",
    "softplus_inverse",
    "init_scaled_identity",
    "make_q",
    "qv",
    "q_diag",
    "qv_vjp",
    "flat_params",
    "set_flat_params",
    "q_from_state",
    "save_q",
    "load_q",
    "DENSE_LIMIT",
]

DENSE_LIMIT = 2048


def softplus(x):
    return np.logaddexp(0.0, x)


def softplus_grad(x):
    # logistic sigmoid, written to avoid overflow for large |x|
    return np.exp(-np.logaddexp(0.0, -x))


def softplus_inverse(y):
    y = np.asarray(y, dtype=np.float64)
    if np.any(y <= 0):
        raise ValueError("softplus only reaches positive values")
    return y + np.log(-np.expm1(-y))


class QParam:
    """Common machinery; subclasses provide the structure-specific algebra."""

    kind = "base"

    def __init__(self, dim: int, num_params: int):
        self.dim = int(dim)
        self._theta = np.zeros(int(num_params))
        self.qv_calls = 0

    @property
    def num_params(self) -> int:
        return self._theta.size

    def flat_params(self) -> np.ndarray:
        return self._theta.copy()

    def set_flat_params(self, theta) -> None:
        theta = np.asarray(theta, dtype=np.float64)
        if theta.shape != self._theta.shape:
            raise ValueError(f"expected {self._theta.size} parameters, got {theta.size}")
        self._theta = theta.copy()
        self._refresh()

    def _refresh(self) -> None:
        raise NotImplementedError

    def _check(self, v):
        v = np.asarray(v, dtype=np.float64)
        if v.shape[-1] != self.dim or v.ndim > 2:
            raise ValueError(f"expected vectors of length {self.dim}, got shape {v.shape}")
        return v

    def qv(self, v) -> np.ndarray:
        v = self._check(v)
        self.qv_calls += 1 if v.ndim == 1 else v.shape[0]
        return self._apply(v)

    def _apply(self, v):
        raise NotImplementedError

    def diag(self) -> np.ndarray:
        raise NotImplementedError

    def vjp(self, u, r) -> np.ndarray:
        """Gradient of r^T Q(lambda) u with respect to the flat parameters."""
        u = self._check(u)
        r = self._check(r)
        if u.shape != r.shape:
            raise ValueError("u and r must have the same shape")
        U = np.atleast_2d(u)
        R = np.atleast_2d(r)
        return self._vjp(U, R)

    def _vjp(self, U, R):
        raise NotImplementedError

    def dense(self) -> np.ndarray:
        if self.dim > DENSE_LIMIT:
            raise ValueError(f"dense materialization refused for dim {self.dim} > {DENSE_LIMIT}")
        return self._apply(np.eye(self.dim))

    def copy(self) -> "QParam":
        other = self.__class__.__new__(self.__class__)
        other.__dict__.update(self.__dict__)
        other._theta = self._theta.copy()
        other.qv_calls = 0
        other._refresh()
        return other

    def shape_args(self) -> dict:
        raise NotImplementedError

    def state(self) -> dict:
        return {"kind": self.kind, **self.shape_args(), "params": self._theta.tolist()}

    def __repr__(self):
        args = ", ".join(f"{k}={v}" for k, v in self.shape_args().items())
        return f"{self.__class__.__name__}({args})"


class QDiagonal(QParam):
    """Q = diag(softplus(d))^2."""

    kind = "diagonal"

    def __init__(self, n: int):
        super().__init__(n, n)
        self._refresh()

    def _refresh(self):
        self._s = softplus(self._theta)
        self._vals = self._s**2

    @classmethod
    def from_diag(cls, values) -> "QDiagonal":
        values = np.asarray(values, dtype=np.float64)
        q = cls(values.size)
        q.set_flat_params(softplus_inverse(np.sqrt(values)))
        return q

    def _apply(self, v):
        return v * self._vals

    def diag(self):
        return self._vals.copy()

    def _vjp(self, U, R):
        return np.sum(U * R, axis=0) * 2.0 * self._s * softplus_grad(self._theta)

    def shape_args(self):
        return {"n": self.dim}


class QBlockDiagonal(QParam):
    """Block-diagonal Q with one lower-triangular Cholesky factor per block.

    Each block is L_k L_k^T; the diagonal of L_k is softplus-mapped.
    """

    kind = "block"

    def __init__(self, n: int, block: int):
        if block < 1 or n % block:
            raise ValueError(f"block size {block} does not divide dimension {n}")
        self.block = int(block)
        self.nblocks = n // block
        self._tril = np.tril_indices(block)
        self._is_diag = self._tril[0] == self._tril[1]
        super().__init__(n, self.nblocks * len(self._tril[0]))
        self._refresh()

    def _refresh(self):
        b = self.block
        vals = self._theta.reshape(self.nblocks, -1).copy()
        vals[:, self._is_diag] = softplus(vals[:, self._is_diag])
        L = np.zeros((self.nblocks, b, b))
        L[:, self._tril[0], self._tril[1]] = vals
        self._L = L

    @property
    def factors(self) -> np.ndarray:
        return self._L.copy()

    @classmethod
    def from_dense(cls, M, block: int = None) -> "QBlockDiagonal":
        """Represent the block-diagonal part of an SPD matrix exactly."""
        M = np.asarray(M, dtype=np.float64)
        n = M.shape[0]
        q = cls(n, n if block is None else block) if cls is QBlockDiagonal else cls(n)
        b = q.block
        theta = []
        for k in range(q.nblocks):
            sl = slice(k * b, (k + 1) * b)
            C = np.linalg.cholesky(M[sl, sl])
            entries = C[q._tril].copy()
            entries[q._is_diag] = softplus_inverse(entries[q._is_diag])
            theta.append(entries)
        q.set_flat_params(np.concatenate(theta))
        return q

    def _apply(self, v):
        lead = v.shape[:-1]
        vb = v.reshape(-1, self.nblocks, self.block).transpose(1, 0, 2)
        z = (vb @ self._L) @ self._L.transpose(0, 2, 1)
        return z.transpose(1, 0, 2).reshape(*lead, self.dim)

    def diag(self):
        return np.sum(self._L * self._L, axis=2).reshape(-1)

    def _vjp(self, U, R):
        nb, b = self.nblocks, self.block
        Ub = U.reshape(-1, nb, b).transpose(1, 0, 2)
        Rb = R.reshape(-1, nb, b).transpose(1, 0, 2)
        gL = Rb.transpose(0, 2, 1) @ (Ub @ self._L) + Ub.transpose(0, 2, 1) @ (Rb @ self._L)
        g = gL[:, self._tril[0], self._tril[1]]
        raw = self._theta.reshape(nb, -1)
        g[:, self._is_diag] *= softplus_grad(raw[:, self._is_diag])
        return g.reshape(-1)

    def shape_args(self):
        return {"n": self.dim, "block": self.block}


class QFull(QBlockDiagonal):
    """Q = L L^T with a single dense lower-triangular factor."""

    kind = "full"

    def __init__(self, n: int):
        super().__init__(n, n)

    @property
    def cholesky(self) -> np.ndarray:
        return self._L[0].copy()

    def shape_args(self):
        return {"n": self.dim}


class QKroneckerDense(QParam):
    """Q = D (L L^T kron R R^T) D for an n_out x n_in weight matrix.

    Vectors are row-major reshapes of n_out x n_cols matrices, where n_cols is
    n_in (plus one column when the layer has a bias). D is a positive diagonal
    carried as an n_out x n_cols array.
    """

    kind = "kron"

    def __init__(self, n_out: int, n_in: int, bias: bool = False):
        self.n_out = int(n_out)
        self.n_in = int(n_in)
        self.bias = bool(bias)
        self.n_cols = self.n_in + int(self.bias)
        self._init_kron()

    def _init_kron(self):
        no, nc = self.n_out, self.n_cols
        self._sizes = (no * no, nc * nc, no * nc)
        QParam.__init__(self, no * nc, sum(self._sizes))
        self._theta[: no * no] = np.eye(no).ravel()
        self._theta[no * no : no * no + nc * nc] = np.eye(nc).ravel()
        self._theta[no * no + nc * nc :] = softplus_inverse(1.0)
        self._refresh()

    def _refresh(self):
        no, nc = self.n_out, self.n_cols
        a, b, _ = self._sizes
        self._Lf = self._theta[:a].reshape(no, no)
        self._Rf = self._theta[a : a + b].reshape(nc, nc)
        self._draw = self._theta[a + b :].reshape(no, nc)
        self._D = softplus(self._draw)
        self._N = self._Lf @ self._Lf.T
        self._M = self._Rf @ self._Rf.T

    @property
    def factors(self):
        """(L, R, D-bar) as copies."""
        return self._Lf.copy(), self._Rf.copy(), self._D.copy()

    def set_factors(self, L, R, D) -> None:
        D = np.broadcast_to(np.asarray(D, dtype=np.float64), (self.n_out, self.n_cols))
        theta = np.concatenate(
            [np.asarray(L, float).ravel(), np.asarray(R, float).ravel(), softplus_inverse(D).ravel()]
        )
        self.set_flat_params(theta)

    def _apply(self, v):
        lead = v.shape[:-1]
        V = v.reshape(*lead, self.n_out, self.n_cols)
        Y = self._N @ (V * self._D) @ self._M
        return (self._D * Y).reshape(*lead, self.dim)

    def diag(self):
        dl = np.sum(self._Lf * self._Lf, axis=1)
        dr = np.sum(self._Rf * self._Rf, axis=1)
        return (self._D**2 * np.outer(dl, dr)).reshape(-1)

    def _vjp(self, U, R):
        no, nc = self.n_out, self.n_cols
        Um = U.reshape(-1, no, nc)
        Rm = R.reshape(-1, no, nc)
        a = Um * self._D
        b = Rm * self._D
        aM = a @ self._M
        bM = b @ self._M
        P = np.einsum("tij,tmj->im", aM, b)
        gL = (P + P.T) @ self._Lf
        Na = self._N @ a
        Nb = self._N @ b
        S = np.einsum("tij,til->jl", b, Na)
        gR = (S + S.T) @ self._Rf
        gD = np.sum(Rm * (Na @ self._M) + Um * (Nb @ self._M), axis=0)
        gd = gD * softplus_grad(self._draw)
        return np.concatenate([gL.ravel(), gR.ravel(), gd.ravel()])

    def shape_args(self):
        return {"n_out": self.n_out, "n_in": self.n_in, "bias": self.bias}


class QKroneckerConv(QKroneckerDense):
    """Kronecker form for convolution filters: input channels and kernel taps share R."""

    kind = "kron-conv"

    def __init__(self, n_out: int, n_in: int, kernel: int):
        self.n_out = int(n_out)
        self.n_in = int(n_in)
        self.kernel = int(kernel)
        self.bias = False
        self.n_cols = self.n_in * self.kernel
        self._init_kron()

    def shape_args(self):
        return {"n_out": self.n_out, "n_in": self.n_in, "kernel": self.kernel}


class DenseOperator:
    """A fixed symmetric matrix exposing the same read interface as QParam."""

    def __init__(self, matrix):
        M = np.asarray(matrix, dtype=np.float64)
        if M.ndim != 2 or M.shape[0] != M.shape[1]:
            raise ValueError("operator matrix must be square")
        self.matrix = M
        self.dim = M.shape[0]
        self.qv_calls = 0

    def qv(self, v):
        v = np.asarray(v, dtype=np.float64)
        if v.shape[-1] != self.dim:
            raise ValueError(f"expected vectors of length {self.dim}")
        self.qv_calls += 1 if v.ndim == 1 else v.shape[0]
        return v @ self.matrix.T

    def diag(self):
        return np.diag(self.matrix).copy()

    def dense(self):
        return self.matrix.copy()


_KINDS = {
    "diagonal": QDiagonal,
    "block": QBlockDiagonal,
    "full": QFull,
    "kron": QKroneckerDense,
    "kron-conv": QKroneckerConv,
}


def make_q(kind: str, **shape) -> QParam:
    """Build a parameterization of the given kind at the identity."""
    try:
        cls = _KINDS[kind]
    except KeyError:
        raise ValueError(f"unknown parameterization {kind!r}; choose from {sorted(_KINDS)}") from None
    q = cls(**shape)
    return init_scaled_identity(q, 1.0)


def init_scaled_identity(q, alpha: float, **shape) -> QParam:
    """Reset ``q`` (an instance, or a kind name plus shape) so that Q = alpha I.

    For the Kronecker forms this is L = I, R = I, D = sqrt(alpha) I.
    """
    if not alpha > 0:
        raise ValueError("alpha must be positive")
    if isinstance(q, str):
        q = _KINDS[q](**shape)
    root = np.sqrt(alpha)
    if isinstance(q, QDiagonal):
        q.set_flat_params(np.full(q.dim, softplus_inverse(root)))
    elif isinstance(q, QBlockDiagonal):
        per = np.where(q._is_diag, softplus_inverse(root), 0.0)
        q.set_flat_params(np.tile(per, q.nblocks))
    elif isinstance(q, QKroneckerDense):
        q.set_factors(np.eye(q.n_out), np.eye(q.n_cols), root)
    else:
        raise TypeError(f"cannot initialize {type(q).__name__}")
    return q


# functional aliases matching the operation names used elsewhere


def qv(q: QParam, v) -> np.ndarray:
    return q.qv(v)


def q_diag(q: QParam) -> np.ndarray:
    return q.diag()


def qv_vjp(q: QParam, u, r) -> np.ndarray:
    return q.vjp(u, r)


def flat_params(q: QParam) -> np.ndarray:
    return q.flat_params()


def set_flat_params(q: QParam, theta) -> None:
    q.set_flat_params(theta)


def q_from_state(state: dict) -> QParam:
    state = dict(state)
    kind = state.pop("kind")
    params = np.asarray(state.pop("params"), dtype=np.float64)
    q = _KINDS[kind](**state)
    q.set_flat_params(params)
    return q


def save_q(q: QParam, path) -> None:
    """JSON snapshot; floats are written with repr precision so reloads are exact."""
    Path(path).write_text(json.dumps(q.state()))


def load_q(path) -> QParam:
    return q_from_state(json.loads(Path(path).read_text()))
