"""Comparison methods: magnitude, exact oracle, estimate-then-invert and Woodbury inverses."""

from __future__ import annotations

import dataclasses

import numpy as np

from .fisher import LinearTask, exact_masked_inverse, sample_gradient_batch
from .pruner import (
    SENTINEL,
    GradualConfig,
    ModelState,
    PruneMethod,
    SparsitySchedule,
    run_prune_loop,
)
from .qparam import DenseOperator, QBlockDiagonal, QDiagonal, QKroneckerDense
from .records import ExperimentRecord, content_hash

__all__ = [
    "magnitude_scores",
    "NaiveInverseAverage",
    "naive_est_inv_avg",
    "WoodburyBlockInverse",
    "woodbury_update",
    "nearest_kronecker",
    "StructuredInverseEstimate",
    "approx_then_invert",
    "MagnitudeMethod",
    "ExactMethod",
    "WoodburyMethod",
    "exact_fls_oracle_prune",
]


def magnitude_scores(state: ModelState) -> np.ndarray:
    rho = np.full(state.n, SENTINEL)
    rho[state.mask] = np.abs(state.w[state.mask])
    return rho


def _grads(batch):
    return batch.grads if hasattr(batch, "grads") else np.asarray(batch, dtype=np.float64)


def _damped_inverse(G, gamma):
    n = G.shape[1]
    A = G.T @ G / G.shape[0] + gamma * np.eye(n)
    inv = np.linalg.inv(A)
    return 0.5 * (inv + inv.T)


class NaiveInverseAverage:
    """Running mean of per-batch inverses ((1/m) G^T G + gamma I)^-1."""

    def __init__(self, n: int, gamma: float):
        if not gamma > 0:
            raise ValueError("damping must be positive")
        self.gamma = gamma
        self.mean = np.zeros((n, n))
        self.count = 0

    def update(self, batch) -> np.ndarray:
        inv = _damped_inverse(_grads(batch), self.gamma)
        self.count += 1
        self.mean += (inv - self.mean) / self.count
        return self.mean


def naive_est_inv_avg(batches, gamma: float, snapshots: bool = False):
    """Average of inverted minibatch Fisher estimates.

    With ``snapshots=True`` returns (final, [running mean after each batch]).
    """
    batches = list(batches)
    if not batches:
        raise ValueError("need at least one batch")
    acc = NaiveInverseAverage(_grads(batches[0]).shape[1], gamma)
    snaps = []
    for b in batches:
        acc.update(b)
        if snapshots:
            snaps.append(acc.mean.copy())
    return (acc.mean.copy(), snaps) if snapshots else acc.mean.copy()


class WoodburyBlockInverse:
    """Per-block (gamma I + (1/m) sum g g^T)^-1 via Sherman-Morrison updates.

    ``num_grads`` is the declared total m; every prefix of k gradients holds
    the exact inverse of gamma I + (1/m) sum_{j<=k} g_j g_j^T.
    """

    def __init__(self, n: int, block: int, gamma: float, num_grads: int):
        if n % block:
            raise ValueError(f"block size {block} does not divide {n}")
        if not gamma > 0 or num_grads < 1:
            raise ValueError("need gamma > 0 and num_grads >= 1")
        self.n, self.block, self.gamma, self.num_grads = n, block, gamma, num_grads
        self.blocks = np.tile(np.eye(block) / gamma, (n // block, 1, 1))
        self.consumed = 0

    def update(self, g) -> None:
        g = np.asarray(g, dtype=np.float64)
        if g.shape != (self.n,):
            raise ValueError("gradient dimension mismatch")
        gb = g.reshape(-1, self.block)
        Bg = np.matmul(self.blocks, gb[:, :, None])[:, :, 0]
        den = self.num_grads + np.einsum("ki,ki->k", gb, Bg)
        assert np.all(den > 0), "Sherman-Morrison denominator must be positive"
        self.blocks -= Bg[:, :, None] * Bg[:, None, :] / den[:, None, None]
        self.consumed += 1

    def update_many(self, G) -> None:
        for g in _grads(G):
            self.update(g)

    @classmethod
    def from_gradients(cls, G, block: int, gamma: float) -> "WoodburyBlockInverse":
        G = _grads(G)
        W = cls(G.shape[1], block, gamma, G.shape[0])
        W.update_many(G)
        return W

    def qv(self, v):
        v = np.asarray(v, dtype=np.float64)
        V = np.atleast_2d(v).reshape(v.shape[0] if v.ndim == 2 else 1, -1, self.block)
        out = np.einsum("kij,mkj->mki", self.blocks, V).reshape(V.shape[0], self.n)
        return out[0] if v.ndim == 1 else out

    def diag(self):
        return np.diagonal(self.blocks, axis1=1, axis2=2).reshape(-1).copy()

    def dense(self):
        out = np.zeros((self.n, self.n))
        b = self.block
        for k, B in enumerate(self.blocks):
            out[k * b:(k + 1) * b, k * b:(k + 1) * b] = B
        return out


def woodbury_update(W: WoodburyBlockInverse, g) -> WoodburyBlockInverse:
    W.update(g)
    return W


def nearest_kronecker(F, shape_a: int, shape_b: int) -> tuple:
    """Factors (A, B) minimizing |F - A kron B|_F via the permuted SVD.

    Both factors carry sqrt of the leading singular value and A has
    non-negative trace.
    """
    F = np.asarray(F, dtype=np.float64)
    p, q = shape_a, shape_b
    if F.shape != (p * q, p * q):
        raise ValueError("matrix size does not match factor sizes")
    Rm = F.reshape(p, q, p, q).transpose(0, 2, 1, 3).reshape(p * p, q * q)
    U, s, Vt = np.linalg.svd(Rm, full_matrices=False)
    A = np.sqrt(s[0]) * U[:, 0].reshape(p, p)
    B = np.sqrt(s[0]) * Vt[0].reshape(q, q)
    if np.trace(A) < 0:
        A, B = -A, -B
    return 0.5 * (A + A.T), 0.5 * (B + B.T)


def _spd_inverse_cholesky(A):
    inv = np.linalg.inv(0.5 * (A + A.T))
    return np.linalg.cholesky(0.5 * (inv + inv.T))


class StructuredInverseEstimate:
    """Approximate F in a structured form from minibatches, then invert.

    ``structure`` is "diagonal", ("block", b) or ("kronecker", n_out, n_in).
    Estimates are running averages so :meth:`result` may be called after
    every batch.
    """

    def __init__(self, n: int, structure, gamma: float):
        self.n = n
        self.gamma = gamma
        self.structure = structure if isinstance(structure, tuple) else (structure,)
        kind = self.structure[0]
        if kind == "block":
            b = self.structure[1]
            if n % b:
                raise ValueError(f"block size {b} does not divide {n}")
            self._acc = np.zeros((n // b, b, b))
        elif kind == "kronecker":
            no, ni = self.structure[1:]
            if no * ni != n:
                raise ValueError("Kronecker factor sizes do not multiply to n")
            self._acc = (np.zeros((no, no)), np.zeros((ni, ni)))
        elif kind == "diagonal":
            self._acc = np.zeros(n)
        else:
            raise ValueError(f"unknown structure {kind!r}")
        self.count = 0

    def update(self, batch) -> None:
        G = _grads(batch)
        if G.shape[1] != self.n:
            raise ValueError("batch dimension mismatch")
        m = G.shape[0]
        kind = self.structure[0]
        self.count += 1
        k = 1.0 / self.count
        if kind == "diagonal":
            self._acc += k * (np.einsum("ij,ij->j", G, G) / m - self._acc)
        elif kind == "block":
            b = self.structure[1]
            Gb = G.reshape(m, -1, b).transpose(1, 0, 2)
            est = np.matmul(Gb.transpose(0, 2, 1), Gb) / m
            self._acc += k * (est - self._acc)
        else:
            A, B = nearest_kronecker(G.T @ G / m, *self.structure[1:])
            self._acc[0][...] += k * (A - self._acc[0])
            self._acc[1][...] += k * (B - self._acc[1])

    def result(self):
        if self.count == 0:
            raise ValueError("no batches consumed")
        kind = self.structure[0]
        g = self.gamma
        if kind == "diagonal":
            return QDiagonal.from_diag(1.0 / (self._acc + g))
        if kind == "block":
            b = self.structure[1]
            inv = np.linalg.inv(self._acc + g * np.eye(b))
            dense = np.zeros((self.n, self.n))
            for k, B in enumerate(inv):
                dense[k * b:(k + 1) * b, k * b:(k + 1) * b] = 0.5 * (B + B.T)
            return QBlockDiagonal.from_dense(dense, b)
        no, ni = self.structure[1:]
        A, B = self._acc
        r = np.sqrt(g)
        q = QKroneckerDense(no, ni)
        q.set_factors(_spd_inverse_cholesky(A + r * np.eye(no)), _spd_inverse_cholesky(B + r * np.eye(ni)), 1.0)
        return q


def approx_then_invert(batches, structure, gamma: float):
    """Structured estimate of F averaged over ``batches``, damped, then inverted."""
    batches = list(batches)
    if not batches:
        raise ValueError("need at least one batch")
    est = StructuredInverseEstimate(_grads(batches[0]).shape[1], structure, gamma)
    for b in batches:
        est.update(b)
    return est.result()


class MagnitudeMethod(PruneMethod):
    """Prune smallest |w|; no compensation, plain gradient fine-tuning."""

    name = "magnitude"
    compensate = False

    def scores(self, state):
        return magnitude_scores(state)

    def preconditioner(self):
        return None


class ExactMethod(PruneMethod):
    """OBS with the exact masked inverse damped Fisher, recomputed before every prune."""

    name = "exact"

    def __init__(self, task: LinearTask):
        self.task = task
        self.Q = None

    def setup(self, state, rng):
        self.Q = DenseOperator(exact_masked_inverse(self.task, state.mask))

    def before_prune(self, state, rng):
        self.Q = DenseOperator(exact_masked_inverse(self.task, state.mask))

    def after_prune(self, state):
        self.Q = DenseOperator(exact_masked_inverse(self.task, state.mask))

    def operator(self):
        return self.Q


class WoodburyMethod(PruneMethod):
    """Block Woodbury inverse rebuilt from ``num_grads`` fresh masked gradients per prune.

    ``block == n`` with a small ``num_grads`` gives the global low-rank
    (M-FAC style) estimator.
    """

    def __init__(self, task: LinearTask, block: int, num_grads: int = 512, name: str = None):
        self.task = task
        self.block = block
        self.num_grads = num_grads
        self.name = name or f"woodbury-b{block}"
        self.W = None

    def _rebuild(self, state, rng):
        seed = int(rng.integers(2**63 - 1))
        G = sample_gradient_batch(self.task, seed, m=self.num_grads, mask=state.mask)
        self.W = WoodburyBlockInverse.from_gradients(G, self.block, self.task.gamma)

    def setup(self, state, rng):
        self._rebuild(state, rng)

    def before_prune(self, state, rng):
        self._rebuild(state, rng)

    def operator(self):
        return self.W


def exact_fls_oracle_prune(task: LinearTask, schedule, gradual_config: GradualConfig = None,
                           seed: int = 0, w0=None) -> ExperimentRecord:
    """Prune along ``schedule`` (a SparsitySchedule or explicit target list) with the exact oracle."""
    targets = schedule.targets() if isinstance(schedule, SparsitySchedule) else np.asarray(schedule, dtype=float)
    gc = gradual_config
    kw = {}
    if gc is not None:
        kw = dict(finetune_steps=gc.finetune_steps, lr=gc.lr, nm=gc.nm, batch_size=gc.batch_size)
    state = ModelState(task.weights.copy() if w0 is None else w0, None, task)
    _, rows, timing = run_prune_loop(state, ExactMethod(task), targets, seed=seed, **kw)
    manifest = {
        "experiment": "exact-oracle-prune",
        "seed": seed,
        "targets": [float(t) for t in targets],
        "gradual": None if gc is None else {k: v for k, v in dataclasses.asdict(gc).items() if k != "schedule"},
    }
    manifest["content_hash"] = content_hash(manifest)
    return ExperimentRecord(manifest, {"metrics": rows, "timing": timing})
