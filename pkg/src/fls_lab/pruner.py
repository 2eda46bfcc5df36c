"""OBS scoring and compensation, mask selection, schedules and the gradual prune loop."""

from __future__ import annotations

import dataclasses
import math
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .auxloss import AuxConfig, AuxEstimator, MinibatchFvp
from .fisher import LinearTask, sample_data
from .qparam import DenseOperator
from .records import ExperimentRecord, content_hash

__all__ = [
    "SENTINEL",
    "ModelState",
    "SparsitySchedule",
    "GradualConfig",
    "exponential_schedule",
    "obs_scores",
    "obs_update",
    "select_unstructured",
    "select_nm",
    "select_nm_capped",
    "fine_tune_step",
    "minibatch_gradient",
    "PruneMethod",
    "FLSMethod",
    "FixedOperatorMethod",
    "run_prune_loop",
    "gradual_prune",
]

SENTINEL = np.inf
_TOL = 1e-9


@dataclass
class ModelState:
    """Weights plus alive mask; pruned weights are exactly zero."""

    w: np.ndarray
    mask: np.ndarray = None
    task: Optional[LinearTask] = field(default=None, repr=False)

    def __post_init__(self):
        self.w = np.array(self.w, dtype=np.float64)
        if self.mask is None:
            self.mask = np.ones(self.w.shape, dtype=bool)
        self.mask = np.array(self.mask, dtype=bool)
        if self.mask.shape != self.w.shape or self.w.ndim != 1:
            raise ValueError("weights and mask must be vectors of the same length")
        if np.any(self.w[~self.mask] != 0):
            raise ValueError("pruned weights must be exactly zero")

    @property
    def n(self) -> int:
        return self.w.size

    @property
    def sparsity(self) -> float:
        return float(np.count_nonzero(~self.mask)) / self.n

    def copy(self) -> "ModelState":
        return ModelState(self.w.copy(), self.mask.copy(), self.task)


def exponential_schedule(f0: float, f_end: float, T: int) -> np.ndarray:
    """Sparsities f_0..f_T with density decaying geometrically; f_T is exactly f_end."""
    if not (0 <= f0 < f_end < 1):
        raise ValueError("need 0 <= f0 < f_end < 1")
    if T < 1:
        raise ValueError("need at least one pruning step")
    t = np.arange(T + 1) / T
    dens = (1 - f0) * ((1 - f_end) / (1 - f0)) ** t
    f = 1 - dens
    f[0] = f0
    f[-1] = f_end
    return f


@dataclass(frozen=True)
class SparsitySchedule:
    f0: float
    f_end: float
    T: int

    def __post_init__(self):
        exponential_schedule(self.f0, self.f_end, self.T)

    def values(self) -> np.ndarray:
        return exponential_schedule(self.f0, self.f_end, self.T)

    def targets(self) -> np.ndarray:
        """The sparsities pruned to, f_1..f_T."""
        return self.values()[1:]


@dataclass
class GradualConfig:
    """Knobs of the prune / fine-tune / refine loop.

    ``finetune_steps`` is S; ``aux_steps`` aux updates follow every fine-tune
    step; ``refine_steps`` aux updates follow each prune before fine-tuning.
    ``nm`` = (N, M) switches to semi-structured masks, in which case
    ``schedule.f_end`` must equal N/M.
    """

    schedule: SparsitySchedule
    finetune_steps: int = 0
    lr: float = 0.1
    aux_steps: int = 1
    refine_steps: int = 0
    pretrain_steps: int = 1000
    nm: Optional[tuple] = None
    batch_size: Optional[int] = None

    def __post_init__(self):
        if self.finetune_steps < 0 or self.aux_steps < 0 or self.refine_steps < 0 or self.pretrain_steps < 0:
            raise ValueError("step counts must be non-negative")
        if not self.lr > 0:
            raise ValueError("model learning rate must be positive")
        if self.nm is not None:
            N, M = self.nm
            if not (0 <= N < M):
                raise ValueError("N:M pattern needs 0 <= N < M")
            if abs(self.schedule.f_end - N / M) > _TOL:
                raise ValueError("N:M pruning must end at sparsity N/M")


def obs_scores(state: ModelState, qdiag) -> np.ndarray:
    """rho_i = w_i^2 / (2 [Q]_ii) on alive coordinates; SENTINEL elsewhere."""
    qdiag = np.asarray(qdiag, dtype=np.float64)
    alive = state.mask
    if np.any(qdiag[alive] <= 0):
        raise ValueError("Q diagonal must be positive on alive coordinates")
    rho = np.full(state.n, SENTINEL)
    rho[alive] = state.w[alive] ** 2 / (2.0 * qdiag[alive])
    return rho


def _as_operator(Q):
    if hasattr(Q, "qv") and hasattr(Q, "diag"):
        return Q
    return DenseOperator(Q)


def obs_update(state: ModelState, Q, prune_set) -> ModelState:
    """Delete ``prune_set`` with summed single-weight OBS compensations.

    One Q-vector product: dw = -Q c with c_i = w_i / [Q]_ii on the pruned set.
    """
    Q = _as_operator(Q)
    idx = np.unique(np.asarray(list(prune_set) if not isinstance(prune_set, np.ndarray) else prune_set, dtype=np.int64))
    if idx.size and not np.all(state.mask[idx]):
        raise ValueError("can only prune alive coordinates")
    w = state.w.copy()
    if idx.size:
        d = Q.diag()[idx]
        if np.any(d <= 0):
            raise ValueError("Q diagonal must be positive on the pruned set")
        c = np.zeros(state.n)
        c[idx] = w[idx] / d
        w -= Q.qv(c)
    mask = state.mask.copy()
    mask[idx] = False
    w[~mask] = 0.0
    return ModelState(w, mask, state.task)


def _check_scores(scores, mask):
    scores = np.asarray(scores, dtype=np.float64)
    mask = np.ones(scores.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if scores.ndim != 1 or mask.shape != scores.shape:
        raise ValueError("scores and mask must be vectors of the same length")
    return scores, mask


def select_unstructured(scores, target_sparsity: float, mask=None) -> np.ndarray:
    """Prune lowest-score alive coordinates until ceil(target n) are zero."""
    scores, mask = _check_scores(scores, mask)
    n = scores.size
    k = int(math.ceil(target_sparsity * n - _TOL))
    current = int(np.count_nonzero(~mask))
    if k < current:
        raise ValueError(f"target sparsity {target_sparsity} is below the current {current / n}")
    alive = np.flatnonzero(mask)
    order = alive[np.argsort(scores[alive], kind="stable")]
    out = mask.copy()
    out[order[: k - current]] = False
    return out


def select_nm(scores, N: int, M: int, mask=None) -> np.ndarray:
    """Exactly N zeros in every consecutive block of M; already-pruned entries count first."""
    scores, mask = _check_scores(scores, mask)
    n = scores.size
    if M < 1 or n % M:
        raise ValueError(f"length {n} is not divisible by M={M}")
    if not 0 <= N < M:
        raise ValueError("need 0 <= N < M")
    blocks = np.where(mask, scores, -np.inf).reshape(-1, M)
    if np.any(np.count_nonzero(~mask.reshape(-1, M), axis=1) > N):
        raise ValueError("a block already has more than N pruned entries")
    order = np.argsort(blocks, axis=1, kind="stable")[:, :N]
    out = np.ones((n // M, M), dtype=bool)
    np.put_along_axis(out, order, False, axis=1)
    return out.reshape(-1)


def select_nm_capped(scores, target_sparsity: float, N: int, M: int, mask=None) -> np.ndarray:
    """Greedy lowest-score pruning to ceil(target n) zeros with at most N zeros per block.

    Used for the intermediate steps of gradual N:M pruning; at target N/M it
    reduces to :func:`select_nm`.
    """
    scores, mask = _check_scores(scores, mask)
    n = scores.size
    if n % M:
        raise ValueError(f"length {n} is not divisible by M={M}")
    k = int(math.ceil(target_sparsity * n - _TOL))
    if k > n // M * N:
        raise ValueError("target exceeds the N:M budget")
    current = int(np.count_nonzero(~mask))
    if k < current:
        raise ValueError("target sparsity is below the current sparsity")
    room = N - np.count_nonzero(~mask.reshape(-1, M), axis=1)
    out = mask.copy()
    need = k - current
    for i in np.flatnonzero(mask)[np.argsort(scores[mask], kind="stable")]:
        if need == 0:
            break
        b = i // M
        if room[b] > 0:
            out[i] = False
            room[b] -= 1
            need -= 1
    return out


def fine_tune_step(state: ModelState, Q, gradient, lr: float) -> ModelState:
    """w <- w - lr Q g, then re-zero pruned coordinates. ``Q=None`` means identity."""
    g = np.asarray(gradient, dtype=np.float64)
    if g.shape != state.w.shape:
        raise ValueError("gradient dimension mismatch")
    step = g if Q is None else _as_operator(Q).qv(g)
    w = state.w - lr * step
    w[~state.mask] = 0.0
    return ModelState(w, state.mask, state.task)


def minibatch_gradient(task: LinearTask, w, m: int, rng) -> np.ndarray:
    """Gradient of the mean of 1/2 (x.w - y)^2 over a fresh minibatch."""
    X, y = sample_data(task, m, int(rng.integers(2**63 - 1)))
    return X.T @ (X @ w - y) / m


class PruneMethod:
    """Hooks the prune loop calls; subclasses supply scores and compensation."""

    name = "method"
    compensate = True

    def setup(self, state: ModelState, rng) -> None:
        pass

    def before_prune(self, state: ModelState, rng) -> None:
        pass

    def operator(self):
        return None

    def scores(self, state: ModelState) -> np.ndarray:
        return obs_scores(state, self.operator().diag())

    def after_prune(self, state: ModelState) -> None:
        pass

    def refine(self, steps: int) -> None:
        pass

    def preconditioner(self):
        return self.operator()

    def aux_metric(self) -> float:
        return float("nan")


class FixedOperatorMethod(PruneMethod):
    """OBS with a fixed (already estimated) inverse-Fisher operator."""

    def __init__(self, Q, name: str = "fixed"):
        self.Q = _as_operator(Q)
        self.name = name

    def operator(self):
        return self.Q


class FLSMethod(PruneMethod):
    """OBS with Q(lambda) refined online against masked minibatch Fisher products."""

    def __init__(self, q, aux_config: AuxConfig, task: LinearTask, batch_size: int = None,
                 pretrain_steps: int = 0, name: str = "fls"):
        self.q = q
        self.name = name
        self.source = MinibatchFvp(task, batch_size)
        self.estimator = AuxEstimator(q, self.source, aux_config)
        self.pretrain_steps = pretrain_steps

    def _set_mask(self, mask):
        # probes live in the alive subspace of the masked model
        self.source.mask = mask.copy()
        self.estimator.probe_mask = mask.astype(np.float64)

    def setup(self, state, rng):
        self._set_mask(state.mask)
        self.estimator.run(self.pretrain_steps, record=False)

    def operator(self):
        return self.q

    def after_prune(self, state):
        self._set_mask(state.mask)

    def refine(self, steps):
        self.estimator.run(steps, record=False)

    def aux_metric(self):
        return self.estimator.metric()


def _select(scores, target, mask, nm):
    if nm is None:
        return select_unstructured(scores, target, mask)
    N, M = nm
    if abs(target - N / M) <= _TOL:
        return select_nm(scores, N, M, mask)
    return select_nm_capped(scores, target, N, M, mask)


def run_prune_loop(
    state: ModelState,
    method: PruneMethod,
    targets,
    *,
    finetune_steps: int = 0,
    lr: float = 0.1,
    aux_steps: int = 1,
    refine_steps: int = 0,
    nm=None,
    batch_size: int = None,
    seed: int = 0,
    evaluate=None,
):
    """Algorithm loop shared by FLS and the baselines.

    For each target sparsity: refresh the method's estimate, score, select,
    compensate (if the method does), then ``refine_steps`` aux updates and
    ``finetune_steps`` fine-tune steps each followed by ``aux_steps`` aux
    updates. Returns (final state, metric rows, timing rows). ``evaluate``
    optionally maps (state, method) to extra columns for each row.
    """
    task = state.task
    if task is None:
        raise ValueError("state needs its task for evaluation")
    m = batch_size or task.batch_size
    ft_ss, method_ss = np.random.SeedSequence(seed).spawn(2)
    ft_rng = np.random.default_rng(ft_ss)
    m_rng = np.random.default_rng(method_ss)
    rows, timing = [], []
    clock = [0.0]

    def timed(fn, *a):
        t0 = time.perf_counter()
        out = fn(*a)
        clock[0] += time.perf_counter() - t0
        return out

    def emit(phase, step, predicted):
        row = {
            "method": method.name,
            "phase": phase,
            "step": step,
            "sparsity": state.sparsity,
            "test_mse": task.test_mse(state.w),
            "aux_metric": method.aux_metric(),
            "obs_predicted": predicted,
        }
        if evaluate is not None:
            row.update(evaluate(state, method))
        rows.append(row)
        timing.append({"method": method.name, "phase": phase, "step": step, "wall_ms": clock[0] * 1e3})

    timed(method.setup, state, m_rng)
    emit("initial", 0, 0.0)
    for t, target in enumerate(targets, start=1):
        timed(method.before_prune, state, m_rng)
        scores = timed(method.scores, state)
        new_mask = _select(scores, target, state.mask, nm)
        pruned = np.flatnonzero(state.mask & ~new_mask)
        predicted = float(np.sum(scores[pruned])) if method.compensate else float("nan")
        if method.compensate:
            state = timed(obs_update, state, method.operator(), pruned)
        else:
            w = state.w.copy()
            w[~new_mask] = 0.0
            state = ModelState(w, new_mask, task)
        method.after_prune(state)
        timed(method.refine, refine_steps)
        emit("prune", t, predicted)
        if finetune_steps:
            for _ in range(finetune_steps):
                g = minibatch_gradient(task, state.w, m, ft_rng) * state.mask
                state = timed(fine_tune_step, state, method.preconditioner(), g, lr)
                timed(method.refine, aux_steps)
            emit("finetune", t, float("nan"))
    return state, rows, timing


def gradual_prune(task: LinearTask, Q, aux_config: AuxConfig, gradual_config: GradualConfig,
                  seed: int = 0, w0=None) -> ExperimentRecord:
    """Gradual FLS pruning of the toy task starting from ``w0`` (default: the true weights).

    ``Q`` is refined in place; the aux optimizer's random streams are derived
    from ``seed``.
    """
    gc = gradual_config
    aux_cfg = dataclasses.replace(aux_config, seed=int(np.random.SeedSequence([seed, 1]).generate_state(1)[0]))
    method = FLSMethod(Q, aux_cfg, task, batch_size=gc.batch_size, pretrain_steps=gc.pretrain_steps)
    state = ModelState(task.weights.copy() if w0 is None else w0, None, task)
    _, rows, timing = run_prune_loop(
        state,
        method,
        gc.schedule.targets(),
        finetune_steps=gc.finetune_steps,
        lr=gc.lr,
        aux_steps=gc.aux_steps,
        refine_steps=gc.refine_steps,
        nm=gc.nm,
        batch_size=gc.batch_size,
        seed=seed,
    )
    manifest = {
        "experiment": "gradual-prune",
        "seed": seed,
        "schedule": dataclasses.asdict(gc.schedule),
        "gradual": {k: v for k, v in dataclasses.asdict(gc).items() if k != "schedule"},
        "q_kind": type(Q).__name__,
    }
    manifest["content_hash"] = content_hash(manifest)
    return ExperimentRecord(manifest, {"metrics": rows, "timing": timing})
