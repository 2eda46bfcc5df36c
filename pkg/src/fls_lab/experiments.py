"""The synthetic experiments: each run_* turns an ExperimentConfig into an ExperimentRecord.

Arms (method x learning rate x seed) are independent and may run in a
process pool. A learning rate for each method is picked from its grid by the
quantity the experiment reports for that method, averaged over the first
``tune_seeds`` seeds; every arm is logged in the ``arms`` table. Wall-clock
numbers go to the ``timing`` table so ``metrics.csv`` is reproducible.
"""

from __future__ import annotations

import time
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from . import __version__
from .auxloss import AuxConfig, AuxEstimator, DivergenceError, MinibatchFvp, gradient_flow_closed_form, matrix_flow_descent
from .baselines import (
    ExactMethod,
    MagnitudeMethod,
    NaiveInverseAverage,
    StructuredInverseEstimate,
    WoodburyMethod,
)
from .config import ExperimentConfig
from .fisher import make_linear_task, make_spectral_fisher, sample_gradient_batch
from .metrics import masked_riemannian_distance, normalized_action_error, riemannian_distance
from .pruner import FixedOperatorMethod, FLSMethod, ModelState, exponential_schedule, run_prune_loop
from .qparam import QBlockDiagonal, QDiagonal, QFull, QKroneckerDense, init_scaled_identity
from .records import ExperimentRecord, content_hash

__all__ = [
    "ExperimentError",
    "run_experiment",
    "run_init_dynamics",
    "run_precondition",
    "run_estimation",
    "run_oneshot",
    "run_block_compare",
    "run_gradual",
    "flow_oracle",
    "RUNNERS",
]


class ExperimentError(RuntimeError):
    """An arm failed, or every learning rate of a method diverged."""


# ---------------------------------------------------------------- helpers


def _quiet(fn, item):
    # overflow inside a diverging arm is reported through DivergenceError
    with np.errstate(over="ignore", invalid="ignore"):
        return fn(item)


def _pmap(fn, items, jobs: int):
    items = list(items)
    if jobs <= 1 or len(items) <= 1:
        return [_quiet(fn, x) for x in items]
    with ProcessPoolExecutor(max_workers=jobs) as ex:
        return list(ex.map(_quiet, [fn] * len(items), items))


def _alpha(p):
    return 1.0 / p["gamma"] if p.get("alpha") is None else float(p["alpha"])


def _task(p, seed):
    return make_linear_task(p["n"], p["spectrum"], p["gamma"], seed, batch_size=p.get("batch_size", 100))


def _fisher(p, seed):
    return make_spectral_fisher(p["n"], p["spectrum"], p["gamma"], seed)


def _family_q(name: str, n: int):
    if name == "full":
        return QFull(n)
    if name == "diagonal":
        return QDiagonal(n)
    if name.startswith("block"):
        return QBlockDiagonal(n, int(name[5:]))
    raise ValueError(f"unknown Q family {name!r}")


def _pick(arms, key, grid, tune_seeds, group=None):
    """Lowest mean ``key`` over tune seeds among learning rates with no diverged tune arm."""
    best, best_val = None, np.inf
    for lr in grid:
        rows = [a for a in arms if a["lr"] == lr and a["seed"] in tune_seeds]
        if not rows or any(a["status"] != "ok" for a in rows):
            continue
        val = float(np.mean([a[key] for a in rows]))
        if val < best_val:
            best, best_val = lr, val
    if best is None:
        raise ExperimentError(f"every learning rate diverged for {group}")
    return best


def _tuned(fn, make_item, grid, seeds, tune_n, key, jobs, group):
    """Run the grid on the tune seeds, pick a rate, then run the other seeds at it."""
    tune = list(seeds[: max(1, tune_n)])
    first = _pmap(fn, [make_item(lr, s) for lr in grid for s in tune], jobs)
    lr = _pick(first, key, grid, tune, group)
    rest = _pmap(fn, [make_item(lr, s) for s in seeds if s not in tune], jobs)
    chosen = [a for a in first if a["lr"] == lr] + rest
    bad = [a for a in chosen if a["status"] != "ok"]
    if bad:
        raise ExperimentError(f"{group}: selected rate {lr} diverged on seeds {[a['seed'] for a in bad]}")
    chosen.sort(key=lambda a: seeds.index(a["seed"]))
    return lr, first + rest, chosen


def _arm_rows(arms, selected_lr, fields, extra):
    out = []
    for a in arms:
        row = dict(extra)
        row.update({"lr": a["lr"], "seed": a["seed"], "status": a["status"], "selected": int(a["lr"] == selected_lr)})
        row.update({f: a.get(f) for f in fields})
        out.append(row)
    return out


def _record(cfg: ExperimentConfig, tables: dict, notes: dict = None) -> ExperimentRecord:
    manifest = {
        "experiment": cfg.experiment,
        "params": cfg.params,
        "seeds": list(cfg.seeds),
        "code_version": __version__,
    }
    manifest["content_hash"] = content_hash(manifest)
    if notes:
        manifest["notes"] = notes
    return ExperimentRecord(manifest, {k: v for k, v in tables.items() if v})


# ---------------------------------------------------------------- init-dynamics


def _init_arm(item):
    p, alpha, lr, seed = item
    F = _fisher(p, seed)
    q = init_scaled_identity(QFull(p["n"]), alpha)
    cfg = AuxConfig(
        lr=lr, steps=p["steps"], optimizer=p["optimizer"], u_distribution=p["u_distribution"],
        metric_every=p["metric_every"], seed=seed,
    )
    est = AuxEstimator(q, F, cfg)
    U = F.basis
    target = 1.0 / F.damped_eigenvalues
    snaps = []

    def snap():
        beta = np.einsum("ij,ik,kj->j", U, q.dense(), U)
        for i in range(p["n"]):
            snaps.append({"alpha": alpha, "seed": seed, "step": est.steps, "index": i,
                          "target": float(target[i]), "beta": float(beta[i])})

    status = "ok"
    t0 = time.perf_counter()
    try:
        snap()
        done = 0
        while done < p["steps"]:
            k = min(p["snapshot_every"], p["steps"] - done)
            est.run(k)
            done += k
            snap()
    except DivergenceError:
        status = "diverged"
    tr = est.trace
    curve = [
        {"alpha": alpha, "seed": seed, "step": s, "convergence_metric": m, "aux_loss": a}
        for s, m, a in zip(tr.step, tr.metric, tr.aux_loss)
    ]
    final_m = tr.metric[-1] if tr.metric and status == "ok" else np.inf
    return {
        "alpha": alpha, "lr": lr, "seed": seed, "status": status,
        "final_metric": final_m, "final_abs_metric": abs(final_m),
        "final_aux_loss": tr.aux_loss[-1] if tr.aux_loss and status == "ok" else np.inf,
        "curve": curve, "snapshots": snaps, "wall_ms": (time.perf_counter() - t0) * 1e3,
    }


def flow_oracle(p, alpha: float, seed: int = 0):
    """Dense Q-space descent against the closed-form eigenvalue flow.

    Returns rows (t, max relative error over eigenvalues) and the overall max.
    """
    F = _fisher(p, seed)
    lr = p["flow_lr"]
    steps = int(round(p["flow_time"] / lr))
    every = max(1, int(round(p["flow_record_every"] / lr)))
    times, traj = matrix_flow_descent(F, alpha, lr, steps, record_every=every)
    ref = gradient_flow_closed_form(F.eigenvalues, F.gamma, alpha, 1.0, times)
    err = np.max(np.abs(traj - ref) / np.abs(ref), axis=1)
    rows = [{"alpha": alpha, "seed": seed, "t": float(t), "max_rel_error": float(e)} for t, e in zip(times, err)]
    return rows, float(err.max())


def run_init_dynamics(cfg: ExperimentConfig, jobs: int = 1) -> ExperimentRecord:
    p = cfg.params
    arms = _pmap(_init_arm, [(p, a, lr, s) for a in p["alphas"] for lr in p["lr_grid"] for s in cfg.seeds], jobs)
    metrics, snapshots, arm_rows, timing, flow = [], [], [], [], []
    for alpha in p["alphas"]:
        mine = [a for a in arms if a["alpha"] == alpha]
        lr = _pick(mine, "final_abs_metric", p["lr_grid"], cfg.seeds, f"alpha={alpha}")
        for a in mine:
            arm_rows.append({"alpha": alpha, "lr": a["lr"], "seed": a["seed"], "status": a["status"],
                             "selected": int(a["lr"] == lr), "final_metric": a["final_metric"],
                             "final_aux_loss": a["final_aux_loss"]})
            timing.append({"alpha": alpha, "lr": a["lr"], "seed": a["seed"], "wall_ms": a["wall_ms"]})
            if a["lr"] == lr:
                metrics.extend(dict(r, lr=lr) for r in a["curve"])
                snapshots.extend(a["snapshots"])
        for s in cfg.seeds:
            rows, _ = flow_oracle(p, alpha, s)
            flow.extend(rows)
    return _record(cfg, {"metrics": metrics, "arms": arm_rows, "snapshots": snapshots, "flow": flow, "timing": timing},
                   notes={"selection": "per alpha, lowest |final convergence metric|"})


# ---------------------------------------------------------------- precondition


def _precond_arm(item):
    p, pc, lr, seed = item
    task = _task(p, seed)
    q = init_scaled_identity(_family_q(p["q"], p["n"]), _alpha(p))
    cfg = AuxConfig(lr=lr, steps=p["steps"], preconditioner=pc, metric_every=p["metric_every"], seed=seed)
    est = AuxEstimator(q, MinibatchFvp(task, p["batch_size"]), cfg)
    t0 = time.perf_counter()
    status = "ok"
    try:
        est.run()
    except DivergenceError:
        status = "diverged"
    tr = est.trace
    ok = status == "ok"
    return {
        "preconditioner": pc, "lr": lr, "seed": seed, "status": status,
        "final_metric": tr.metric[-1] if ok else np.inf,
        "final_abs_metric": abs(tr.metric[-1]) if ok else np.inf,
        "final_aux_loss": tr.aux_loss[-1] if ok else np.inf,
        "qv_calls": q.qv_calls,
        "curve": [
            {"preconditioner": pc, "seed": seed, "step": s, "minibatches": mb, "convergence_metric": m, "aux_loss": a}
            for s, mb, m, a in zip(tr.step, tr.minibatches, tr.metric, tr.aux_loss)
        ],
        "wall_ms": (time.perf_counter() - t0) * 1e3,
    }


def run_precondition(cfg: ExperimentConfig, jobs: int = 1) -> ExperimentRecord:
    p = cfg.params
    metrics, arm_rows, timing = [], [], []
    for pc in p["preconditioners"]:
        lr, arms, chosen = _tuned(
            _precond_arm, lambda lr, s: (p, pc, lr, s), p["lr_grid"], cfg.seeds, p["tune_seeds"],
            "final_abs_metric", jobs, f"preconditioner={pc}",
        )
        for a in chosen:
            metrics.extend(dict(r, lr=lr) for r in a["curve"])
        arm_rows += _arm_rows(arms, lr, ["final_metric", "final_aux_loss", "qv_calls"], {"preconditioner": pc})
        timing += [{"preconditioner": pc, "lr": a["lr"], "seed": a["seed"], "wall_ms": a["wall_ms"]} for a in arms]
    return _record(cfg, {"metrics": metrics, "arms": arm_rows, "timing": timing},
                   notes={"selection": "per preconditioner, lowest mean |final convergence metric| on tune seeds"})


# ---------------------------------------------------------------- estimation

_PANELS = {"B": "diagonal", "C": "block", "D": "kronecker"}


def _structure(p, panel):
    kind = _PANELS[panel]
    if kind == "diagonal":
        return "diagonal", (lambda: QDiagonal(p["n"]))
    if kind == "block":
        b = p["block"]
        return ("block", b), (lambda: QBlockDiagonal(p["n"], b))
    no, ni = p["kron_shape"]
    return ("kronecker", no, ni), (lambda: QKroneckerDense(no, ni))


def _batch_seed(seed, k):
    return [seed, 7, k]


def _estimation_fishleg_arm(item):
    p, panel, lr, seed = item
    F = _fisher(p, seed)
    t0 = time.perf_counter()
    if panel == "A":
        q = init_scaled_identity(QFull(p["n"]), p["alpha"])
        cfg = AuxConfig(lr=lr, seed=seed)
        target = F.inverse_damped()

        def measure():
            return riemannian_distance(q.dense(), target)
    else:
        _, make = _structure(p, panel)
        Su = F.inverse()
        q = init_scaled_identity(make(), p["alpha"])
        cfg = AuxConfig(lr=lr, seed=seed, u_distribution="covariance", u_covariance=Su)

        def measure():
            return normalized_action_error(q, F, Su, samples=p["metric_samples"], seed=seed)

    est = AuxEstimator(q, MinibatchFvp(F, p["batch_size"]), cfg)
    curve = [{"panel": panel, "method": "fishleg", "seed": seed, "minibatches": 0, "value": measure()}]
    status = "ok"
    try:
        while est.minibatches < p["minibatches"]:
            est.run(min(p["record_every"], p["minibatches"] - est.minibatches), record=False)
            v = measure()
            if not np.isfinite(v):
                raise DivergenceError("non-finite error")
            curve.append({"panel": panel, "method": "fishleg", "seed": seed, "minibatches": est.minibatches, "value": v})
    except (DivergenceError, ValueError, np.linalg.LinAlgError):
        status = "diverged"
    return {"panel": panel, "lr": lr, "seed": seed, "status": status,
            "final": curve[-1]["value"] if status == "ok" else np.inf, "curve": curve,
            "wall_ms": (time.perf_counter() - t0) * 1e3}


def _estimation_baseline_arm(item):
    p, panel, seed = item
    F = _fisher(p, seed)
    t0 = time.perf_counter()
    if panel == "A":
        acc = NaiveInverseAverage(p["n"], p["gamma"])
        target = F.inverse_damped()
        method = "est-inv-avg"

        def measure():
            return riemannian_distance(acc.mean, target)
    else:
        structure, _ = _structure(p, panel)
        acc = StructuredInverseEstimate(p["n"], structure, p["gamma"])
        Su = F.inverse()
        method = "approx-inv"

        def measure():
            return normalized_action_error(acc.result(), F, Su, samples=p["metric_samples"], seed=seed)

    curve = []
    for k in range(1, p["minibatches"] + 1):
        acc.update(sample_gradient_batch(F, _batch_seed(seed, k), m=p["batch_size"]))
        if k % p["record_every"] == 0 or k == p["minibatches"]:
            curve.append({"panel": panel, "method": method, "seed": seed, "minibatches": k, "value": measure()})
    return {"panel": panel, "seed": seed, "status": "ok", "final": curve[-1]["value"], "curve": curve,
            "wall_ms": (time.perf_counter() - t0) * 1e3}


def run_estimation(cfg: ExperimentConfig, jobs: int = 1) -> ExperimentRecord:
    p = cfg.params
    metrics, arm_rows, timing = [], [], []
    for panel in p["panels"]:
        grid = p["lr_grid_a"] if panel == "A" else p["lr_grid_structured"]
        lr, arms, chosen = _tuned(
            _estimation_fishleg_arm, lambda lr, s: (p, panel, lr, s), grid, cfg.seeds, p["tune_seeds"],
            "final", jobs, f"panel {panel}",
        )
        base = _pmap(_estimation_baseline_arm, [(p, panel, s) for s in cfg.seeds], jobs)
        for a in chosen:
            metrics.extend(a["curve"])
        for b in base:
            metrics.extend(b["curve"])
        arm_rows += _arm_rows(arms, lr, ["final"], {"panel": panel, "method": "fishleg"})
        timing += [{"panel": panel, "method": "fishleg", "lr": a["lr"], "seed": a["seed"], "wall_ms": a["wall_ms"]}
                   for a in arms]
        timing += [{"panel": panel, "method": "baseline", "lr": None, "seed": b["seed"], "wall_ms": b["wall_ms"]}
                   for b in base]
    return _record(cfg, {"metrics": metrics, "arms": arm_rows, "timing": timing}, notes={
        "minibatches": "one minibatch consumed per FishLeg aux step",
        "selection": "per panel, lowest mean final error on tune seeds",
    })


# ---------------------------------------------------------------- oneshot


def _oneshot_targets(p):
    n = p["n"]
    k = int(round(p["max_sparsity"] * n))
    return np.arange(1, k + 1) / n


def _keep_recorded(rows, p, method, seed, extra=None):
    want = np.asarray(p["record_sparsities"], dtype=float)
    out = []
    for r in rows:
        if r["phase"] == "finetune":
            continue
        if np.any(np.abs(want - r["sparsity"]) < 1e-9):
            row = {"method": method, "seed": seed, "sparsity": r["sparsity"], "test_mse": r["test_mse"]}
            row.update(extra or {})
            out.append(row)
    return out


def _oneshot_fls_arm(item):
    p, family, lr, seed = item
    task = _task(p, seed)
    q = init_scaled_identity(_family_q(family, p["n"]), _alpha(p))
    est = AuxEstimator(q, MinibatchFvp(task, p["batch_size"]), AuxConfig(lr=lr, seed=seed))
    t0 = time.perf_counter()
    try:
        est.run(p["steps"], record=False)
    except DivergenceError:
        return {"family": family, "lr": lr, "seed": seed, "status": "diverged", "aux_loss": np.inf,
                "convergence_metric": np.inf, "rows": [], "wall_ms": (time.perf_counter() - t0) * 1e3}
    loss, metric = est.loss(), est.metric()
    wall = (time.perf_counter() - t0) * 1e3
    _, rows, _ = run_prune_loop(ModelState(task.weights.copy(), None, task), FixedOperatorMethod(q, f"fls-{family}"),
                                _oneshot_targets(p), seed=seed)
    return {"family": family, "lr": lr, "seed": seed, "status": "ok", "aux_loss": loss, "convergence_metric": metric,
            "rows": _keep_recorded(rows, p, f"fls-{family}", seed), "wall_ms": wall}


def _oneshot_baseline_arm(item):
    p, name, seed = item
    task = _task(p, seed)
    if name == "magnitude":
        method = MagnitudeMethod()
    elif name == "exact":
        method = ExactMethod(task)
    else:
        method = WoodburyMethod(task, p["n"], p["mfac_rank"], name="mfac")
    _, rows, timing = run_prune_loop(ModelState(task.weights.copy(), None, task), method, _oneshot_targets(p), seed=seed)
    return {"method": name, "seed": seed, "rows": _keep_recorded(rows, p, name, seed), "wall_ms": timing[-1]["wall_ms"]}


def run_oneshot(cfg: ExperimentConfig, jobs: int = 1) -> ExperimentRecord:
    p = cfg.params
    metrics, aux_rows, arm_rows, timing = [], [], [], []
    for fam in p["families"]:
        lr, arms, chosen = _tuned(
            _oneshot_fls_arm, lambda lr, s: (p, fam, lr, s), p["lr_grid"], cfg.seeds, p["tune_seeds"],
            "aux_loss", jobs, f"family {fam}",
        )
        for a in chosen:
            metrics.extend(a["rows"])
            aux_rows.append({"family": fam, "seed": a["seed"], "lr": lr, "aux_loss": a["aux_loss"],
                             "convergence_metric": a["convergence_metric"]})
        arm_rows += _arm_rows(arms, lr, ["aux_loss", "convergence_metric"], {"family": fam})
        timing += [{"method": f"fls-{fam}", "lr": a["lr"], "seed": a["seed"], "wall_ms": a["wall_ms"]} for a in arms]
    base = _pmap(_oneshot_baseline_arm, [(p, b, s) for b in p["baselines"] for s in cfg.seeds], jobs)
    for b in base:
        metrics.extend(b["rows"])
        timing.append({"method": b["method"], "lr": None, "seed": b["seed"], "wall_ms": b["wall_ms"]})
    return _record(cfg, {"metrics": metrics, "aux": aux_rows, "arms": arm_rows, "timing": timing}, notes={
        "protocol": "one weight removed per step up to max_sparsity, no fine-tuning; FLS Q fixed after fitting",
        "selection": "per family, lowest mean final aux loss on tune seeds",
    })


# ---------------------------------------------------------------- block-compare


def _distance_eval(task):
    def ev(state, method):
        return {"masked_distance": masked_riemannian_distance(method.operator().dense(), task, state.mask)}
    return ev


def _block_rows(rows, timing, method, block, seed):
    out, tim = [], []
    for r, t in zip(rows, timing):
        if r["phase"] != "prune":
            continue
        out.append({"method": method, "block": block, "seed": seed, "sparsity": r["sparsity"],
                    "test_mse": r["test_mse"], "masked_distance": r["masked_distance"]})
        tim.append({"method": method, "block": block, "seed": seed, "sparsity": r["sparsity"], "wall_ms": t["wall_ms"]})
    return out, tim


def _block_fls_arm(item):
    p, block, lr, seed = item
    task = _task(p, seed)
    q = init_scaled_identity(QBlockDiagonal(p["n"], block), _alpha(p))
    method = FLSMethod(q, AuxConfig(lr=lr, seed=seed), task,
                       batch_size=p["batch_size"], pretrain_steps=p["pretrain_steps"], name="fls")
    try:
        _, rows, timing = run_prune_loop(ModelState(task.weights.copy(), None, task), method, p["sparsities"],
                                         refine_steps=p["refine_steps"], seed=seed, evaluate=_distance_eval(task))
    except (DivergenceError, ValueError, np.linalg.LinAlgError):
        return {"block": block, "lr": lr, "seed": seed, "status": "diverged", "mean_distance": np.inf,
                "rows": [], "timing": []}
    out, tim = _block_rows(rows, timing, "fls", block, seed)
    return {"block": block, "lr": lr, "seed": seed, "status": "ok",
            "mean_distance": float(np.mean([r["masked_distance"] for r in out])), "rows": out, "timing": tim}


def _block_woodbury_arm(item):
    p, block, seed = item
    task = _task(p, seed)
    method = WoodburyMethod(task, block, p["woodbury_grads"], name="woodbury")
    _, rows, timing = run_prune_loop(ModelState(task.weights.copy(), None, task), method, p["sparsities"],
                                     seed=seed, evaluate=_distance_eval(task))
    out, tim = _block_rows(rows, timing, "woodbury", block, seed)
    return {"rows": out, "timing": tim}


def run_block_compare(cfg: ExperimentConfig, jobs: int = 1) -> ExperimentRecord:
    p = cfg.params
    metrics, arm_rows, timing = [], [], []
    for block in p["blocks"]:
        lr, arms, chosen = _tuned(
            _block_fls_arm, lambda lr, s: (p, block, lr, s), p["lr_grid"], cfg.seeds, p["tune_seeds"],
            "mean_distance", jobs, f"block {block}",
        )
        for a in chosen:
            metrics.extend(a["rows"])
            timing.extend(a["timing"])
        arm_rows += _arm_rows(arms, lr, ["mean_distance"], {"block": block})
        for w in _pmap(_block_woodbury_arm, [(p, block, s) for s in cfg.seeds], jobs):
            metrics.extend(w["rows"])
            timing.extend(w["timing"])
    return _record(cfg, {"metrics": metrics, "arms": arm_rows, "timing": timing}, notes={
        "selection": "per block size, lowest mean masked distance on tune seeds",
    })


# ---------------------------------------------------------------- gradual


_MSE_BLOWUP = 1e6


def _gradual_method(p, name, task, seed):
    if name == "fls":
        q = init_scaled_identity(_family_q(p["q"], p["n"]), _alpha(p))
        return FLSMethod(q, AuxConfig(lr=p["aux_lr"], seed=seed), task, batch_size=p["batch_size"],
                         pretrain_steps=p["pretrain_steps"], name="fls")
    if name == "magnitude":
        return MagnitudeMethod()
    if name == "exact":
        return ExactMethod(task)
    return WoodburyMethod(task, p["woodbury_block"], p["woodbury_grads"], name="woodbury")


def _gradual_arm(item):
    p, name, lr, seed = item
    task = _task(p, seed)
    method = _gradual_method(p, name, task, seed)
    targets = exponential_schedule(p["f0"], p["f_end"], p["prune_steps"])[1:]
    try:
        _, rows, timing = run_prune_loop(
            ModelState(task.weights.copy(), None, task), method, targets, finetune_steps=p["finetune_steps"], lr=lr,
            aux_steps=p["aux_steps"], nm=None if p["nm"] is None else tuple(p["nm"]), batch_size=p["batch_size"],
            seed=seed,
        )
    except DivergenceError:
        return {"method": name, "lr": lr, "seed": seed, "status": "diverged", "final_mse": np.inf, "rows": [], "timing": []}
    final = rows[-1]["test_mse"]
    mses = np.array([r["test_mse"] for r in rows])
    if not np.all(np.isfinite(mses)) or mses.max() > _MSE_BLOWUP * mses[0]:
        return {"method": name, "lr": lr, "seed": seed, "status": "diverged", "final_mse": np.inf, "rows": [], "timing": []}
    keep = [{"method": name, "seed": seed, **{k: r[k] for k in ("phase", "step", "sparsity", "test_mse", "aux_metric")}}
            for r in rows]
    tim = [{"method": name, "seed": seed, "phase": t["phase"], "step": t["step"], "wall_ms": t["wall_ms"]} for t in timing]
    return {"method": name, "lr": lr, "seed": seed, "status": "ok", "final_mse": final, "rows": keep, "timing": tim}


def run_gradual(cfg: ExperimentConfig, jobs: int = 1) -> ExperimentRecord:
    p = cfg.params
    if p["nm"] is not None:
        N, M = p["nm"]
        if abs(p["f_end"] - N / M) > 1e-12:
            raise ExperimentError("N:M pruning needs f_end = N/M")
    metrics, arm_rows, timing = [], [], []
    for name in p["methods"]:
        grid = p["lr_grid"][name]
        lr, arms, chosen = _tuned(_gradual_arm, lambda lr, s: (p, name, lr, s), grid, cfg.seeds, len(cfg.seeds),
                                  "final_mse", jobs, f"method {name}")
        for a in chosen:
            metrics.extend(dict(r, lr=lr) for r in a["rows"])
            timing.extend(a["timing"])
        arm_rows += _arm_rows(arms, lr, ["final_mse"], {"method": name})
    return _record(cfg, {"metrics": metrics, "arms": arm_rows, "timing": timing}, notes={
        "selection": "per method, lowest mean final test MSE over all seeds",
    })


RUNNERS = {
    "init-dynamics": run_init_dynamics,
    "precondition": run_precondition,
    "estimation": run_estimation,
    "oneshot": run_oneshot,
    "block-compare": run_block_compare,
    "gradual": run_gradual,
}


def run_experiment(cfg: ExperimentConfig, jobs: int = 1) -> ExperimentRecord:
    return RUNNERS[cfg.experiment](cfg, jobs=jobs)
