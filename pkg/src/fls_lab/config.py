"""Experiment configuration: TOML files merged over per-experiment defaults."""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .fisher import parse_spectrum

__all__ = ["ExperimentConfig", "DEFAULTS", "EXPERIMENT_IDS", "load_config", "make_config", "ConfigError"]


class ConfigError(ValueError):
    pass


_ONESHOT_FAMILIES = ["full", "diagonal", "block5", "block10", "block20", "block50"]

DEFAULTS = {
    "init-dynamics": {
        "n": 100,
        "spectrum": "power:2",
        "gamma": 1e-3,
        "alphas": [1.0, 1000.0],
        "lr_grid": [0.01, 0.02, 0.05, 0.1, 0.2, 0.5],
        "optimizer": "sgd",
        "u_distribution": "basis",
        "steps": 5000,
        "metric_every": 50,
        "snapshot_every": 1000,
        "flow_lr": 2e-4,
        "flow_time": 10.0,
        "flow_record_every": 0.5,
        "seeds": [0],
    },
    "precondition": {
        "n": 100,
        "spectrum": "exp:10",
        "gamma": 0.01,
        "batch_size": 100,
        "q": "full",
        "alpha": None,
        "steps": 2000,
        "metric_every": 50,
        "preconditioners": ["identity", "q"],
        "lr_grid": [0.01, 0.03, 0.1],
        "tune_seeds": 3,
        "seeds": list(range(10)),
    },
    "estimation": {
        "n": 100,
        "spectrum": "exp:30",
        "gamma": 0.01,
        "batch_size": 100,
        "minibatches": 2000,
        "record_every": 50,
        "panels": ["A", "B", "C", "D"],
        "alpha": 1.0,
        "block": 20,
        "kron_shape": [5, 20],
        "lr_grid_a": [0.001, 0.003, 0.01],
        "lr_grid_structured": [0.003, 0.01, 0.03],
        "tune_seeds": 3,
        "metric_samples": 4096,
        "seeds": list(range(20)),
    },
    "oneshot": {
        "n": 100,
        "spectrum": "exp:10",
        "gamma": 0.01,
        "batch_size": 100,
        "alpha": None,
        "steps": 3000,
        "families": _ONESHOT_FAMILIES,
        "baselines": ["magnitude", "mfac", "exact"],
        "mfac_rank": 10,
        "lr_grid": [0.01, 0.02, 0.05, 0.1],
        "tune_seeds": 3,
        "max_sparsity": 0.9,
        "record_sparsities": [0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9],
        "seeds": list(range(10)),
    },
    "block-compare": {
        "n": 500,
        "spectrum": "exp:10",
        "gamma": 0.01,
        "batch_size": 100,
        "alpha": None,
        "blocks": [5, 10, 20, 50],
        "pretrain_steps": 2000,
        "refine_steps": 20,
        "woodbury_grads": 512,
        "lr_grid": [0.01, 0.02, 0.05],
        "tune_seeds": 1,
        "sparsities": [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9],
        "seeds": [0, 1, 2],
    },
    "gradual": {
        "n": 100,
        "spectrum": "exp:10",
        "gamma": 0.01,
        "batch_size": 100,
        "alpha": None,
        "q": "full",
        "methods": ["fls", "magnitude", "exact"],
        "f0": 0.0,
        "f_end": 0.9,
        "prune_steps": 10,
        "finetune_steps": 50,
        "aux_steps": 1,
        "pretrain_steps": 2000,
        "aux_lr": 0.02,
        "lr_grid": {"fls": [0.1, 0.3], "exact": [0.1, 0.3], "magnitude": [0.1, 0.3], "woodbury": [0.1, 0.3]},
        "woodbury_block": 20,
        "woodbury_grads": 512,
        "nm": None,
        "seeds": [0, 1, 2],
    },
}

EXPERIMENT_IDS = tuple(DEFAULTS)

_METHOD_KEYS = {
    "gradual": ("methods", {"fls", "magnitude", "exact", "woodbury"}),
    "oneshot": ("baselines", {"magnitude", "mfac", "exact"}),
    "precondition": ("preconditioners", {"identity", "q"}),
    "estimation": ("panels", {"A", "B", "C", "D"}),
}


@dataclass
class ExperimentConfig:
    experiment: str
    params: dict
    seeds: list
    out: str = None
    source: str = None
    extra: dict = field(default_factory=dict)

    def __getitem__(self, key):
        return self.params[key]

    def get(self, key, default=None):
        return self.params.get(key, default)

    def manifest(self) -> dict:
        return {"experiment": self.experiment, "params": self.params, "seeds": list(self.seeds)}


def _validate(experiment: str, params: dict) -> None:
    if "spectrum" in params:
        try:
            parse_spectrum(params["spectrum"])
        except ValueError as exc:
            raise ConfigError(f"bad spectrum: {exc}") from None
    if "gamma" in params and not params["gamma"] > 0:
        raise ConfigError("gamma must be positive")
    if experiment in _METHOD_KEYS:
        key, allowed = _METHOD_KEYS[experiment]
        unknown = set(params[key]) - allowed
        if unknown:
            raise ConfigError(f"{key} not implemented: {sorted(unknown)}")
    if experiment == "oneshot":
        for fam in params["families"]:
            if fam not in ("full", "diagonal") and not (fam.startswith("block") and fam[5:].isdigit()):
                raise ConfigError(f"unknown Q family {fam!r}")
    for key in ("lr_grid", "lr_grid_a", "lr_grid_structured"):
        grid = params.get(key)
        if isinstance(grid, dict):
            grids = list(grid.values())
        elif grid is None:
            grids = []
        else:
            grids = [grid]
        for g in grids:
            if not g or any(not lr > 0 for lr in g):
                raise ConfigError(f"{key} must be a nonempty list of positive rates")


def make_config(experiment: str, overrides: dict = None, seeds=None, out=None, source=None) -> ExperimentConfig:
    """Merge ``overrides`` over the defaults for ``experiment`` and validate."""
    if experiment not in DEFAULTS:
        raise ConfigError(f"unknown experiment {experiment!r}; choose from {', '.join(EXPERIMENT_IDS)}")
    params = copy.deepcopy(DEFAULTS[experiment])
    overrides = dict(overrides or {})
    unknown = set(overrides) - set(params)
    if unknown:
        raise ConfigError(f"unknown keys for {experiment}: {sorted(unknown)}")
    for k, v in overrides.items():
        if isinstance(params[k], dict) and isinstance(v, dict):
            params[k].update(v)
        else:
            params[k] = v
    if seeds is not None:
        params["seeds"] = list(seeds)
    seeds = [int(s) for s in params.pop("seeds")]
    if not seeds:
        raise ConfigError("seed list is empty")
    _validate(experiment, params)
    return ExperimentConfig(experiment, params, seeds, out=out, source=source)


def load_config(path, experiment: str = None, seeds=None, out=None) -> ExperimentConfig:
    """Read a TOML config. Its ``experiment`` key must agree with ``experiment`` if both are given."""
    path = Path(path)
    with path.open("rb") as fh:
        data = tomllib.load(fh)
    file_exp = data.pop("experiment", None)
    if experiment is not None and file_exp is not None and file_exp != experiment:
        raise ConfigError(f"config is for {file_exp!r}, not {experiment!r}")
    exp = experiment or file_exp
    if exp is None:
        raise ConfigError("config does not name an experiment")
    file_out = data.pop("out", None)
    return make_config(exp, data, seeds=seeds, out=out or file_out, source=str(path))
