"""End-to-end runs of every experiment at reduced size, plus plotting and CLI behaviour."""

import hashlib
import re
from pathlib import Path

import numpy as np
import pytest

from fls_lab.auxloss import AuxConfig, AuxEstimator, MinibatchFvp
from fls_lab.baselines import approx_then_invert
from fls_lab.cli import main
from fls_lab.config import EXPERIMENT_IDS, load_config, make_config
from fls_lab.experiments import ExperimentError, flow_oracle, run_experiment
from fls_lab.fisher import SpectralFisher, sample_gradient_batch
from fls_lab.metrics import normalized_action_error_exact
from fls_lab.plotting import PlotError, emit_plots, plot_series
from fls_lab.qparam import QDiagonal, init_scaled_identity
from fls_lab.records import read_record, table_to_csv, write_record

SMOKE = Path(__file__).resolve().parents[1] / "configs" / "smoke"


def smoke(exp, **over):
    cfg = load_config(SMOKE / f"{exp}.toml", exp)
    return make_config(exp, {**cfg.params, **over}, seeds=cfg.seeds)


@pytest.fixture(scope="module")
def records(tmp_path_factory):
    root = tmp_path_factory.mktemp("runs")
    out = {}
    for exp in EXPERIMENT_IDS:
        rec = run_experiment(smoke(exp))
        write_record(rec, root / exp)
        out[exp] = (rec, root / exp)
    return out


def sha(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


class TestSmokeRuns:
    @pytest.mark.parametrize("exp", EXPERIMENT_IDS)
    def test_metrics_written(self, records, exp):
        rec, out = records[exp]
        assert (out / "metrics.csv").exists()
        assert rec.manifest["experiment"] == exp and rec.manifest["content_hash"]
        assert "wall_ms" not in rec.metrics[0]

    @pytest.mark.parametrize("exp", EXPERIMENT_IDS)
    def test_rerun_bit_identical(self, records, exp):
        rec, _ = records[exp]
        again = run_experiment(smoke(exp))
        assert table_to_csv(again.metrics) == table_to_csv(rec.metrics)

    def test_oneshot_dense_start(self, records):
        rec, _ = records["oneshot"]
        dense = {r["test_mse"] for r in rec.metrics if r["sparsity"] == 0.0 and r["seed"] == 0}
        assert len(dense) == 1

    def test_block_compare_has_timing(self, records):
        rec, _ = records["block-compare"]
        assert {"fls", "woodbury"} <= {r["method"] for r in rec.table("timing")}

    def test_arms_logged(self, records):
        rec, _ = records["precondition"]
        arms = rec.table("arms")
        assert sum(a["selected"] for a in arms if a["preconditioner"] == "q") >= 1
        assert {a["lr"] for a in arms} == set(make_config("precondition")["lr_grid"])

    def test_gradual_reaches_target(self, records):
        rec, _ = records["gradual"]
        last = [r for r in rec.metrics if r["phase"] == "finetune"][-1]
        assert last["sparsity"] == pytest.approx(0.9)

    def test_parallel_matches_serial(self, records):
        rec, _ = records["init-dynamics"]
        par = run_experiment(smoke("init-dynamics"), jobs=2)
        assert table_to_csv(par.metrics) == table_to_csv(rec.metrics)


class TestExperimentExamples:
    def test_alpha_at_target_is_converged(self):
        # F = I: every target eigenvalue is 1/(1 + gamma)
        g = 1e-3
        cfg = make_config("init-dynamics", {
            "n": 5, "spectrum": "list:[1, 1, 1, 1, 1]", "gamma": g, "alphas": [1 / (1 + g)], "lr_grid": [0.01],
            "steps": 20, "metric_every": 10, "snapshot_every": 10, "flow_time": 0.1, "flow_lr": 1e-3,
        }, seeds=[0])
        rec = run_experiment(cfg)
        assert max(abs(r["convergence_metric"]) for r in rec.metrics) < 1e-12

    def test_flow_oracle_small(self):
        p = make_config("init-dynamics", {"n": 10, "flow_time": 2.0, "flow_lr": 1e-3}).params
        _, err = flow_oracle(p, 50.0)
        assert err < 1e-3

    def test_estimation_diagonal_truth(self):
        # diagonal F: both diagonal estimators contain the truth
        F = SpectralFisher(np.eye(10), np.exp(-np.arange(10) / 5), 0.01)
        Finv = F.inverse_damped()
        q = init_scaled_identity(QDiagonal(10), 1.0)
        cfg = AuxConfig(lr=0.01, steps=3000, u_distribution="covariance", u_covariance=Finv, decay_power=0.5)
        AuxEstimator(q, MinibatchFvp(F, 100), cfg).run(record=False)
        base = approx_then_invert([sample_gradient_batch(F, s, m=100) for s in range(3000)], "diagonal", 0.01)
        assert normalized_action_error_exact(q, F, Finv) < 1e-3
        assert normalized_action_error_exact(base, F, Finv) < 1e-3

    def test_all_rates_diverge_is_error(self):
        cfg = smoke("init-dynamics", alphas=[1000.0], lr_grid=[5.0], steps=50)
        with pytest.raises(ExperimentError, match="diverged"):
            run_experiment(cfg)


class TestPlots:
    def test_deterministic(self, records):
        for exp in EXPERIMENT_IDS:
            _, out = records[exp]
            first = [sha(p) for p in emit_plots(out)]
            second = [sha(p) for p in emit_plots(out)]
            assert first == second and first
            assert (out / "summary.txt").read_text().startswith(f"experiment: {exp}")

    def test_only_reads_csv(self, records, tmp_path):
        _, out = records["gradual"]
        for f in ("manifest.json", "metrics.csv"):
            (tmp_path / f).write_bytes((out / f).read_bytes())
        a = emit_plots(tmp_path)
        b = emit_plots(out)
        assert [sha(p) for p in a] == [sha(p) for p in b]

    def test_empty_table_no_file(self, tmp_path):
        with pytest.raises(PlotError, match="empty"):
            plot_series([], "x", "y", "g", tmp_path / "p.svg")
        assert not (tmp_path / "p.svg").exists()

    def test_missing_column(self, tmp_path):
        with pytest.raises(PlotError, match="lacks"):
            plot_series([{"x": 1, "y": 2}], "x", "y", "g", tmp_path / "p.svg")

    def test_two_series(self, tmp_path):
        rows = [{"x": x, "y": x * k, "g": f"s{k}"} for k in (1, 2) for x in range(5)]
        path = plot_series(rows, "x", "y", "g", tmp_path / "two.svg")
        svg = path.read_text()
        assert 'id="legend_1"' in svg
        assert re.findall(r"<!-- (s\d) -->", svg) == ["s1", "s2"]
        assert list(tmp_path.iterdir()) == [path]

    def test_record_missing_table(self, records, tmp_path):
        _, out = records["oneshot"]
        for f in ("manifest.json", "metrics.csv"):
            (tmp_path / f).write_bytes((out / f).read_bytes())
        with pytest.raises(PlotError, match="aux.csv"):
            emit_plots(tmp_path)
        assert not (tmp_path / "plots").exists()


class TestCli:
    def test_run(self, tmp_path, capsys):
        out = tmp_path / "run"
        assert main(["precondition", "--config", str(SMOKE / "precondition.toml"), "--out", str(out),
                     "--seeds", "3,4"]) == 0
        rec = read_record(out)
        assert rec.manifest["seeds"] == [3, 4]
        assert (out / "plots" / "metric_curves.svg").exists()

    def test_mismatch_exits_nonzero(self, tmp_path, capsys):
        code = main(["gradual", "--config", str(SMOKE / "oneshot.toml"), "--out", str(tmp_path)])
        assert code != 0
        assert "oneshot" in capsys.readouterr().err

    def test_arm_failure_exits_nonzero(self, tmp_path, capsys):
        cfg = tmp_path / "bad.toml"
        cfg.write_text('experiment = "init-dynamics"\nn = 10\nalphas = [1000.0]\nlr_grid = [5.0]\nsteps = 50\n'
                       'flow_time = 0.1\nflow_lr = 0.001\n')
        assert main(["init-dynamics", "--config", str(cfg), "--out", str(tmp_path / "o")]) != 0
        assert "diverged" in capsys.readouterr().err
        assert not (tmp_path / "o" / "metrics.csv").exists()

    def test_bad_seeds(self, capsys):
        with pytest.raises(SystemExit):
            main(["gradual", "--config", "x.toml", "--seeds", "a,b"])
