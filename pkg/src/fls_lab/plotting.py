"""Deterministic SVG figures and a plain-text summary, built from a persisted record's CSVs."""

from __future__ import annotations

import io
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .records import atomic_write, csv_to_table  # noqa: E402

__all__ = ["Panel", "PlotError", "emit_plots", "plot_series", "mean_sem", "panels_for"]

STYLE = {
    "svg.hashsalt": "fls-lab",
    "svg.fonttype": "path",
    "font.size": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "figure.figsize": (4.5, 3.2),
    "axes.spines.top": False,
    "axes.spines.right": False,
    "lines.linewidth": 1.4,
}


class PlotError(ValueError):
    pass


@dataclass(frozen=True)
class Panel:
    """One figure file: ``y`` against ``x``, one line per ``group`` value, mean over seeds."""

    name: str
    table: str
    x: str
    y: str
    group: str
    where: Optional[tuple] = None
    logy: bool = False
    absy: bool = False
    scatter: bool = False
    color_by: Optional[str] = None
    identity_line: bool = False
    categorical: bool = False
    title: str = ""

    def columns(self):
        cols = {self.x, self.y, self.group}
        if self.where:
            cols.add(self.where[0])
        if self.color_by:
            cols.add(self.color_by)
        return cols


def mean_sem(values) -> tuple:
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        return float("nan"), float("nan")
    sem = float(np.std(v, ddof=1) / np.sqrt(v.size)) if v.size > 1 else 0.0
    return float(np.mean(v)), sem


def _ordered(values):
    seen = []
    for v in values:
        if v not in seen:
            seen.append(v)
    return seen


def _filter(rows, where):
    if where is None:
        return rows
    key, allowed = where
    allowed = allowed if isinstance(allowed, (tuple, list, set)) else (allowed,)
    return [r for r in rows if r.get(key) in allowed]


def _aggregate(rows, panel: Panel):
    series = {}
    for g in _ordered(r[panel.group] for r in rows):
        mine = [r for r in rows if r[panel.group] == g]
        xs = sorted(set(r[panel.x] for r in mine))
        pts = []
        for x in xs:
            ys = [r[panel.y] for r in mine if r[panel.x] == x and r[panel.y] is not None]
            ys = [abs(y) for y in ys] if panel.absy else ys
            m, s = mean_sem(ys)
            pts.append((x, m, s, len(ys)))
        series[g] = pts
    return series


def _render(rows, panel: Panel) -> bytes:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        if panel.scatter:
            groups = _ordered(r[panel.group] for r in rows)
            cmap = plt.get_cmap("viridis")
            markers = "os^Dv<>"
            cvals = sorted(set(r[panel.color_by] for r in rows)) if panel.color_by else [None]
            lo, hi = (min(cvals), max(cvals)) if panel.color_by else (0, 1)
            for gi, g in enumerate(groups):
                for c in cvals:
                    pts = [r for r in rows if r[panel.group] == g and (c is None or r[panel.color_by] == c)]
                    if not pts:
                        continue
                    frac = 0.0 if hi == lo or c is None else (c - lo) / (hi - lo)
                    ax.scatter([r[panel.x] for r in pts], [r[panel.y] for r in pts], s=8,
                               color=cmap(frac), marker=markers[gi % len(markers)],
                               label=f"{panel.group}={g}" if c == cvals[-1] else None)
            if panel.identity_line:
                vals = [r[panel.x] for r in rows] + [r[panel.y] for r in rows]
                vals = [v for v in vals if v > 0]
                a, b = min(vals), max(vals)
                ax.plot([a, b], [a, b], ls="--", color="0.6", lw=1)
            ax.set_xscale("log")
            ax.set_yscale("log")
            if panel.color_by:
                sm = plt.cm.ScalarMappable(cmap=cmap, norm=plt.Normalize(lo, hi))
                fig.colorbar(sm, ax=ax, label=panel.color_by)
        elif panel.categorical:
            series = _aggregate(rows, panel)
            for i, (g, pts) in enumerate(series.items()):
                m = np.array([p[1] for p in pts])
                s = np.array([p[2] for p in pts])
                ax.errorbar(np.full(m.size, i), m, yerr=s, fmt="o", capsize=3, label=str(g))
            ax.set_xticks(range(len(series)))
            ax.set_xticklabels([str(g) for g in series], rotation=30)
        else:
            for g, pts in _aggregate(rows, panel).items():
                x = np.array([p[0] for p in pts], dtype=float)
                m = np.array([p[1] for p in pts])
                s = np.array([p[2] for p in pts])
                line, = ax.plot(x, m, label=str(g))
                if np.any(s > 0):
                    ax.fill_between(x, m - s, m + s, color=line.get_color(), alpha=0.2, lw=0)
            if panel.logy:
                ax.set_yscale("log")
        ax.set_xlabel(panel.x)
        ax.set_ylabel(f"|{panel.y}|" if panel.absy else panel.y)
        if panel.title:
            ax.set_title(panel.title)
        ax.legend(frameon=False)
        if panel.categorical:
            ax.get_legend().remove()
        fig.tight_layout()
        buf = io.BytesIO()
        fig.savefig(buf, format="svg", metadata={"Date": None})
        plt.close(fig)
    return buf.getvalue()


def plot_series(rows, x: str, y: str, group: str, path, **kw) -> Path:
    """Write one SVG with a line per ``group`` value (mean over repeated x)."""
    rows = list(rows)
    panel = Panel(Path(path).stem, "rows", x, y, group, **kw)
    _check(rows, panel)
    data = _render(_filter(rows, panel.where), panel)
    atomic_write(path, data)
    return Path(path)


def _check(rows, panel):
    if not rows:
        raise PlotError(f"table {panel.table!r} is empty")
    missing = panel.columns() - set(rows[0])
    if missing:
        raise PlotError(f"table {panel.table!r} lacks columns {sorted(missing)}")
    if not _filter(rows, panel.where):
        raise PlotError(f"no rows in {panel.table!r} for panel {panel.name!r}")


def panels_for(experiment: str, tables: dict) -> list:
    if experiment == "init-dynamics":
        out = [
            Panel("metric_curves", "metrics", "step", "convergence_metric", "alpha", logy=True, absy=True),
            Panel("aux_loss_curves", "metrics", "step", "aux_loss", "alpha"),
            Panel("flow_oracle_error", "flow", "t", "max_rel_error", "alpha", logy=True),
        ]
        for a in _ordered(r["alpha"] for r in tables.get("snapshots", [])):
            out.append(Panel(f"eigenvalues_alpha{a:g}", "snapshots", "target", "beta", "alpha", where=("alpha", a),
                             scatter=True, color_by="step", identity_line=True))
        return out
    if experiment == "precondition":
        return [
            Panel("metric_curves", "metrics", "step", "convergence_metric", "preconditioner", logy=True, absy=True),
            Panel("aux_loss_curves", "metrics", "step", "aux_loss", "preconditioner"),
        ]
    if experiment == "estimation":
        return [
            Panel(f"panel_{p}", "metrics", "minibatches", "value", "method", where=("panel", p), logy=True,
                  title={"A": "Riemannian distance", "B": "diagonal", "C": "block", "D": "Kronecker"}[p])
            for p in _ordered(r["panel"] for r in tables.get("metrics", []))
        ]
    if experiment == "oneshot":
        return [
            Panel("panel_B_aux_loss", "aux", "family", "aux_loss", "family", categorical=True,
                  title="final aux loss"),
            Panel("panel_C_test_mse", "metrics", "sparsity", "test_mse", "method", logy=True),
        ]
    if experiment == "block-compare":
        out = []
        for b in _ordered(r["block"] for r in tables.get("metrics", [])):
            out += [
                Panel(f"block{b}_test_mse", "metrics", "sparsity", "test_mse", "method", where=("block", b)),
                Panel(f"block{b}_masked_distance", "metrics", "sparsity", "masked_distance", "method",
                      where=("block", b)),
                Panel(f"block{b}_wall_ms", "timing", "sparsity", "wall_ms", "method", where=("block", b)),
            ]
        return out
    if experiment == "gradual":
        phases = {r["phase"] for r in tables.get("metrics", [])}
        keep = ("initial", "finetune") if "finetune" in phases else ("initial", "prune")
        return [Panel("test_mse", "metrics", "sparsity", "test_mse", "method", where=("phase", keep), logy=True)]
    raise PlotError(f"no plots defined for experiment {experiment!r}")


def _summary(experiment, panels, tables) -> str:
    lines = [f"experiment: {experiment}", "values are mean ± s.e.m. over seeds at the last x of each series", ""]
    for panel in panels:
        if panel.scatter:
            continue
        rows = _filter(tables[panel.table], panel.where)
        lines.append(f"[{panel.name}] {panel.y} vs {panel.x}")
        for g, pts in _aggregate(rows, panel).items():
            x, m, s, k = pts[-1]
            where = "" if panel.x == panel.group else f"  {panel.x}={x}"
            lines.append(f"  {panel.group}={g}{where}  {m:.6g} ± {s:.3g}  (n={k})")
        lines.append("")
    return "\n".join(lines)


def emit_plots(out_dir) -> list:
    """Render every panel for the record in ``out_dir`` into ``out_dir/plots``.

    All inputs are validated before any file is written.
    """
    out = Path(out_dir)
    manifest = json.loads((out / "manifest.json").read_text(encoding="utf-8"))
    tables = {}
    for p in out.glob("*.csv"):
        tables[p.stem] = csv_to_table(p.read_text(encoding="utf-8"))
    experiment = manifest["experiment"]
    panels = panels_for(experiment, tables)
    for panel in panels:
        if panel.table not in tables:
            raise PlotError(f"record has no {panel.table}.csv")
        _check(tables[panel.table], panel)
    rendered = [(panel.name, _render(_filter(tables[panel.table], panel.where), panel)) for panel in panels]
    plots = out / "plots"
    paths = []
    for name, data in rendered:
        path = plots / f"{name}.svg"
        atomic_write(path, data)
        paths.append(path)
    atomic_write(out / "summary.txt", _summary(experiment, panels, tables))
    return paths
