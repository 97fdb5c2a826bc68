"""Multi-run aggregation of metrics streams and static SVG charts."""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

CHARTS = {
    "reward": ("train_reward",),
    "success": ("iid_success", "ood_success"),
    "entropy": ("batch_entropy", "early_entropy", "late_entropy"),
}
METRICS = tuple(m for ms in CHARTS.values() for m in ms)


class MetricsNotFound(FileNotFoundError):
    pass


class GridMismatchWarning(UserWarning):
    pass


def find_metrics(run_dir) -> list[Path]:
    """``metrics.jsonl`` in ``run_dir`` itself, else in its immediate subdirectories."""
    run_dir = Path(run_dir)
    direct = run_dir / "metrics.jsonl"
    if direct.is_file():
        return [direct]
    found = sorted(run_dir.glob("*/metrics.jsonl"))
    if not found:
        raise MetricsNotFound(f"no metrics.jsonl under {run_dir}")
    return found


def load_series(path) -> dict[str, dict[int, float]]:
    """Per metric, step -> value (steps where the value is null are left out)."""
    out: dict[str, dict[int, float]] = {m: {} for m in METRICS}
    with open(path) as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            for m in METRICS:
                if rec.get(m) is not None:
                    out[m][int(rec["k"])] = float(rec[m])
    return out


def trailing_mean(steps: list[int], values: list[float], n: int) -> list[float]:
    if n <= 1:
        return list(values)
    v = np.asarray(values, dtype=np.float64)
    c = np.concatenate([[0.0], np.cumsum(v)])
    idx = np.arange(len(v))
    lo = np.maximum(idx - n + 1, 0)
    return list((c[idx + 1] - c[lo]) / (idx + 1 - lo))


@dataclass(frozen=True)
class Aggregate:
    metric: str
    steps: np.ndarray
    mean: np.ndarray
    lo: np.ndarray
    hi: np.ndarray
    n_runs: int


def aggregate(runs: list[dict[str, dict[int, float]]], smooth: int = 0) -> dict[str, Aggregate]:
    """Per-step mean, min and max across runs on the shared step grid."""
    result = {}
    for m in METRICS:
        present = [r[m] for r in runs if r[m]]
        if not present:
            continue
        grids = [set(s) for s in present]
        shared = sorted(set.intersection(*grids))
        if any(g != grids[0] for g in grids):
            warnings.warn(
                f"{m}: step grids differ across runs; keeping the {len(shared)} shared steps",
                GridMismatchWarning,
                stacklevel=2,
            )
        if not shared:
            continue
        rows = []
        for s in present:
            vals = [s[k] for k in shared]
            rows.append(trailing_mean(shared, vals, smooth))
        arr = np.asarray(rows)
        result[m] = Aggregate(m, np.asarray(shared), arr.mean(axis=0), arr.min(axis=0), arr.max(axis=0), len(rows))
    return result


def write_csv(aggs: dict[str, Aggregate], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["metric", "step", "n_runs", "mean", "min", "max"])
        for m in METRICS:
            if m not in aggs:
                continue
            a = aggs[m]
            for i, k in enumerate(a.steps):
                w.writerow([m, int(k), a.n_runs, repr(float(a.mean[i])), repr(float(a.lo[i])), repr(float(a.hi[i]))])


def _chart(aggs: dict[str, Aggregate], metrics: tuple[str, ...], title: str, path: Path) -> bool:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    shown = [m for m in metrics if m in aggs]
    if not shown:
        return False
    with matplotlib.rc_context({"svg.hashsalt": "epolab", "svg.fonttype": "none"}):
        fig, ax = plt.subplots(figsize=(6.4, 4.0))
        for m in shown:
            a = aggs[m]
            (line,) = ax.plot(a.steps, a.mean, label=m, linewidth=1.5)
            if a.n_runs > 1:
                ax.fill_between(a.steps, a.lo, a.hi, color=line.get_color(), alpha=0.2, linewidth=0)
        ax.set_xlabel("RL step")
        ax.set_title(title)
        ax.grid(alpha=0.3)
        ax.legend(frameon=False)
        fig.tight_layout()
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)
    return True


def plot_runs(run_dirs, out_dir, smooth: int = 0) -> list[Path]:
    """Aggregate every run under ``run_dirs`` and write charts plus ``aggregate.csv``."""
    paths = [p for d in run_dirs for p in find_metrics(d)]
    runs = [load_series(p) for p in paths]
    aggs = aggregate(runs, smooth)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    csv_path = out_dir / "aggregate.csv"
    write_csv(aggs, csv_path)
    written.append(csv_path)
    for name, metrics in CHARTS.items():
        p = out_dir / f"{name}.svg"
        if _chart(aggs, metrics, f"{name} ({len(runs)} run{'s' if len(runs) != 1 else ''})", p):
            written.append(p)
    return written
