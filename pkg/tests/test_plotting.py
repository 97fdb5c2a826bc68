import csv
import json
import warnings

import numpy as np
import pytest

from epolab.plotting import (
    GridMismatchWarning,
    MetricsNotFound,
    aggregate,
    find_metrics,
    load_series,
    plot_runs,
    trailing_mean,
)


def write_run(path, rows):
    path.mkdir(parents=True, exist_ok=True)
    with open(path / "metrics.jsonl", "w") as fh:
        for r in rows:
            fh.write(json.dumps(r) + "\n")
    return path


def rows(values, steps=None, eval_every=2):
    steps = steps if steps is not None else range(len(values))
    out = []
    for k, v in zip(steps, values):
        r = {"k": k, "train_reward": v, "batch_entropy": 2 * v, "early_entropy": v, "late_entropy": v / 2}
        r["iid_success"] = v if (k + 1) % eval_every == 0 else None
        r["ood_success"] = None
        out.append(r)
    return out


class TestLoading:
    def test_find_direct_and_nested(self, tmp_path):
        write_run(tmp_path / "a" / "seed_0", rows([0.1]))
        write_run(tmp_path / "a" / "seed_1", rows([0.2]))
        assert len(find_metrics(tmp_path / "a")) == 2
        assert find_metrics(tmp_path / "a" / "seed_0") == [tmp_path / "a" / "seed_0" / "metrics.jsonl"]

    def test_missing(self, tmp_path):
        with pytest.raises(MetricsNotFound):
            find_metrics(tmp_path)

    def test_nulls_skipped(self, tmp_path):
        p = write_run(tmp_path, rows([0.1, 0.2, 0.3, 0.4]))
        s = load_series(p / "metrics.jsonl")
        assert s["iid_success"] == {1: 0.2, 3: 0.4}
        assert s["ood_success"] == {}


class TestAggregate:
    def test_three_seed_oracle(self, tmp_path):
        vals = [[0.1, 0.5, 0.3], [0.2, 0.4, 0.9], [0.0, 0.6, 0.6]]
        runs = [load_series(write_run(tmp_path / str(i), rows(v)) / "metrics.jsonl") for i, v in enumerate(vals)]
        agg = aggregate(runs)["train_reward"]
        arr = np.array(vals)
        np.testing.assert_allclose(agg.mean, arr.mean(axis=0), atol=1e-15)
        np.testing.assert_array_equal(agg.lo, arr.min(axis=0))
        np.testing.assert_array_equal(agg.hi, arr.max(axis=0))
        assert agg.n_runs == 3

    def test_single_run_band_collapses(self, tmp_path):
        runs = [load_series(write_run(tmp_path, rows([0.3, 0.1])) / "metrics.jsonl")]
        a = aggregate(runs)["train_reward"]
        np.testing.assert_array_equal(a.lo, a.hi)

    def test_mismatched_grids(self, tmp_path):
        a = load_series(write_run(tmp_path / "a", rows([0.1, 0.2, 0.3])) / "metrics.jsonl")
        b = load_series(write_run(tmp_path / "b", rows([0.5, 0.6], steps=[1, 2])) / "metrics.jsonl")
        with pytest.warns(GridMismatchWarning):
            agg = aggregate([a, b])
        assert list(agg["train_reward"].steps) == [1, 2]
        np.testing.assert_allclose(agg["train_reward"].mean, [0.35, 0.45])

    def test_trailing_mean(self):
        assert trailing_mean([0, 1, 2, 3], [1.0, 2.0, 3.0, 4.0], 2) == [1.0, 1.5, 2.5, 3.5]
        assert trailing_mean([0, 1], [1.0, 5.0], 0) == [1.0, 5.0]


class TestPlotRuns:
    def test_outputs_and_csv_reproducible(self, tmp_path):
        vals = [[0.1, 0.5, 0.3, 0.7], [0.2, 0.4, 0.9, 0.8]]
        for i, v in enumerate(vals):
            write_run(tmp_path / "exp" / f"seed_{i}", rows(v))
        written = plot_runs([tmp_path / "exp"], tmp_path / "out")
        names = sorted(p.name for p in written)
        assert names == ["aggregate.csv", "entropy.svg", "reward.svg", "success.svg"]
        with open(tmp_path / "out" / "aggregate.csv") as fh:
            table = list(csv.DictReader(fh))
        assert set(table[0]) == {"metric", "step", "n_runs", "mean", "min", "max"}
        # independent recomputation from the raw JSONL
        raw = [
            [json.loads(x)["batch_entropy"] for x in (tmp_path / "exp" / f"seed_{i}" / "metrics.jsonl").read_text().splitlines()]
            for i in range(2)
        ]
        ent = [r for r in table if r["metric"] == "batch_entropy"]
        for k, r in enumerate(ent):
            col = [raw[0][k], raw[1][k]]
            assert float(r["mean"]) == sum(col) / 2
            assert float(r["min"]) == min(col) and float(r["max"]) == max(col)

    def test_svg_deterministic(self, tmp_path):
        write_run(tmp_path / "run", rows([0.1, 0.3, 0.2]))
        plot_runs([tmp_path / "run"], tmp_path / "a")
        plot_runs([tmp_path / "run"], tmp_path / "b")
        for name in ("reward.svg", "entropy.svg", "aggregate.csv"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_no_warning_on_matching_grids(self, tmp_path):
        write_run(tmp_path / "r1", rows([0.1, 0.2]))
        write_run(tmp_path / "r2", rows([0.3, 0.4]))
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            plot_runs([tmp_path / "r1", tmp_path / "r2"], tmp_path / "out")
