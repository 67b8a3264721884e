import csv
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from plotkit.cli import main as plotkit_main
from plotkit.figures import (
    MissingColumnError,
    PlotSpec,
    npv_box_data,
    npv_box_figure,
    render,
)
from plotkit.stats import box_stats


def write_csv(path, header, rows):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(header)
        w.writerows(rows)


def make_npv_csv(path, values, truth=None):
    rows = []
    for i, v in enumerate(values):
        rows.append([i, "%.12g" % (v * 0.98), "%.12g" % v])
    if truth is not None:
        rows.append(["truth", "", "%.12g" % truth])
    write_csv(path, ["realization", "proxy_npv_usd", "sim_npv_usd"], rows)


class TestBoxStats:
    def test_sixteen_values_median(self):
        stats = box_stats(np.arange(1.0, 17.0))
        assert stats["med"] == pytest.approx(8.5, abs=1e-12)

    def test_matches_numpy_percentiles(self):
        rng = np.random.default_rng(0)
        values = rng.standard_normal(16) * 1e6
        stats = box_stats(values)
        for key, q in (("whislo", 10), ("q1", 25), ("med", 50),
                       ("q3", 75), ("whishi", 90)):
            assert stats[key] == pytest.approx(
                np.percentile(values, q, method="linear"), abs=1e-9)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            box_stats([])


class TestNpvBox:
    def _run_dir(self, tmp_path, truth=1.1e7):
        values = np.linspace(1.0e7, 1.6e7, 16)
        make_npv_csv(tmp_path / "cycle_1" / "npv.csv", values, truth=truth)
        make_npv_csv(tmp_path / "cycle_2" / "npv.csv", values * 1.05,
                     truth=None if truth is None else truth * 1.04)
        return tmp_path, values

    def test_median_line_positions_match_percentiles(self, tmp_path):
        run_dir, values = self._run_dir(tmp_path)
        fig = npv_box_figure(PlotSpec("npv-box", run_dir, tmp_path / "o.png"))
        med_artists = fig.box_artists["sim"]["medians"]
        expected = [np.percentile(values, 50, method="linear"),
                    np.percentile(values * 1.05, 50, method="linear")]
        for artist, med in zip(med_artists, expected):
            assert artist.get_ydata()[0] == pytest.approx(med, abs=1e-9)
            assert artist.get_ydata()[1] == pytest.approx(med, abs=1e-9)
        for kind in ("proxy", "sim"):
            scale = 0.98 if kind == "proxy" else 1.0
            for stats, vals in zip(fig.box_stats[kind],
                                   (values * scale, values * scale * 1.05)):
                for key, q in (("whislo", 10), ("q1", 25), ("med", 50),
                               ("q3", 75), ("whishi", 90)):
                    assert stats[key] == pytest.approx(
                        np.percentile(vals, q, method="linear"), abs=1e-9)

    def test_renders_without_truth_markers(self, tmp_path):
        run_dir, _ = self._run_dir(tmp_path, truth=None)
        out = render(PlotSpec("npv-box", run_dir, tmp_path / "npv.png"))
        assert out.exists() and out.stat().st_size > 0

    def test_data_reader_splits_kept(self, tmp_path):
        path = tmp_path / "cycle_1" / "npv.csv"
        write_csv(path, ["realization", "proxy_npv_usd", "sim_npv_usd"],
                  [[0, "10", "11"], [1, "12", ""], [2, "13", "14"],
                   ["truth", "", "15"]])
        data = npv_box_data(tmp_path)
        assert data[1]["sim"] == [11.0, 14.0]
        assert data[1]["proxy"] == [10.0, 13.0]  # kept rows only
        assert data[1]["truth"] == 15.0


class TestCrossplot:
    def test_identical_columns_on_diagonal(self, tmp_path):
        rows = [["cum_oil_m3", i, "%.6g" % v, "%.6g" % v]
                for i, v in enumerate(np.linspace(1e5, 9e5, 12))]
        write_csv(tmp_path / "crossplot.csv",
                  ["quantity", "sample", "simulator", "proxy"], rows)
        out = render(PlotSpec("crossplot", tmp_path, tmp_path / "x.png"))
        assert out.exists()

    def test_missing_column_reported(self, tmp_path):
        write_csv(tmp_path / "crossplot.csv", ["quantity", "sim"], [["a", "1"]])
        with pytest.raises(MissingColumnError):
            render(PlotSpec("crossplot", tmp_path, tmp_path / "x.png"))


class TestRatesAndErrors:
    def _rates_csv(self, path, offset=0.0):
        header = ["time_days", "INJ1:water_inj", "PRD1:oil_prod",
                  "PRD1:water_prod"]
        rows = [[t, 100 + offset, 80 - t / 30 + offset, t / 30 + offset]
                for t in range(0, 181, 30)]
        write_csv(path, header, rows)

    def test_rates_overlay(self, tmp_path):
        self._rates_csv(tmp_path / "rates_sim_median.csv")
        self._rates_csv(tmp_path / "rates_proxy_median.csv", offset=1.5)
        out = render(PlotSpec("rates", tmp_path, tmp_path / "rates.png"))
        assert out.exists()

    def test_error_rank(self, tmp_path):
        rows = [[r + 1, r, "%.4f" % (0.02 + 0.01 * r)] for r in range(10)]
        write_csv(tmp_path / "error_rank.csv", ["rank", "sample", "error"], rows)
        out = render(PlotSpec("error-rank", tmp_path, tmp_path / "err.png"))
        assert out.exists()

    def test_unknown_kind_rejected(self, tmp_path):
        with pytest.raises(ValueError):
            PlotSpec("volcano", tmp_path, tmp_path / "x.png")


class TestConstraintTrace:
    def test_renders_with_limits(self, tmp_path):
        rows = []
        for realization in ["0", "1", "truth"]:
            for t in range(0, 181, 30):
                rows.append([t, "field:water_injection", realization,
                             "%.4g" % (500 + 30 * int(realization != "truth")),
                             "700"])
        write_csv(tmp_path / "cycle_1" / "constraint_trace.csv",
                  ["time_days", "constraint", "realization", "value", "limit"],
                  rows)
        out = render(PlotSpec("constraint-trace", tmp_path,
                              tmp_path / "ct.png", options={"cycle": 1}))
        assert out.exists()


@pytest.fixture(scope="session")
def real_run(tmp_path_factory):
    """A real run directory produced through the public CLI, plus proxy
    evaluation outputs, for integration rendering."""
    root = tmp_path_factory.mktemp("real_run")
    run_dir = root / "run"
    env_args = ["--profile", "micro", "--seed", "3"]

    def cli(*argv):
        proc = subprocess.run([sys.executable, "-m", "clrmlab.cli", *argv],
                              capture_output=True, text=True)
        assert proc.returncode == 0, proc.stderr
        return proc

    cli("clrm", *env_args, "--out", str(run_dir))
    models = root / "models"
    cli("generate-models", *env_args, "--out", str(models))
    ds = root / "ds"
    cli("make-dataset", *env_args, "--models", str(models), "--out", str(ds))
    proxy_dir = root / "proxy"
    cli("train", *env_args, "--dataset", str(ds), "--out", str(proxy_dir))
    eval_dir = root / "eval"
    cli("eval-proxy", *env_args, "--proxy", str(proxy_dir / "proxy.bin"),
        "--dataset", str(ds), "--out", str(eval_dir))
    return run_dir, eval_dir


@pytest.mark.integration
class TestAgainstRealRun:
    def test_all_five_kinds_render(self, real_run, tmp_path):
        run_dir, eval_dir = real_run
        outputs = [
            ("npv-box", run_dir, []),
            ("constraint-trace", run_dir, ["--cycle", "1"]),
            ("rates", eval_dir, []),
            ("error-rank", eval_dir, []),
            ("crossplot", eval_dir, []),
        ]
        for kind, in_dir, extra in outputs:
            out = tmp_path / f"{kind}.png"
            code = plotkit_main([kind, "--in", str(in_dir), "--out", str(out),
                                 *extra])
            assert code == 0, kind
            assert out.exists() and out.stat().st_size > 1000

    def test_npv_box_matches_input_percentiles(self, real_run, tmp_path):
        run_dir, _ = real_run
        data = npv_box_data(run_dir)
        fig = npv_box_figure(PlotSpec("npv-box", run_dir, tmp_path / "n.png"))
        for k, cycle in enumerate(sorted(data)):
            med = fig.box_artists["sim"]["medians"][k].get_ydata()[0]
            expect = np.percentile(data[cycle]["sim"], 50, method="linear")
            assert med == pytest.approx(expect, abs=1e-9)

    def test_rendering_is_deterministic(self, real_run, tmp_path):
        run_dir, _ = real_run
        a = render(PlotSpec("npv-box", run_dir, tmp_path / "a.png"))
        b = render(PlotSpec("npv-box", run_dir, tmp_path / "b.png"))
        assert a.read_bytes() == b.read_bytes()
