"""End-to-end tests for the command line interface."""

import csv
import json
import os
from pathlib import Path

import numpy as np
import pytest

from mapc.cli import main
from mapc.io import read_prediction_csv, read_sample_archive

REPO = Path(__file__).resolve().parents[1]
BUNDLED_DATA = REPO / "data" / "scandinavia_synthetic.csv"
BUNDLED_CONFIG = REPO / "data" / "scandinavia_fit.yaml"

FAST_CONFIG = """\
seed: 123
sampler:
  iterations: 600
  burn_in: 200
  thinning: 2
  chains: 2
forecast:
  levels: [0.8, 0.95]
"""

SYNTH_ARGS = [
    "--ages", "4", "--periods", "6", "--strata", "2",
    "--exposure", "500000", "--seed", "11",
    "--kappa", "age=30", "--kappa", "period=40", "--kappa", "cohort=40",
    "--kappa", "overdispersion=5000",
]


def run_cli(capsys, *argv):
    """Invoke main() in process; return (exit code, parsed JSON record)."""
    code = main([str(a) for a in argv])
    captured = capsys.readouterr()
    text = captured.out if code == 0 else captured.err
    return code, json.loads(text)


def data_rows(path):
    with open(path) as handle:
        return [r for r in csv.reader(handle) if r and not r[0].startswith("#")]


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """Shared dataset, config file, and one completed fit."""
    root = tmp_path_factory.mktemp("cliwork")
    config = root / "fast.yaml"
    config.write_text(FAST_CONFIG)
    code = main(["synth", "--out", str(root), "--name", "panel", *SYNTH_ARGS])
    assert code == 0
    fitdir = root / "fit"
    code = main([
        "fit", "--input", str(root / "panel.csv"),
        "--config", str(config), "--out", str(fitdir),
    ])
    assert code == 0
    return root


class TestSynth:
    def test_outputs_and_payload(self, tmp_path, capsys):
        code, out = run_cli(
            capsys, "synth", "--out", tmp_path, "--name", "d", *SYNTH_ARGS
        )
        assert code == 0
        assert out["cells"] == 4 * 6 * 2
        assert out["seed"] == 11
        assert os.path.exists(out["data"]) and os.path.exists(out["truth"])
        truth = json.loads(Path(out["truth"]).read_text())
        assert set(truth["truth"]) >= {
            "intercept", "age", "period", "cohort", "eta", "kappa", "rho",
        }

    def test_same_seed_gives_identical_bytes(self, tmp_path, capsys):
        run_cli(capsys, "synth", "--out", tmp_path, "--name", "a", *SYNTH_ARGS)
        run_cli(capsys, "synth", "--out", tmp_path, "--name", "b", *SYNTH_ARGS)
        a = (tmp_path / "a.csv").read_bytes()
        b = (tmp_path / "b.csv").read_bytes()
        assert a == b

    def test_seed_changes_data(self, tmp_path, capsys):
        args = [a for a in SYNTH_ARGS if a != "11"]
        run_cli(capsys, "synth", "--out", tmp_path, "--name", "a", *SYNTH_ARGS)
        run_cli(capsys, "synth", "--out", tmp_path, "--name", "c",
                *[a.replace("11", "12") if a == "11" else a for a in SYNTH_ARGS])
        assert (tmp_path / "a.csv").read_bytes() != (tmp_path / "c.csv").read_bytes()


class TestIngest:
    def test_report_payload(self, workdir, capsys):
        code, out = run_cli(
            capsys, "ingest", "--input", workdir / "panel.csv"
        )
        assert code == 0
        report = out["report"]
        assert (report["n_ages"], report["n_periods"], report["n_strata"]) == (4, 6, 2)
        assert report["n_missing"] == 0
        assert report["n_rows"] == 48

    def test_mask_flag_reflected_in_report(self, workdir, capsys):
        code, out = run_cli(
            capsys, "ingest", "--input", workdir / "panel.csv",
            "--mask", "1:4-5",
        )
        assert code == 0
        assert out["report"]["n_missing"] == 4 * 2

    def test_normalized_output_reingests(self, workdir, tmp_path, capsys):
        code, out = run_cli(
            capsys, "ingest", "--input", workdir / "panel.csv",
            "--out", tmp_path,
        )
        assert code == 0
        code, out2 = run_cli(capsys, "ingest", "--input", out["normalized"])
        assert code == 0
        assert out2["report"]["n_rows"] == 48

    def test_mask_outside_grid_fails(self, workdir, capsys):
        code, err = run_cli(
            capsys, "ingest", "--input", workdir / "panel.csv",
            "--mask", "5:0-1",
        )
        assert code == 1
        assert err["error"] == "ValueError"
        assert "outside" in err["message"]


class TestFit:
    def test_payload_and_outputs(self, workdir, capsys):
        fitdir = workdir / "fit"
        samples = read_sample_archive(str(fitdir / "samples.bin"))
        # 2 chains x floor((600 - 200) / 2) retained draws
        assert samples.n_draws == 400
        assert samples.n_ages == 4 and samples.n_strata == 2
        rows = data_rows(fitdir / "posterior_summary.csv")
        assert rows[0][0] == "parameter"
        labels = {r[0] for r in rows[1:]}
        assert {"kappa:period", "rho_star:overdispersion", "intercept[1]"} <= labels

    def test_reruns_are_bitwise_identical(self, workdir, capsys):
        fitdir = workdir / "fit"
        first = (fitdir / "samples.bin").read_bytes()
        first_summary = (fitdir / "posterior_summary.csv").read_bytes()
        code, out = run_cli(
            capsys, "fit", "--input", workdir / "panel.csv",
            "--config", workdir / "fast.yaml", "--out", fitdir,
        )
        assert code == 0
        assert (fitdir / "samples.bin").read_bytes() == first
        assert (fitdir / "posterior_summary.csv").read_bytes() == first_summary

    def test_seed_flag_overrides_config(self, workdir, tmp_path, capsys):
        code, out = run_cli(
            capsys, "fit", "--input", workdir / "panel.csv",
            "--config", workdir / "fast.yaml", "--out", tmp_path,
            "--seed", "77",
        )
        assert code == 0
        assert out["seed"] == 77
        sidecar = json.loads((tmp_path / "samples.bin.json").read_text())
        assert sidecar["seed"] == 77
        # different seed, different draws
        assert (tmp_path / "samples.bin").read_bytes() != (
            workdir / "fit" / "samples.bin"
        ).read_bytes()

    def test_max_psrf_is_reported(self, workdir, capsys):
        code, out = run_cli(
            capsys, "fit", "--input", workdir / "panel.csv",
            "--config", workdir / "fast.yaml", "--out", workdir / "fit",
        )
        assert code == 0
        assert np.isfinite(out["max_psrf"]) and out["max_psrf"] > 0.9
        assert 0.0 < out["acceptance"]["eta_blocks"] <= 1.0


class TestForecast:
    def test_masked_block_predictions(self, workdir, capsys):
        outdir = workdir / "fc"
        code, out = run_cli(
            capsys, "forecast", "--input", workdir / "panel.csv",
            "--config", workdir / "fast.yaml", "--out", outdir,
            "--mask", "1:4-5", "--levels", "0.5,0.9",
        )
        assert code == 0
        assert out["masked_only"] is True
        assert out["cells"] == 4 * 2
        pred = read_prediction_csv(str(outdir / "predictions.csv"))
        assert pred["levels"] == [0.05, 0.25, 0.5, 0.75, 0.95]
        assert len(pred["mean"]) == 8
        assert set(pred["stratum"]) == {1}
        assert set(pred["period_index"]) == {4, 5}
        # quantile columns are monotone in the level, row by row
        stacked = np.stack([pred[f"count_q{q:g}"] for q in pred["levels"]])
        assert np.all(np.diff(stacked, axis=0) >= 0)
        assert np.all(pred["sd"] > 0)

    def test_full_grid_when_unmasked(self, workdir, capsys):
        outdir = workdir / "fc_all"
        code, out = run_cli(
            capsys, "forecast", "--input", workdir / "panel.csv",
            "--config", workdir / "fast.yaml", "--out", outdir,
        )
        assert code == 0
        assert out["masked_only"] is False
        pred = read_prediction_csv(str(outdir / "predictions.csv"))
        assert len(pred["mean"]) == 48
        # config file levels 0.8/0.95 expand to five quantile columns
        assert pred["levels"] == [0.025, 0.1, 0.5, 0.9, 0.975]


class TestScore:
    def test_scores_masked_predictions(self, workdir, tmp_path, capsys):
        code, out = run_cli(
            capsys, "score",
            "--pred", workdir / "fc" / "predictions.csv",
            "--truth", workdir / "panel.csv",
            "--out", tmp_path,
        )
        assert code == 0
        assert out["model"] == "apc"
        assert out["cells"] == 8
        assert np.isfinite(out["mean_dss"]) and np.isfinite(out["mse"])
        assert set(out["coverage"]) == {"0.5", "0.9"}
        saved = json.loads((tmp_path / "scores.json").read_text())
        assert saved["mean_dss"] == out["mean_dss"]

    def test_prediction_outside_truth_grid_fails(self, workdir, tmp_path, capsys):
        code, out = run_cli(
            capsys, "leecarter", "--input", workdir / "panel.csv",
            "--out", tmp_path, "--horizon", "2", "--draws", "500",
        )
        assert code == 0
        code, err = run_cli(
            capsys, "score", "--pred", out["predictions"],
            "--truth", workdir / "panel.csv",
        )
        assert code == 1
        assert "outside the truth grid" in err["message"]


class TestCrosspred:
    def test_scenarios_and_reports(self, workdir, capsys):
        outdir = workdir / "cp"
        code, out = run_cli(
            capsys, "crosspred", "--input", workdir / "panel.csv",
            "--config", workdir / "fast.yaml", "--out", outdir,
        )
        assert code == 0
        # one scenario per (half-window, target stratum) pair
        assert out["scenarios"] == 2 * 2
        rows = data_rows(outdir / "crosspred_report.csv")
        assert rows[0] == [
            "window", "target_stratum", "seed", "mean_dss", "mse",
            "coverage_0.8", "coverage_0.95",
        ]
        assert len(rows) == 1 + 4
        strata = {r[1] for r in rows[1:]}
        windows = {r[0] for r in rows[1:]}
        assert strata == {"0", "1"} and windows == {"first", "second"}
        for r in rows[1:]:
            assert np.isfinite(float(r[3]))
            for cov in (r[5], r[6]):
                assert 0.0 <= float(cov) <= 1.0
        curve = data_rows(outdir / "crosspred_cumulative_dss.csv")
        # each scenario contributes one row per masked period (6 // 2)
        assert len(curve) == 1 + 4 * 3
        last = curve[-1]
        assert last[0] == "second" and last[3] in {"3", "4", "5"}


class TestLeecarter:
    def test_forward_window(self, workdir, tmp_path, capsys):
        code, out = run_cli(
            capsys, "leecarter", "--input", workdir / "panel.csv",
            "--out", tmp_path, "--mask", "0:4-5", "--draws", "2000",
            "--seed", "3",
        )
        assert code == 0
        assert out["rows"] == 4 * 2
        pred = read_prediction_csv(str(tmp_path / "leecarter_predictions.csv"))
        assert pred["meta"]["model"] == "leecarter"
        assert set(pred["period_index"]) == {4, 5}
        assert set(pred["stratum"]) == {0}
        stacked = np.stack([pred[f"count_q{q:g}"] for q in pred["levels"]])
        assert np.all(np.diff(stacked, axis=0) >= 0)

    def test_backward_window_fills_early_block(self, workdir, tmp_path, capsys):
        code, out = run_cli(
            capsys, "leecarter", "--input", workdir / "panel.csv",
            "--out", tmp_path, "--mask", "1:0-1", "--draws", "2000",
            "--seed", "3",
        )
        assert code == 0
        pred = read_prediction_csv(str(tmp_path / "leecarter_predictions.csv"))
        assert set(pred["period_index"]) == {0, 1}
        assert set(pred["stratum"]) == {1}

    def test_horizon_extends_every_stratum(self, workdir, tmp_path, capsys):
        code, out = run_cli(
            capsys, "leecarter", "--input", workdir / "panel.csv",
            "--out", tmp_path, "--horizon", "3", "--draws", "1000",
            "--seed", "3",
        )
        assert code == 0
        assert out["rows"] == 4 * 3 * 2
        pred = read_prediction_csv(str(tmp_path / "leecarter_predictions.csv"))
        assert set(pred["period_index"]) == {6, 7, 8}
        assert set(pred["stratum"]) == {0, 1}

    def test_requires_mask_or_horizon(self, workdir, capsys):
        code, err = run_cli(
            capsys, "leecarter", "--input", workdir / "panel.csv"
        )
        assert code == 1
        assert "--mask" in err["message"] and "--horizon" in err["message"]

    def test_window_covering_all_periods_fails(self, workdir, tmp_path, capsys):
        code, err = run_cli(
            capsys, "leecarter", "--input", workdir / "panel.csv",
            "--out", tmp_path, "--mask", "0:0-5",
        )
        assert code == 1
        assert "every period" in err["message"]


class TestErrorRecords:
    def test_missing_input(self, capsys):
        code, err = run_cli(capsys, "fit")
        assert code == 1
        assert err == {
            "command": "fit",
            "error": "ValueError",
            "message": "no input file given (flag --input or config key)",
        }

    def test_missing_config_file(self, workdir, capsys):
        code, err = run_cli(
            capsys, "fit", "--input", workdir / "panel.csv",
            "--config", "/nonexistent.yaml",
        )
        assert code == 1
        assert err["error"] == "FileNotFoundError"

    def test_bad_interval_level(self, workdir, capsys):
        code, err = run_cli(
            capsys, "forecast", "--input", workdir / "panel.csv",
            "--levels", "1.5",
        )
        assert code == 1
        assert "outside (0, 1)" in err["message"]

    def test_bad_mask_syntax(self, workdir, capsys):
        code, err = run_cli(
            capsys, "forecast", "--input", workdir / "panel.csv",
            "--mask", "nonsense",
        )
        assert code == 1
        assert "expected stratum:first-last" in err["message"]

    def test_malformed_registry_file(self, tmp_path, capsys):
        bad = tmp_path / "bad.csv"
        bad.write_text("stratum,age_index,period_index,deaths,person_years\n"
                       "0,0,0,-1,10\n")
        code, err = run_cli(capsys, "ingest", "--input", bad)
        assert code == 1
        assert err["error"] == "IngestError"
        assert "negative deaths" in err["message"]


class TestBundledDataset:
    def test_reference_fit_mixes_below_psrf_bound(self, tmp_path, capsys):
        # end-to-end mixing check on the shipped dataset; takes ~1 minute
        code, out = run_cli(
            capsys, "fit", "--input", BUNDLED_DATA,
            "--config", BUNDLED_CONFIG, "--out", tmp_path,
        )
        assert code == 0
        assert out["max_psrf"] < 1.05
        assert out["draws"] == 3000
        rows = data_rows(tmp_path / "posterior_summary.csv")
        by_label = {r[0]: float(r[5]) for r in rows[1:]}
        hyper = [lbl for lbl in by_label
                 if lbl.startswith(("kappa:", "rho_star:", "intercept"))]
        assert len(hyper) == 3 + 4 + 3
        for lbl in hyper:
            assert by_label[lbl] < 1.05, lbl
