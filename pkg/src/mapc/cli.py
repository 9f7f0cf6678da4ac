"""Command-line interface.

Subcommands: synth, ingest, fit, forecast, crosspred, leecarter, score.
Configuration comes from an optional YAML file (--config); command-line
flags override file values.  Every output artifact carries the hash of
the effective configuration and the seed in ``#`` header comments, so
any file can be traced back to the run that made it.  Failures print a
machine-readable JSON error record to stderr and exit nonzero.  Set
MAPC_LOG_LEVEL (DEBUG, INFO, ...) to control log verbosity.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys

import numpy as np
import yaml

from . import forecast as fc
from . import io as mio
from . import leecarter as lc
from .model import ApcModelSpec, RegistryTable
from .sampler import SamplerConfig, run_chain
from .scoring import ScoreReport
from .simulate import generate_dataset

_log = logging.getLogger("mapc.cli")

_DEFAULT_LEVELS = (0.5, 0.8, 0.95)


def _parse_mask(text: str) -> tuple[int, int, int]:
    """``stratum:first-last`` with an inclusive period range."""
    try:
        stratum_part, _, range_part = text.partition(":")
        first, _, last = range_part.partition("-")
        out = (int(stratum_part), int(first), int(last) if last else int(first))
    except ValueError:
        raise ValueError(
            f"bad mask {text!r}; expected stratum:first-last"
        ) from None
    if out[1] > out[2] or min(out) < 0:
        raise ValueError(f"bad mask {text!r}; expected stratum:first-last")
    return out


def _parse_family_values(pairs) -> dict:
    out = {}
    for pair in pairs or ():
        name, _, value = pair.partition("=")
        if not value:
            raise ValueError(f"bad family value {pair!r}; expected name=value")
        out[name.strip()] = float(value)
    return out


@dataclasses.dataclass
class RunConfig:
    """Effective settings for one command after flag overrides."""

    input: str | None = None
    output_dir: str = "."
    seed: int | None = None
    spec: ApcModelSpec = dataclasses.field(default_factory=ApcModelSpec)
    sampler: SamplerConfig = dataclasses.field(default_factory=SamplerConfig)
    levels: tuple = _DEFAULT_LEVELS
    masks: tuple = ()

    @classmethod
    def load(cls, args) -> "RunConfig":
        payload = {}
        if getattr(args, "config", None):
            if not os.path.exists(args.config):
                raise FileNotFoundError(f"config file {args.config} not found")
            with open(args.config, "r", encoding="utf-8") as handle:
                payload = yaml.safe_load(handle) or {}

        spec = (
            mio.spec_from_dict(payload["model"])
            if "model" in payload
            else ApcModelSpec()
        )
        sampler_kwargs = dict(payload.get("sampler", {}))
        block = payload.get("forecast", {})
        cfg = cls(
            input=payload.get("input"),
            output_dir=payload.get("output_dir", "."),
            seed=payload.get("seed"),
            spec=spec,
            levels=tuple(block.get("levels", _DEFAULT_LEVELS)),
            masks=tuple(_parse_mask(m) for m in block.get("mask", ())),
        )

        # flags override file values
        if getattr(args, "input", None):
            cfg.input = args.input
        if getattr(args, "out", None):
            cfg.output_dir = args.out
        if getattr(args, "seed", None) is not None:
            cfg.seed = args.seed
        if getattr(args, "chains", None) is not None:
            sampler_kwargs["chains"] = args.chains
        if getattr(args, "levels", None):
            cfg.levels = tuple(
                float(v) for v in args.levels.split(",") if v.strip()
            )
        if getattr(args, "mask", None):
            cfg.masks = tuple(_parse_mask(m) for m in args.mask)
        if cfg.seed is not None:
            sampler_kwargs["seed"] = cfg.seed
        cfg.sampler = SamplerConfig(**sampler_kwargs)
        if cfg.seed is None:
            cfg.seed = cfg.sampler.seed
        for level in cfg.levels:
            if not 0.0 < level < 1.0:
                raise ValueError(f"interval level {level} outside (0, 1)")
        return cfg

    def fingerprint(self) -> str:
        return mio.config_fingerprint(self.describe())

    def describe(self) -> dict:
        return {
            "input": self.input,
            "output_dir": self.output_dir,
            "seed": self.seed,
            "model": mio.spec_to_dict(self.spec),
            "sampler": dataclasses.asdict(self.sampler),
            "levels": list(self.levels),
            "masks": [list(m) for m in self.masks],
        }


def _quantile_levels(interval_levels) -> tuple:
    out = {0.5}
    for level in interval_levels:
        out.add((1.0 - level) / 2.0)
        out.add((1.0 + level) / 2.0)
    return tuple(sorted(out))


def _load_table(cfg: RunConfig) -> tuple[RegistryTable, mio.IngestReport]:
    if not cfg.input:
        raise ValueError("no input file given (flag --input or config key)")
    table, report = mio.ingest_registry_csv(cfg.input)
    for stratum, first, last in cfg.masks:
        if stratum >= table.n_strata or last >= table.n_periods:
            raise ValueError(
                f"mask {stratum}:{first}-{last} outside the "
                f"{table.n_periods}x{table.n_strata} grid"
            )
        table = table.mask_block(stratum, np.arange(first, last + 1))
    # the report counts what the model will see, masks included
    report.n_missing = int((~table.observed).sum())
    return table, report


def _ensure_outdir(cfg: RunConfig) -> str:
    os.makedirs(cfg.output_dir, exist_ok=True)
    return cfg.output_dir


def cmd_synth(args) -> dict:
    cfg = RunConfig.load(args)
    seed = cfg.seed if cfg.seed is not None else 0
    spec = cfg.spec
    table, truth = generate_dataset(
        spec,
        n_ages=args.ages,
        n_periods=args.periods,
        n_strata=args.strata,
        age_period_ratio=args.ratio,
        exposure=args.exposure,
        kappa=_parse_family_values(args.kappa) or None,
        rho=_parse_family_values(args.rho) or None,
        seed=seed,
    )
    outdir = _ensure_outdir(cfg)
    data_path = os.path.join(outdir, args.name + ".csv")
    truth_path = os.path.join(outdir, args.name + "_truth.json")
    meta = {"config_hash": cfg.fingerprint(), "seed": seed}
    mio.write_registry_csv(table, data_path, metadata=meta)
    payload = dict(meta)
    payload["truth"] = truth.as_dict()
    mio._atomic_write_text(
        truth_path, json.dumps(payload, indent=2, sort_keys=True) + "\n"
    )
    return {
        "data": data_path,
        "truth": truth_path,
        "cells": int(table.counts.size),
        "config_hash": cfg.fingerprint(),
        "seed": seed,
    }


def cmd_ingest(args) -> dict:
    cfg = RunConfig.load(args)
    table, report = _load_table(cfg)
    out = {"report": report.as_dict(), "config_hash": cfg.fingerprint()}
    if getattr(args, "out", None):
        outdir = _ensure_outdir(cfg)
        path = os.path.join(outdir, "normalized.csv")
        mio.write_registry_csv(
            table, path,
            metadata={"config_hash": cfg.fingerprint(), "seed": cfg.seed},
        )
        out["normalized"] = path
    return out


def _run_fit(cfg: RunConfig):
    table, report = _load_table(cfg)
    samples = run_chain(table, cfg.spec, cfg.sampler)
    return table, report, samples


def cmd_fit(args) -> dict:
    cfg = RunConfig.load(args)
    table, report, samples = _run_fit(cfg)
    outdir = _ensure_outdir(cfg)
    fingerprint = cfg.fingerprint()
    summary_path = os.path.join(outdir, "posterior_summary.csv")
    archive_path = os.path.join(outdir, "samples.bin")
    mio.write_posterior_summary_csv(
        samples, summary_path, config_hash=fingerprint, seed=cfg.seed
    )
    mio.write_sample_archive(
        samples, archive_path, config_hash=fingerprint, seed=cfg.seed
    )
    worst = max(psrf for _, psrf in samples.diagnostics.values())
    return {
        "posterior_summary": summary_path,
        "archive": archive_path,
        "draws": samples.n_draws,
        "max_psrf": worst,
        "acceptance": samples.acceptance,
        "ingest": report.as_dict(),
        "config_hash": fingerprint,
        "seed": cfg.seed,
    }


def cmd_forecast(args) -> dict:
    cfg = RunConfig.load(args)
    table, report, samples = _run_fit(cfg)
    outdir = _ensure_outdir(cfg)
    fingerprint = cfg.fingerprint()
    summary = fc.predictive_summary(
        samples, table, levels=_quantile_levels(cfg.levels)
    )
    cells = ~table.observed if cfg.masks else None
    path = os.path.join(outdir, "predictions.csv")
    mio.write_prediction_csv(
        path, summary, model="apc", config_hash=fingerprint,
        seed=cfg.seed, cells=cells,
    )
    n_cells = int(cells.sum()) if cells is not None else table.counts.size
    return {
        "predictions": path,
        "cells": n_cells,
        "masked_only": cells is not None,
        "config_hash": fingerprint,
        "seed": cfg.seed,
    }


def cmd_crosspred(args) -> dict:
    cfg = RunConfig.load(args)
    table, report = _load_table(cfg)
    plan = fc.CrossPredictionPlan(levels=tuple(cfg.levels))
    results = fc.run_cross_prediction(table, cfg.spec, cfg.sampler, plan)
    outdir = _ensure_outdir(cfg)
    fingerprint = cfg.fingerprint()

    report_path = os.path.join(outdir, "crosspred_report.csv")
    lines = [f"# config_hash: {fingerprint}", f"# seed: {cfg.seed}"]
    coverage_cols = [f"coverage_{level:g}" for level in sorted(cfg.levels)]
    lines.append(
        ",".join(
            ["window", "target_stratum", "seed", "mean_dss", "mse"]
            + coverage_cols
        )
    )
    for res in results:
        fields = [
            str(res.window), str(res.target_stratum), str(res.seed),
            repr(float(res.report.mean_dss)), repr(float(res.report.mse)),
        ]
        fields += [
            repr(float(res.report.coverage[level]))
            for level in sorted(cfg.levels)
        ]
        lines.append(",".join(fields))
    mio._atomic_write_text(report_path, "\n".join(lines) + "\n")

    curve_path = os.path.join(outdir, "crosspred_cumulative_dss.csv")
    lines = [f"# config_hash: {fingerprint}", f"# seed: {cfg.seed}"]
    lines.append(
        "window,target_stratum,step,period_index,per_period_dss,cumulative_dss"
    )
    for res in results:
        for step, period in enumerate(res.periods):
            lines.append(
                ",".join(
                    [
                        str(res.window), str(res.target_stratum), str(step),
                        str(int(period)),
                        repr(float(res.report.per_period_dss[step])),
                        repr(float(res.report.cumulative_dss[step])),
                    ]
                )
            )
    mio._atomic_write_text(curve_path, "\n".join(lines) + "\n")
    return {
        "report": report_path,
        "cumulative_dss": curve_path,
        "scenarios": len(results),
        "config_hash": fingerprint,
        "seed": cfg.seed,
    }


def cmd_leecarter(args) -> dict:
    cfg = RunConfig.load(args)
    if not cfg.input:
        raise ValueError("no input file given (flag --input or config key)")
    table, report = mio.ingest_registry_csv(cfg.input)
    outdir = _ensure_outdir(cfg)
    fingerprint = cfg.fingerprint()
    rng = np.random.default_rng(cfg.seed)
    levels = _quantile_levels(cfg.levels)
    draws = args.draws

    if cfg.masks:
        jobs = []
        for stratum, first, last in cfg.masks:
            if stratum >= table.n_strata or last >= table.n_periods:
                raise ValueError(f"mask {stratum}:{first}-{last} out of range")
            jobs.append((stratum, first, last))
    elif args.horizon:
        jobs = [
            (r, table.n_periods, table.n_periods + args.horizon - 1)
            for r in range(table.n_strata)
        ]
    else:
        raise ValueError("give --mask windows or --horizon for extrapolation")

    rows = []
    for stratum, first, last in jobs:
        horizon = last - first + 1
        if first == 0 and last < table.n_periods - 1:
            fit_slice = slice(last + 1, table.n_periods)
            direction = "backward"
        elif first > 0:
            # forward projection trained on everything before the window
            fit_slice = slice(0, first)
            direction = "forward"
        else:
            raise ValueError("mask window covers every period")
        fit = lc.fit_lee_carter(
            np.asarray(table.counts[:, fit_slice, stratum], float),
            exposure=np.asarray(table.exposure[:, fit_slice, stratum], float),
        )
        path = lc.extrapolate_kappa(fit, horizon, direction=direction)
        periods = np.arange(first, last + 1)
        if last < table.n_periods:
            exposure = table.exposure[:, first:last + 1, stratum]
        else:
            # beyond the table: hold the final observed exposure
            exposure = np.repeat(
                table.exposure[:, -1:, stratum], horizon, axis=1
            )
        if direction == "backward":
            # step h lands on period last+1-h, so reverse into step order
            exposure = exposure[:, ::-1]
            periods = periods[::-1]
        summary = lc.lee_carter_predictive(
            fit, path, exposure, rng, draws, levels=levels
        )
        for h, period in enumerate(periods):
            for i in range(table.n_ages):
                rows.append((stratum, i, int(period), summary, h))

    pred_path = os.path.join(outdir, "leecarter_predictions.csv")
    level_list = sorted(levels)
    header = ["stratum", "age_index", "period_index", "mean", "sd"]
    header += [f"count_q{level:g}" for level in level_list]
    header += [f"rate_q{level:g}" for level in level_list]
    lines = [
        "# model: leecarter",
        f"# config_hash: {fingerprint}",
        f"# seed: {cfg.seed}",
        ",".join(header),
    ]
    for stratum, i, period, summary, h in rows:
        fields = [
            str(stratum), str(i), str(period),
            repr(float(summary.mean[i, h])),
            repr(float(summary.sd[i, h])),
        ]
        fields += [
            repr(float(summary.count_quantiles[level][i, h]))
            for level in level_list
        ]
        fields += [
            repr(float(summary.rate_quantiles[level][i, h]))
            for level in level_list
        ]
        lines.append(",".join(fields))
    mio._atomic_write_text(pred_path, "\n".join(lines) + "\n")
    return {
        "predictions": pred_path,
        "rows": len(rows),
        "config_hash": fingerprint,
        "seed": cfg.seed,
    }


def _interval_pairs(quantile_levels) -> dict:
    pairs = {}
    for lo in quantile_levels:
        hi = 1.0 - lo
        if lo < 0.5 and any(abs(q - hi) < 1e-9 for q in quantile_levels):
            pairs[round(hi - lo, 10)] = (lo, hi)
    return pairs


def cmd_score(args) -> dict:
    cfg = RunConfig.load(args)
    pred = mio.read_prediction_csv(args.pred)
    truth, _ = mio.ingest_registry_csv(args.truth)
    i, j, r = pred["age_index"], pred["period_index"], pred["stratum"]
    if (
        i.max() >= truth.n_ages
        or j.max() >= truth.n_periods
        or r.max() >= truth.n_strata
    ):
        raise ValueError("prediction cells outside the truth grid")
    if not truth.observed[i, j, r].all():
        raise ValueError("truth file lacks observations for predicted cells")
    y = truth.counts[i, j, r].astype(float)
    intervals = {}
    for width, (lo, hi) in _interval_pairs(pred["levels"]).items():
        intervals[width] = (pred[f"count_q{lo:g}"], pred[f"count_q{hi:g}"])
    report = ScoreReport.build(y, pred["mean"], pred["sd"], intervals)
    out = {
        "model": pred["meta"].get("model", "unknown"),
        "cells": int(y.size),
        "mean_dss": float(report.mean_dss),
        "mse": float(report.mse),
        "coverage": {str(k): float(v) for k, v in report.coverage.items()},
        "config_hash": cfg.fingerprint(),
    }
    if getattr(args, "out", None):
        outdir = _ensure_outdir(cfg)
        path = os.path.join(outdir, "scores.json")
        mio._atomic_write_text(path, json.dumps(out, indent=2) + "\n")
        out["scores"] = path
    return out


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mapc",
        description=(
            "Correlated multivariate age-period-cohort modeling: "
            "synthesize, ingest, fit, forecast, cross-predict, baseline, "
            "and score registry count data."
        ),
        epilog=(
            "Flags override --config file values. Set MAPC_LOG_LEVEL "
            "to control verbosity."
        ),
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, with_mask=True, with_levels=True):
        p.add_argument("--config", help="YAML configuration file")
        p.add_argument("--seed", type=int, help="random seed")
        p.add_argument("--chains", type=int, help="number of MCMC chains")
        p.add_argument("--out", help="output directory")
        if with_mask:
            p.add_argument(
                "--mask", action="append",
                help="hide a block, stratum:first-last (inclusive periods)",
            )
        if with_levels:
            p.add_argument(
                "--levels", help="comma-separated central interval levels"
            )

    p = sub.add_parser("synth", help="generate a seeded synthetic dataset")
    common(p, with_mask=False, with_levels=False)
    p.add_argument("--name", default="synthetic", help="output file stem")
    p.add_argument("--ages", type=int, default=5)
    p.add_argument("--periods", type=int, default=8)
    p.add_argument("--strata", type=int, default=2)
    p.add_argument("--ratio", type=int, default=1, help="age-period ratio")
    p.add_argument("--exposure", type=float, default=1e5)
    p.add_argument(
        "--kappa", action="append",
        help="innovation precision, family=value (repeatable)",
    )
    p.add_argument(
        "--rho", action="append",
        help="innovation correlation, family=value (repeatable)",
    )
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("ingest", help="parse and validate a registry CSV")
    common(p, with_levels=False)
    p.add_argument("--input", help="registry CSV path")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("fit", help="run the MCMC sampler")
    common(p)
    p.add_argument("--input", help="registry CSV path")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("forecast", help="fit, then summarize predictions")
    common(p)
    p.add_argument("--input", help="registry CSV path")
    p.set_defaults(func=cmd_forecast)

    p = sub.add_parser(
        "crosspred", help="mask each stratum per half-window and score"
    )
    common(p, with_mask=False)
    p.add_argument("--input", help="registry CSV path")
    p.set_defaults(func=cmd_crosspred)

    p = sub.add_parser("leecarter", help="log-bilinear baseline forecast")
    common(p)
    p.add_argument("--input", help="registry CSV path")
    p.add_argument("--horizon", type=int, help="extrapolate past the table")
    p.add_argument("--draws", type=int, default=4000)
    p.set_defaults(func=cmd_leecarter)

    p = sub.add_parser("score", help="score predictions against truth")
    common(p, with_mask=False, with_levels=False)
    p.add_argument("--pred", required=True, help="prediction CSV")
    p.add_argument("--truth", required=True, help="truth registry CSV")
    p.set_defaults(func=cmd_score)

    return parser


def main(argv=None) -> int:
    level = os.environ.get("MAPC_LOG_LEVEL", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING))
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        payload = args.func(args)
    except Exception as err:  # noqa: BLE001 - boundary for error records
        record = {
            "command": args.command,
            "error": type(err).__name__,
            "message": str(err),
        }
        print(json.dumps(record), file=sys.stderr)
        return 1
    print(json.dumps(payload, indent=2, sort_keys=True, default=float))
    return 0


if __name__ == "__main__":
    sys.exit(main())
