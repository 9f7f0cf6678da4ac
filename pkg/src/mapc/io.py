"""File formats: registry CSV, prediction CSV, posterior summaries,
and the binary sample archive.

Registry CSV schema (one row per cell):

    stratum,age_index,period_index,deaths,person_years

Indices are 0-based and must tile a full rectangle.  An empty deaths
field marks a masked (unobserved) cell.  Lines starting with ``#`` are
comments; ``# key: value`` comments written by this module carry
metadata (age-period ratio, config hash, seed) and are honoured on
re-ingest.  A pre-aggregation variant replaces ``person_years`` with
columns ``population_0,...,population_m`` holding year-boundary
populations; person-years are then mid-year estimates
(pop_t + pop_{t+1})/2 summed over the bin.

Sample archive byte layout (all little-endian):

    offset  0: magic ``MAPCSMP1`` (8 bytes)
    offset  8: uint32 doubles per record
    offset 12: uint32 reserved, zero
    offset 16: uint64 record count
    offset 24: records, each ``doubles per record`` float64 values

Record field order: chain id (1 double), intercept, age, period,
cohort, overdispersion, kappa values, Fisher-z correlation values;
array fields are C-order flattened.  The ``<name>.json`` sidecar is
authoritative for offsets, shapes, and family order, and also stores
the model spec, acceptance rates, and diagnostics so a read archive
reconstructs the sampler output exactly.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import os
import struct
import tempfile
from dataclasses import dataclass, field

import numpy as np

from .diagnostics import effective_sample_size, split_potential_scale_reduction
from .model import (
    ApcModelSpec,
    FamilyConfig,
    RegistryTable,
    fisher_z_to_correlation,
)
from .sampler import PosteriorSamples

_ARCHIVE_MAGIC = b"MAPCSMP1"
_REGISTRY_COLUMNS = ("stratum", "age_index", "period_index", "deaths")


class IngestError(ValueError):
    """Malformed registry input; the message cites the file line."""


@dataclass
class IngestReport:
    """What ingestion found: grid shape, missingness, aggregation log."""

    n_rows: int
    n_ages: int
    n_periods: int
    n_strata: int
    age_period_ratio: int
    n_missing: int
    interpolation_log: list = field(default_factory=list)

    def validate(self) -> None:
        if self.n_rows != self.n_ages * self.n_periods * self.n_strata:
            raise ValueError("parsed rows do not tile the grid")

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)


def _atomic_write_bytes(path: str, payload: bytes) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as handle:
            handle.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _atomic_write_text(path: str, text: str) -> None:
    _atomic_write_bytes(path, text.encode("utf-8"))


def config_fingerprint(mapping: dict) -> str:
    """Short stable hash of a configuration mapping."""
    blob = json.dumps(mapping, sort_keys=True, default=str)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


def spec_to_dict(spec: ApcModelSpec) -> dict:
    return {
        name: dataclasses.asdict(spec.family(name))
        for name in ("age", "period", "cohort", "overdispersion")
    }


def spec_from_dict(payload: dict) -> ApcModelSpec:
    return ApcModelSpec(
        **{name: FamilyConfig(**cfg) for name, cfg in payload.items()}
    )


def aggregate_populations(populations) -> float:
    """Person-years for one bin from year-boundary populations.

    Mid-year estimates are the averages of consecutive boundary values;
    the bin total is their sum, e.g. (100, 110, 120) -> 105 + 115 = 220.
    """
    pops = np.asarray(populations, dtype=float)
    if pops.ndim != 1 or pops.shape[0] < 2:
        raise ValueError("need at least two year-boundary populations")
    return float(0.5 * (pops[:-1] + pops[1:]).sum())


def _parse_directives(path: str) -> dict:
    out = {}
    with open(path, "r", encoding="utf-8") as handle:
        for raw in handle:
            line = raw.strip()
            if not line.startswith("#"):
                continue
            body = line.lstrip("#").strip()
            if ":" in body:
                key, _, value = body.partition(":")
                out[key.strip()] = value.strip()
    return out


def ingest_registry_csv(
    path: str, age_period_ratio: int | None = None
) -> tuple[RegistryTable, IngestReport]:
    """Parse a cell-per-row registry CSV into a dense masked table.

    The grid must be rectangular with contiguous 0-based indices.
    ``age_period_ratio`` overrides the file's directive (default 1).
    """
    directives = _parse_directives(path)
    if age_period_ratio is None:
        age_period_ratio = int(directives.get("age_period_ratio", 1))

    rows = []
    with open(path, "r", encoding="utf-8") as handle:
        reader = csv.reader(handle)
        header = None
        for lineno, record in enumerate(reader, start=1):
            if not record or record[0].lstrip().startswith("#"):
                continue
            if all(not cell.strip() for cell in record):
                continue
            if header is None:
                header = [cell.strip() for cell in record]
                continue
            rows.append((lineno, record))
    if header is None:
        raise IngestError("no header row found")

    population_cols = [c for c in header if c.startswith("population_")]
    if population_cols:
        expected = list(_REGISTRY_COLUMNS) + [
            f"population_{t}" for t in range(len(population_cols))
        ]
        mode = "population"
    else:
        expected = list(_REGISTRY_COLUMNS) + ["person_years"]
        mode = "direct"
    if header != expected:
        raise IngestError(
            f"header {header} does not match expected columns {expected}"
        )

    cells = {}
    log = []
    for lineno, record in rows:
        if len(record) != len(expected):
            raise IngestError(
                f"row {lineno}: expected {len(expected)} fields, "
                f"got {len(record)}"
            )
        try:
            r = int(record[0])
            i = int(record[1])
            j = int(record[2])
        except ValueError as err:
            raise IngestError(f"row {lineno}: bad index field ({err})") from None
        deaths_field = record[3].strip()
        if deaths_field == "":
            deaths, observed = 0, False
        else:
            try:
                deaths = int(deaths_field)
            except ValueError:
                raise IngestError(
                    f"row {lineno}: deaths must be an integer or empty"
                ) from None
            if deaths < 0:
                raise IngestError(f"row {lineno}: negative deaths")
            observed = True
        if mode == "direct":
            try:
                years = float(record[4])
            except ValueError:
                raise IngestError(
                    f"row {lineno}: person_years must be numeric"
                ) from None
        else:
            try:
                pops = [float(v) for v in record[4:]]
            except ValueError:
                raise IngestError(
                    f"row {lineno}: population fields must be numeric"
                ) from None
            if min(pops) <= 0:
                raise IngestError(f"row {lineno}: nonpositive population")
            years = aggregate_populations(pops)
        if years <= 0:
            raise IngestError(f"row {lineno}: nonpositive person_years")
        if min(r, i, j) < 0:
            raise IngestError(f"row {lineno}: negative index")
        if (i, j, r) in cells:
            raise IngestError(f"row {lineno}: duplicate cell ({i}, {j}, {r})")
        cells[(i, j, r)] = (deaths, years, observed)
    if not cells:
        raise IngestError("no data rows")
    if mode == "population":
        width = len(population_cols) - 1
        log.append(
            f"aggregated person-years from {len(population_cols)} yearly "
            f"populations per row ({width}-year bins) over {len(cells)} rows"
        )

    I = 1 + max(key[0] for key in cells)
    J = 1 + max(key[1] for key in cells)
    R = 1 + max(key[2] for key in cells)
    if len(cells) != I * J * R:
        missing = I * J * R - len(cells)
        raise IngestError(
            f"grid is not rectangular: {I}x{J}x{R} needs {I * J * R} "
            f"cells, found {len(cells)} ({missing} absent)"
        )
    counts = np.zeros((I, J, R), dtype=np.int64)
    exposure = np.zeros((I, J, R))
    observed = np.zeros((I, J, R), dtype=bool)
    for (i, j, r), (deaths, years, seen) in cells.items():
        counts[i, j, r] = deaths
        exposure[i, j, r] = years
        observed[i, j, r] = seen

    table = RegistryTable(
        counts=counts,
        exposure=exposure,
        observed=observed,
        age_period_ratio=age_period_ratio,
    )
    report = IngestReport(
        n_rows=len(cells),
        n_ages=I,
        n_periods=J,
        n_strata=R,
        age_period_ratio=age_period_ratio,
        n_missing=int((~observed).sum()),
        interpolation_log=log,
    )
    report.validate()
    return table, report


def write_registry_csv(table: RegistryTable, path: str, metadata=None) -> None:
    """Serialize a table to the canonical cell schema (atomically)."""
    lines = [f"# age_period_ratio: {table.age_period_ratio}"]
    for key, value in (metadata or {}).items():
        lines.append(f"# {key}: {value}")
    lines.append("stratum,age_index,period_index,deaths,person_years")
    I, J, R = table.counts.shape
    for r in range(R):
        for i in range(I):
            for j in range(J):
                deaths = (
                    str(int(table.counts[i, j, r]))
                    if table.observed[i, j, r]
                    else ""
                )
                lines.append(
                    f"{r},{i},{j},{deaths},{float(table.exposure[i, j, r])!r}"
                )
    _atomic_write_text(path, "\n".join(lines) + "\n")


def write_prediction_csv(
    path: str,
    summary,
    model: str,
    config_hash: str = "",
    seed=None,
    cells: np.ndarray | None = None,
) -> None:
    """Write cell predictions: mean, sd, and quantiles per level.

    ``cells`` optionally restricts output to a boolean cell mask.
    """
    levels = sorted(summary.count_quantiles)
    header = ["stratum", "age_index", "period_index", "mean", "sd"]
    header += [f"count_q{level:g}" for level in levels]
    header += [f"rate_q{level:g}" for level in levels]
    lines = [f"# model: {model}"]
    if config_hash:
        lines.append(f"# config_hash: {config_hash}")
    if seed is not None:
        lines.append(f"# seed: {seed}")
    lines.append(",".join(header))
    I, J, R = summary.mean.shape
    for r in range(R):
        for i in range(I):
            for j in range(J):
                if cells is not None and not cells[i, j, r]:
                    continue
                fields = [
                    str(r), str(i), str(j),
                    repr(float(summary.mean[i, j, r])),
                    repr(float(summary.sd[i, j, r])),
                ]
                fields += [
                    repr(float(summary.count_quantiles[level][i, j, r]))
                    for level in levels
                ]
                fields += [
                    repr(float(summary.rate_quantiles[level][i, j, r]))
                    for level in levels
                ]
                lines.append(",".join(fields))
    _atomic_write_text(path, "\n".join(lines) + "\n")


def read_prediction_csv(path: str) -> dict:
    """Read a prediction CSV into aligned arrays plus metadata."""
    meta = _parse_directives(path)
    with open(path, "r", encoding="utf-8") as handle:
        reader = csv.reader(handle)
        header = None
        records = []
        for record in reader:
            if not record or record[0].lstrip().startswith("#"):
                continue
            if header is None:
                header = [cell.strip() for cell in record]
                continue
            records.append(record)
    if header is None or not records:
        raise IngestError("prediction file has no data")
    columns = {name: idx for idx, name in enumerate(header)}
    levels = sorted(
        float(name[len("count_q"):])
        for name in header
        if name.startswith("count_q")
    )
    out = {
        "meta": meta,
        "levels": levels,
        "stratum": np.array([int(rec[columns["stratum"]]) for rec in records]),
        "age_index": np.array(
            [int(rec[columns["age_index"]]) for rec in records]
        ),
        "period_index": np.array(
            [int(rec[columns["period_index"]]) for rec in records]
        ),
        "mean": np.array([float(rec[columns["mean"]]) for rec in records]),
        "sd": np.array([float(rec[columns["sd"]]) for rec in records]),
    }
    for level in levels:
        for prefix in ("count_q", "rate_q"):
            name = f"{prefix}{level:g}"
            out[name] = np.array(
                [float(rec[columns[name]]) for rec in records]
            )
    return out


def _chain_stacked(samples: PosteriorSamples, draws: np.ndarray) -> np.ndarray:
    ids = samples.chain_ids
    n_chains = int(ids.max()) + 1 if ids.size else 1
    per = draws.shape[0] // n_chains
    return draws[: n_chains * per].reshape(n_chains, per)


def _summary_rows(samples: PosteriorSamples, include_overdispersion=False):
    def row(label, draws):
        chains = _chain_stacked(samples, draws)
        return (
            label,
            float(np.median(draws)),
            float(np.quantile(draws, 0.025)),
            float(np.quantile(draws, 0.975)),
            effective_sample_size(chains),
            split_potential_scale_reduction(chains),
        )

    for r in range(samples.intercept.shape[1]):
        yield row(f"intercept[{r}]", samples.intercept[:, r])
    for name in ("age", "period", "cohort"):
        draws = getattr(samples, name)
        if draws.ndim == 2:
            for i in range(draws.shape[1]):
                yield row(f"{name}[{i}]", draws[:, i])
        else:
            for r in range(draws.shape[2]):
                for i in range(draws.shape[1]):
                    yield row(f"{name}[{i},{r}]", draws[:, i, r])
    if include_overdispersion and samples.overdispersion.size:
        S, I, J, R = samples.overdispersion.shape
        for r in range(R):
            for i in range(I):
                for j in range(J):
                    yield row(
                        f"overdispersion[{i},{j},{r}]",
                        samples.overdispersion[:, i, j, r],
                    )
    for name in sorted(samples.kappa):
        yield row(f"kappa:{name}", samples.kappa[name])
    for name in sorted(samples.rho_star):
        yield row(f"rho_star:{name}", samples.rho_star[name])
        dim = samples.n_strata
        yield row(
            f"rho:{name}",
            fisher_z_to_correlation(samples.rho_star[name], dim),
        )


def write_posterior_summary_csv(
    samples: PosteriorSamples,
    path: str,
    config_hash: str = "",
    seed=None,
    include_overdispersion: bool = False,
) -> None:
    """Per-parameter posterior table: median, 95% bounds, ESS, PSRF."""
    import io as stringio

    buffer = stringio.StringIO()
    if config_hash:
        buffer.write(f"# config_hash: {config_hash}\n")
    if seed is not None:
        buffer.write(f"# seed: {seed}\n")
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(["parameter", "median", "q2.5", "q97.5", "ess", "psrf"])
    for label, med, lo, hi, ess, psrf in _summary_rows(
        samples, include_overdispersion
    ):
        writer.writerow(
            [label, repr(med), repr(lo), repr(hi),
             repr(float(ess)), repr(float(psrf))]
        )
    _atomic_write_text(path, buffer.getvalue())


def _archive_layout(samples: PosteriorSamples) -> list:
    layout = [("chain_id", (1,))]
    for name in ("intercept", "age", "period", "cohort", "overdispersion"):
        layout.append((name, getattr(samples, name).shape[1:]))
    for name in sorted(samples.kappa):
        layout.append((f"kappa:{name}", (1,)))
    for name in sorted(samples.rho_star):
        layout.append((f"rho_star:{name}", (1,)))
    return layout


def write_sample_archive(
    samples: PosteriorSamples,
    path: str,
    config_hash: str = "",
    seed=None,
) -> None:
    """Write draws as flat binary records plus a JSON sidecar index."""
    layout = _archive_layout(samples)
    S = samples.n_draws
    record_doubles = sum(int(np.prod(shape)) for _, shape in layout)
    payload = np.empty((S, record_doubles), dtype="<f8")
    offset = 0
    offsets = {}
    for name, shape in layout:
        size = int(np.prod(shape))
        offsets[name] = offset
        if name == "chain_id":
            block = samples.chain_ids.astype(float)[:, None]
        elif name.startswith("kappa:"):
            block = samples.kappa[name.split(":", 1)[1]][:, None]
        elif name.startswith("rho_star:"):
            block = samples.rho_star[name.split(":", 1)[1]][:, None]
        else:
            block = getattr(samples, name).reshape(S, size)
        payload[:, offset:offset + size] = block
        offset += size

    head = _ARCHIVE_MAGIC + struct.pack("<IIQ", record_doubles, 0, S)
    _atomic_write_bytes(path, head + payload.tobytes())

    sidecar = {
        "version": 1,
        "record_doubles": record_doubles,
        "n_records": S,
        "dims": {
            "n_ages": samples.n_ages,
            "n_periods": samples.n_periods,
            "n_strata": samples.n_strata,
            "n_cohorts": samples.n_cohorts,
            "age_period_ratio": samples.age_period_ratio,
        },
        "layout": [
            {"name": name, "offset": offsets[name], "shape": list(shape)}
            for name, shape in layout
        ],
        "spec": spec_to_dict(samples.spec),
        "acceptance": dict(samples.acceptance),
        "clamp_events": samples.clamp_events,
        "diagnostics": {k: list(v) for k, v in samples.diagnostics.items()},
        "config_hash": config_hash,
        "seed": seed,
    }
    _atomic_write_text(
        path + ".json", json.dumps(sidecar, indent=2, sort_keys=True) + "\n"
    )


def read_sample_archive(path: str) -> PosteriorSamples:
    """Reconstruct sampler output from an archive and its sidecar."""
    with open(path + ".json", "r", encoding="utf-8") as handle:
        sidecar = json.load(handle)
    with open(path, "rb") as handle:
        blob = handle.read()
    if blob[:8] != _ARCHIVE_MAGIC:
        raise IngestError("bad archive magic")
    record_doubles, _, n_records = struct.unpack("<IIQ", blob[8:24])
    if record_doubles != sidecar["record_doubles"]:
        raise IngestError("archive and sidecar disagree on record size")
    if n_records != sidecar["n_records"]:
        raise IngestError("archive and sidecar disagree on record count")
    data = np.frombuffer(blob, dtype="<f8", offset=24)
    if data.size != n_records * record_doubles:
        raise IngestError("archive payload truncated")
    data = data.reshape(n_records, record_doubles)

    fields = {}
    for entry in sidecar["layout"]:
        size = int(np.prod(entry["shape"])) if entry["shape"] else 1
        block = data[:, entry["offset"]:entry["offset"] + size]
        fields[entry["name"]] = block.reshape(
            n_records, *entry["shape"]
        ).copy()

    kappa = {
        name.split(":", 1)[1]: fields[name][:, 0]
        for name in fields
        if name.startswith("kappa:")
    }
    rho_star = {
        name.split(":", 1)[1]: fields[name][:, 0]
        for name in fields
        if name.startswith("rho_star:")
    }
    dims = sidecar["dims"]
    return PosteriorSamples(
        spec=spec_from_dict(sidecar["spec"]),
        n_ages=dims["n_ages"],
        n_periods=dims["n_periods"],
        n_strata=dims["n_strata"],
        n_cohorts=dims["n_cohorts"],
        age_period_ratio=dims["age_period_ratio"],
        intercept=fields["intercept"],
        age=fields["age"],
        period=fields["period"],
        cohort=fields["cohort"],
        overdispersion=fields["overdispersion"],
        kappa=kappa,
        rho_star=rho_star,
        chain_ids=fields["chain_id"][:, 0].astype(int),
        acceptance=dict(sidecar["acceptance"]),
        clamp_events=sidecar["clamp_events"],
        diagnostics={
            k: tuple(v) for k, v in sidecar["diagnostics"].items()
        },
    )
