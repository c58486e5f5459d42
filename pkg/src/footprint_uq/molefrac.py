"""Footprint-to-mole-fraction conversion and the two synthetic flux regimes."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .domain import FluxField, Footprint, GridSpec, Space, ValidationError
from .ensemble import DEFAULT_EPS_CV, EnsembleStats, ensemble_stats


def mole_fraction(fp: Footprint, flux: FluxField) -> float:
    """Above-baseline mole fraction: the footprint/flux inner product."""
    if fp.space != Space.LINEAR:
        raise ValidationError("mole fraction needs a linear-space footprint")
    if fp.grid != flux.grid:
        raise ValidationError(f"grid mismatch: {fp.grid} vs {flux.grid}")
    return float(np.sum(fp.values * flux.values))


def mole_fraction_values(values: np.ndarray, flux: FluxField) -> float:
    if values.shape != flux.grid.shape:
        raise ValidationError(f"field shape {values.shape} != flux grid {flux.grid.shape}")
    return float(np.sum(values * flux.values))


def synth_bottomup_flux(seed: int, grid: GridSpec, n_hotspots: int = 12,
                        background: float = 0.05) -> FluxField:
    """Background level plus seeded Gaussian hotspots with lognormal amplitudes."""
    if n_hotspots < 0:
        raise ValidationError("n_hotspots must be >= 0")
    if background < 0:
        raise ValidationError("background must be >= 0")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x464C]))
    ii = np.arange(grid.n_lat)[:, None]
    jj = np.arange(grid.n_lon)[None, :]
    values = np.full(grid.shape, float(background))
    for _ in range(n_hotspots):
        ci = rng.uniform(0, grid.n_lat - 1)
        cj = rng.uniform(0, grid.n_lon - 1)
        width = rng.uniform(1.5, 4.0)
        amp = rng.lognormal(mean=0.0, sigma=1.0)
        values += amp * np.exp(-((ii - ci) ** 2 + (jj - cj) ** 2) / (2 * width**2))
    return FluxField(grid, values)


def uniform_flux(reference: FluxField) -> FluxField:
    """Constant field at the median of the reference's positive cells."""
    positive = reference.values[reference.values > 0]
    if positive.size == 0:
        raise ValidationError("reference flux has no positive cells")
    return FluxField(reference.grid, np.full(reference.grid.shape, float(np.median(positive))))


@dataclass(frozen=True)
class MoleFractionRecord:
    release_id: int
    time: float
    flux_id: str
    truth: float
    members: tuple[float, ...]
    stats: EnsembleStats


def molefrac_records(truth_fields: list[tuple[int, float, np.ndarray]],
                     member_fields: list[np.ndarray],
                     fluxes: dict[str, FluxField],
                     eps: float = DEFAULT_EPS_CV) -> list[MoleFractionRecord]:
    """One record per (release, flux field), in release-time order.

    truth_fields holds (release_id, time, full-grid truth) and member_fields
    the matching (N, n_lat, n_lon) stacks.
    """
    if len(truth_fields) != len(member_fields):
        raise ValidationError("truth and member field lists differ in length")
    order = sorted(range(len(truth_fields)), key=lambda k: (truth_fields[k][1], truth_fields[k][0]))
    records = []
    for flux_id, flux in fluxes.items():
        for k in order:
            rid, time, truth = truth_fields[k]
            truth_mf = mole_fraction_values(truth, flux)
            member_mf = [mole_fraction_values(m, flux) for m in member_fields[k]]
            records.append(MoleFractionRecord(
                rid, time, flux_id, truth_mf, tuple(member_mf),
                ensemble_stats(member_mf, eps)))
    return records


def write_records_csv(path: str | Path, records: list[MoleFractionRecord]) -> None:
    if not records:
        raise ValidationError("no mole-fraction records to write")
    n = len(records[0].members)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["release_id", "time", "flux_id", "truth"]
                   + [f"member_{k}" for k in range(n)] + ["mean", "std", "cv"])
        for r in records:
            w.writerow([r.release_id, repr(r.time), r.flux_id, repr(r.truth)]
                       + [repr(m) for m in r.members]
                       + [repr(r.stats.mean), repr(r.stats.std), repr(r.stats.cv)])


def read_records_csv(path: str | Path, eps: float = DEFAULT_EPS_CV) -> list[MoleFractionRecord]:
    out = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        member_cols = [c for c in reader.fieldnames if c.startswith("member_")]
        for row in reader:
            members = tuple(float(row[c]) for c in member_cols)
            out.append(MoleFractionRecord(
                int(row["release_id"]), float(row["time"]), row["flux_id"],
                float(row["truth"]), members, ensemble_stats(list(members), eps)))
    return out
