"""Evaluation metrics and aggregation products.

This module holds the pure reductions: standard prediction metrics,
direction-binned roses, temporal relative-uncertainty series, spatial
aggregates of per-release fields, coarse-gridded scatter maps, and the
Spearman spread/error correspondence.

Conventions (recorded in the summary metadata): NMAE normalizes by the
summed absolute truth; accuracy and IoU binarize both fields at the active
threshold; the spread/error correspondence uses Spearman rank correlation
with average-rank ties.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .domain import GridSpec, Release, ValidationError
from .synthmet import MetField, surface_wind

N_SECTORS = 16
SECTOR_WIDTH = 360.0 / N_SECTORS


@dataclass(frozen=True)
class MetricReport:
    nmae: float
    mse: float
    accuracy: float
    iou: float
    r2: float  # NaN when SS_tot == 0 but SS_res > 0

    def as_dict(self) -> dict:
        return {"nmae": self.nmae, "mse": self.mse, "accuracy": self.accuracy,
                "iou": self.iou, "r2": self.r2}


def metrics(pred: np.ndarray, truth: np.ndarray, active_tau: float) -> MetricReport:
    """Metric bundle for one aligned (prediction, truth) pair.

    Works on fields or pooled value vectors.  Binarization marks cells with
    value >= active_tau as active.
    """
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ValidationError(f"shape mismatch {pred.shape} vs {truth.shape}")
    if active_tau < 0:
        raise ValidationError("active_tau must be >= 0")

    diff = pred - truth
    nmae = float(np.sum(np.abs(diff)) / max(np.sum(np.abs(truth)), 1e-12))
    mse = float(np.mean(diff**2))

    a = pred >= active_tau
    b = truth >= active_tau
    accuracy = float(np.mean(a == b))
    union = np.count_nonzero(a | b)
    iou = float(np.count_nonzero(a & b) / union) if union else 1.0

    ss_res = float(np.sum(diff**2))
    ss_tot = float(np.sum((truth - truth.mean()) ** 2))
    if ss_tot > 0:
        r2 = 1.0 - ss_res / ss_tot
    else:
        r2 = 1.0 if ss_res == 0 else float("nan")
    return MetricReport(nmae, mse, accuracy, iou, r2)


@dataclass(frozen=True)
class WindRose:
    """16-sector direction histogram with an optional attached statistic."""

    counts: np.ndarray       # (16,) int
    mean_stat: np.ndarray    # (16,) float, NaN where a sector is empty
    calm: int

    def sector_centers(self) -> np.ndarray:
        return SECTOR_WIDTH * np.arange(N_SECTORS)


def direction_sector(direction_deg: float) -> int:
    """Sector index for a FROM-direction; sector 0 is centred on north."""
    return int(((direction_deg + SECTOR_WIDTH / 2) % 360.0) // SECTOR_WIDTH)


def wind_rose(releases: list[Release], met: MetField,
              attach: np.ndarray | None = None) -> WindRose:
    """Bin surface-wind directions at each release into 16 sectors.

    ``attach`` optionally provides one statistic per release (e.g. a
    per-footprint CV); per-sector means of it are reported.  Calm cases go
    to a separate bin.
    """
    if not releases:
        raise ValidationError("wind rose needs at least one release")
    if attach is not None and len(attach) != len(releases):
        raise ValidationError("attached statistic length != number of releases")
    counts = np.zeros(N_SECTORS, dtype=np.int64)
    sums = np.zeros(N_SECTORS)
    calm = 0
    for k, release in enumerate(releases):
        sw = surface_wind(met, release)
        if sw.calm:
            calm += 1
            continue
        s = direction_sector(sw.direction_deg)
        counts[s] += 1
        if attach is not None:
            sums[s] += float(attach[k])
    with np.errstate(invalid="ignore"):
        mean_stat = np.where(counts > 0, sums / np.maximum(counts, 1), np.nan)
    if attach is None:
        mean_stat = np.full(N_SECTORS, np.nan)
    return WindRose(counts, mean_stat, calm)


def temporal_cv_series(records: list[tuple[float, int, tuple[float, ...]]],
                       eps: float) -> list[tuple[float, int, float]]:
    """Per-release CV over ensemble members, ordered by release time."""
    rows = []
    for time, rid, members in sorted(records, key=lambda r: (r[0], r[1])):
        m = np.asarray(members, dtype=np.float64)
        if m.size < 2:
            raise ValidationError(f"release {rid}: need >= 2 members")
        rows.append((float(time), int(rid), float(m.std() / (m.mean() + eps))))
    return rows


@dataclass(frozen=True)
class SpatialAggregate:
    """Per-cell means of per-release statistics plus contribution counts.

    Cells never covered by any release patch have count 0 and NaN means
    (flagged, not silently zero).
    """

    means: dict[str, np.ndarray]
    count: np.ndarray


def spatial_aggregate(stat_fields: list[dict[str, np.ndarray]],
                      coverage: list[np.ndarray], grid: GridSpec) -> SpatialAggregate:
    """Average per-release full-grid fields over their covered cells."""
    if len(stat_fields) != len(coverage):
        raise ValidationError("stat fields and coverage lists differ in length")
    count = np.zeros(grid.shape, dtype=np.int64)
    sums: dict[str, np.ndarray] = {}
    for fields, cov in zip(stat_fields, coverage):
        cov = np.asarray(cov, dtype=bool)
        if cov.shape != grid.shape:
            raise ValidationError("coverage mask shape != grid shape")
        count += cov
        for name, values in fields.items():
            if values.shape != grid.shape:
                raise ValidationError(f"field {name!r} shape != grid shape")
            sums.setdefault(name, np.zeros(grid.shape))
            sums[name] += np.where(cov, values, 0.0)
    means = {}
    for name, total in sums.items():
        with np.errstate(invalid="ignore"):
            means[name] = np.where(count > 0, total / np.maximum(count, 1), np.nan)
    return SpatialAggregate(means, count)


def scatter_to_grid(points: list[tuple[float, float, float]],
                    coarse: GridSpec) -> tuple[np.ndarray, np.ndarray]:
    """Mean of point values per coarse cell; empty cells are NaN with count 0."""
    count = np.zeros(coarse.shape, dtype=np.int64)
    total = np.zeros(coarse.shape)
    for lat, lon, value in points:
        if not coarse.contains(lat, lon):
            raise ValidationError(f"point ({lat}, {lon}) outside the coarse grid")
        i, j = coarse.cell_of(lat, lon)
        count[i, j] += 1
        total[i, j] += value
    with np.errstate(invalid="ignore"):
        mean = np.where(count > 0, total / np.maximum(count, 1), np.nan)
    return mean, count


def _average_ranks(x: np.ndarray) -> np.ndarray:
    order = np.argsort(x, kind="mergesort")
    ranks = np.empty(x.size)
    ranks[order] = np.arange(1, x.size + 1)
    _vals, inverse, counts = np.unique(x, return_inverse=True, return_counts=True)
    group_sum = np.bincount(inverse, weights=ranks)
    return (group_sum / counts)[inverse]


def spread_error_correlation(spread: np.ndarray, abs_error: np.ndarray,
                             ) -> tuple[float, int]:
    """Spearman rank correlation between ensemble spread and absolute error.

    Non-finite entries (flagged cells) are excluded; fewer than 10 valid
    points is an error.
    """
    spread = np.asarray(spread, dtype=np.float64).ravel()
    abs_error = np.asarray(abs_error, dtype=np.float64).ravel()
    if spread.shape != abs_error.shape:
        raise ValidationError("spread and error must be aligned")
    valid = np.isfinite(spread) & np.isfinite(abs_error)
    n = int(valid.sum())
    if n < 10:
        raise ValidationError(f"need >= 10 valid points, got {n}")
    rs = _average_ranks(spread[valid])
    re = _average_ranks(abs_error[valid])
    rs = rs - rs.mean()
    re = re - re.mean()
    denom = np.sqrt(np.sum(rs**2) * np.sum(re**2))
    if denom == 0:
        return 0.0, n
    return float(np.sum(rs * re) / denom), n


# --- CSV products -----------------------------------------------------------

def write_map_csv(path: str | Path, grid: GridSpec, values: np.ndarray,
                  counts: np.ndarray) -> None:
    lats = grid.lat_centers()
    lons = grid.lon_centers()
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["lat", "lon", "value", "count"])
        for i in range(grid.n_lat):
            for j in range(grid.n_lon):
                w.writerow([repr(float(lats[i])), repr(float(lons[j])),
                            repr(float(values[i, j])), int(counts[i, j])])


def read_map_csv(path: str | Path) -> list[tuple[float, float, float, int]]:
    rows = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            rows.append((float(row["lat"]), float(row["lon"]),
                         float(row["value"]), int(row["count"])))
    return rows


def write_rose_csv(path: str | Path, rose: WindRose) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sector_deg", "count", "mean_stat"])
        for k, center in enumerate(rose.sector_centers()):
            w.writerow([repr(float(center)), int(rose.counts[k]),
                        repr(float(rose.mean_stat[k]))])
        w.writerow(["calm", rose.calm, repr(float("nan"))])


def write_series_csv(path: str | Path, rows: list[tuple[float, int, float]]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["time", "release_id", "value"])
        for time, rid, value in rows:
            w.writerow([repr(float(time)), int(rid), repr(float(value))])
