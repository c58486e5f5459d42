"""Prediction post-processing: near-zero thresholding and quantile mapping.

The quantile map is fitted on pooled validation-set values in log space
(empirical quantiles at evenly spaced levels, nearest-rank "lower" order
statistics) and applied as a piecewise-linear monotone transfer with
end-slope extrapolation.  Pipeline order: predict (log) -> quantile-map
(log) -> inverse log transform -> threshold (linear).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .domain import Footprint, FormatError, Space, ValidationError

DEFAULT_N_QUANTILES = 101
DEFAULT_TAU_PERCENTILE = 5.0


def threshold_values(values: np.ndarray, tau: float) -> np.ndarray:
    if tau < 0:
        raise ValidationError(f"threshold must be >= 0, got {tau}")
    values = np.asarray(values)
    return np.where(values < tau, 0.0, values)


def threshold_footprint(fp: Footprint, tau: float) -> Footprint:
    """Zero every linear-space value below tau; idempotent."""
    if fp.space != Space.LINEAR:
        raise ValidationError("threshold operates on linear-space footprints")
    return Footprint(fp.grid, fp.release, threshold_values(fp.values, tau), fp.space)


def auto_threshold(linear_truth_pool: np.ndarray,
                   percentile: float = DEFAULT_TAU_PERCENTILE) -> float:
    """Data-driven near-zero cutoff: percentile of the nonzero truth values."""
    pool = np.asarray(linear_truth_pool).ravel()
    pool = pool[pool > 0]
    if pool.size == 0:
        return 0.0
    return float(np.percentile(pool, percentile, method="lower"))


@dataclass(frozen=True)
class QuantileMap:
    """Monotone source->target transfer defined by matched quantile knots."""

    levels: np.ndarray
    source: np.ndarray
    target: np.ndarray

    def __post_init__(self):
        for name in ("levels", "source", "target"):
            a = np.ascontiguousarray(getattr(self, name), dtype=np.float64)
            a.flags.writeable = False
            object.__setattr__(self, name, a)
        if not (self.levels.size == self.source.size == self.target.size >= 2):
            raise ValidationError("quantile map needs >= 2 aligned knots")
        if np.any(np.diff(self.source) < 0) or np.any(np.diff(self.target) < 0):
            raise ValidationError("quantile knots must be non-decreasing")


def fit_quantile_map(preds_pool: np.ndarray, truths_pool: np.ndarray,
                     n_q: int = DEFAULT_N_QUANTILES) -> QuantileMap:
    """Match the empirical quantiles of the prediction pool to the truth pool.

    Nearest-rank (lower) order statistics make mapped-pool quantiles land
    exactly on the truth knots at every level.
    """
    preds_pool = np.asarray(preds_pool).ravel()
    truths_pool = np.asarray(truths_pool).ravel()
    if preds_pool.size == 0 or truths_pool.size == 0:
        raise ValidationError("quantile map pools must be non-empty")
    if n_q < 2:
        raise ValidationError(f"n_q must be >= 2, got {n_q}")
    levels = np.linspace(0.0, 1.0, n_q)
    source = np.quantile(preds_pool, levels, method="lower")
    target = np.quantile(truths_pool, levels, method="lower")
    return QuantileMap(levels, source, target)


def _edge_slope(xs: np.ndarray, ys: np.ndarray, first: bool) -> float:
    spans = np.diff(xs)
    nz = np.nonzero(spans > 0)[0]
    if nz.size == 0:
        return 1.0
    k = nz[0] if first else nz[-1]
    return float((ys[k + 1] - ys[k]) / spans[k])


def apply_quantile_map_values(values: np.ndarray, qm: QuantileMap) -> np.ndarray:
    """Piecewise-linear transfer through the knots, end-slope extrapolation."""
    x = np.asarray(values, dtype=np.float64)
    xs, ys = qm.source, qm.target
    idx = np.clip(np.searchsorted(xs, x, side="right") - 1, 0, xs.size - 2)
    span = xs[idx + 1] - xs[idx]
    frac = np.where(span > 0, (x - xs[idx]) / np.where(span > 0, span, 1.0), 0.0)
    out = ys[idx] + frac * (ys[idx + 1] - ys[idx])
    lo, hi = xs[0], xs[-1]
    out = np.where(x < lo, ys[0] + _edge_slope(xs, ys, True) * (x - lo), out)
    out = np.where(x > hi, ys[-1] + _edge_slope(xs, ys, False) * (x - hi), out)
    return out


def apply_quantile_map(fp: Footprint, qm: QuantileMap) -> Footprint:
    if fp.space != Space.LOG:
        raise ValidationError("quantile map is fitted and applied in log space")
    return Footprint(fp.grid, fp.release, apply_quantile_map_values(fp.values, qm), fp.space)


def save_quantile_map(path: str | Path, qm: QuantileMap, config_hash: int = 0) -> None:
    doc = {
        "format": "QMAP1",
        "space": "log",
        "config_hash": config_hash,
        "levels": qm.levels.tolist(),
        "source": qm.source.tolist(),
        "target": qm.target.tolist(),
    }
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True))


def load_quantile_map(path: str | Path) -> QuantileMap:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from exc
    if doc.get("format") != "QMAP1":
        raise FormatError(f"{path}: not a quantile map file")
    return QuantileMap(np.asarray(doc["levels"]), np.asarray(doc["source"]),
                       np.asarray(doc["target"]))
