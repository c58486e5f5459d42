#!/usr/bin/env python3
"""Render the pipeline's CSV analysis products as static figures.

Standalone consumer of the documented CSV formats (maps, roses, series,
epoch logs); it never imports the pipeline package.  Figure kinds:

    footprint-panel   row of per-footprint map CSVs, shared log color scale
    map-grid          grid of aggregated map CSVs, shared color scale
    rose              16-sector direction rose (counts, optional statistic)
    timeseries        one line per series CSV
    training-curves   per-metric mean with +/-1 std band across seed CSVs

Usage: render.py --kind <kind> --in <csv> [<csv> ...] --out <png>
"""

from __future__ import annotations

import argparse
import csv
import math
import sys
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib.colors import LogNorm, Normalize  # noqa: E402

KINDS = ("footprint-panel", "map-grid", "rose", "timeseries", "training-curves")
EPOCH_METRICS = ("train_loss", "val_loss", "nmae", "mse", "acc", "iou", "r2")

plt.rcParams.update({"figure.dpi": 110, "savefig.dpi": 110, "font.size": 8})


class RenderError(RuntimeError):
    pass


def _rows(path: Path) -> list[dict]:
    if not path.exists():
        raise RenderError(f"{path}: no such file")
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise RenderError(f"{path}: empty CSV")
        out = []
        for k, row in enumerate(reader, start=2):
            out.append((k, row))
    if not out:
        raise RenderError(f"{path}: no data rows")
    return out


def _float(path, rownum, row, key):
    try:
        return float(row[key])
    except (KeyError, TypeError):
        raise RenderError(f"{path}: row {rownum}: missing column {key!r}")
    except ValueError:
        raise RenderError(f"{path}: row {rownum}: bad value {row[key]!r} for {key!r}")


def load_map(path: Path):
    """lat,lon,value,count -> (2-D value array, lats, lons)."""
    lats, lons, vals = [], [], []
    for rownum, row in _rows(path):
        lats.append(_float(path, rownum, row, "lat"))
        lons.append(_float(path, rownum, row, "lon"))
        vals.append(_float(path, rownum, row, "value"))
    ulat = np.unique(lats)
    ulon = np.unique(lons)
    grid = np.full((ulat.size, ulon.size), np.nan)
    li = {v: i for i, v in enumerate(ulat)}
    lj = {v: j for j, v in enumerate(ulon)}
    for lat, lon, val in zip(lats, lons, vals):
        grid[li[lat], lj[lon]] = val
    return grid, ulat, ulon


def load_rose(path: Path):
    sectors, counts, stats = [], [], []
    calm = 0
    for rownum, row in _rows(path):
        if row.get("sector_deg") == "calm":
            calm = int(_float(path, rownum, row, "count"))
            continue
        sectors.append(_float(path, rownum, row, "sector_deg"))
        counts.append(_float(path, rownum, row, "count"))
        stats.append(_float(path, rownum, row, "mean_stat"))
    return np.asarray(sectors), np.asarray(counts), np.asarray(stats), calm


def load_series(path: Path):
    times, values = [], []
    for rownum, row in _rows(path):
        times.append(_float(path, rownum, row, "time"))
        values.append(_float(path, rownum, row, "value"))
    return np.asarray(times), np.asarray(values)


def load_epochs(path: Path):
    cols = {m: [] for m in EPOCH_METRICS}
    epochs = []
    for rownum, row in _rows(path):
        epochs.append(_float(path, rownum, row, "epoch"))
        for m in EPOCH_METRICS:
            cols[m].append(_float(path, rownum, row, m))
    return np.asarray(epochs), {m: np.asarray(v) for m, v in cols.items()}


def _shared_norm(grids):
    flat = np.concatenate([g[np.isfinite(g)].ravel() for g in grids])
    if flat.size == 0:
        raise RenderError("all map cells are empty")
    if flat.min() < 0:
        bound = max(abs(flat.min()), abs(flat.max()), 1e-12)
        return Normalize(vmin=-bound, vmax=bound), "coolwarm"
    positive = flat[flat > 0]
    if positive.size == 0:
        return Normalize(vmin=0.0, vmax=1.0), "viridis"
    return LogNorm(vmin=positive.min(), vmax=max(positive.max(), positive.min() * 10)), \
        "viridis"


def _panel_title(path: Path) -> str:
    return path.stem.replace("panel_", "").replace("agg_", "").replace("mf_", "")


def build_map_figure(paths: list[Path], per_row: int = 4):
    loaded = [load_map(p) for p in paths]
    grids = [g for g, _, _ in loaded]
    norm, cmap = _shared_norm(grids)
    n = len(paths)
    rows = math.ceil(n / per_row)
    cols = min(n, per_row)
    fig, axes = plt.subplots(rows, cols, figsize=(2.6 * cols, 2.5 * rows),
                             squeeze=False)
    last = None
    for k, (path, (grid, lats, lons)) in enumerate(zip(paths, loaded)):
        ax = axes[k // per_row][k % per_row]
        shown = np.ma.masked_invalid(np.where(grid <= 0, np.nan, grid)
                                     if isinstance(norm, LogNorm) else grid)
        last = ax.pcolormesh(lons, lats, shown, norm=norm, cmap=cmap, shading="nearest")
        ax.set_title(_panel_title(path))
        ax.set_aspect("equal")
    for k in range(n, rows * cols):
        axes[k // per_row][k % per_row].axis("off")
    if last is not None:
        fig.colorbar(last, ax=[ax for row in axes for ax in row], shrink=0.8)
    return fig


def build_rose_figure(paths: list[Path]):
    sectors, counts, stats, calm = load_rose(paths[0])
    fig = plt.figure(figsize=(4.0, 4.0))
    ax = fig.add_subplot(projection="polar")
    ax.set_theta_zero_location("N")
    ax.set_theta_direction(-1)
    theta = np.radians(sectors)
    width = np.radians(360.0 / max(len(sectors), 1)) * 0.9
    has_stat = np.any(np.isfinite(stats))
    if has_stat:
        norm = Normalize(vmin=np.nanmin(stats), vmax=max(np.nanmax(stats), 1e-12))
        colors = plt.get_cmap("viridis")(norm(np.nan_to_num(stats)))
        bars = ax.bar(theta, counts, width=width, color=colors, edgecolor="black",
                      linewidth=0.4)
        sm = plt.cm.ScalarMappable(norm=norm, cmap="viridis")
        fig.colorbar(sm, ax=ax, shrink=0.7, label="sector mean statistic")
    else:
        ax.bar(theta, counts, width=width, color="#4878cf", edgecolor="black",
               linewidth=0.4)
    ax.set_title(f"{_panel_title(paths[0])} (calm: {calm})")
    return fig


def build_timeseries_figure(paths: list[Path], limit: int | None = None):
    fig, ax = plt.subplots(figsize=(7.0, 2.8))
    for path in paths:
        times, values = load_series(path)
        if limit:
            times, values = times[:limit], values[:limit]
        ax.plot(times, values, linewidth=0.9,
                label=path.stem.replace("series_", ""))
    ax.set_xlabel("time (h)")
    ax.legend(loc="upper right", fontsize=7)
    return fig


def build_training_curves_figure(paths: list[Path]):
    """Per-metric mean across seed logs with a +/-1 std shaded band."""
    runs = [load_epochs(p) for p in paths]
    epochs = runs[0][0]
    for path, (ep, _cols) in zip(paths[1:], runs[1:]):
        if ep.size != epochs.size:
            raise RenderError(f"{path}: epoch count differs between seed logs")
    fig, axes = plt.subplots(2, 3, figsize=(9.0, 5.0))
    panels = ("train_loss", "nmae", "mse", "acc", "iou", "r2")
    for ax, metric in zip(axes.ravel(), panels):
        stack = np.stack([cols[metric] for _, cols in runs])
        mean = stack.mean(axis=0)
        std = stack.std(axis=0)
        ax.plot(epochs, mean, color="#b2452c", linewidth=1.2, label=metric)
        ax.fill_between(epochs, mean - std, mean + std, color="#b2452c", alpha=0.25)
        if metric == "train_loss":
            vstack = np.stack([cols["val_loss"] for _, cols in runs])
            vmean = vstack.mean(axis=0)
            ax.plot(epochs, vmean, color="#4878cf", linewidth=1.2, label="val_loss")
            ax.fill_between(epochs, vmean - vstack.std(axis=0),
                            vmean + vstack.std(axis=0), color="#4878cf", alpha=0.25)
            ax.legend(fontsize=7)
        ax.set_title(metric)
        ax.set_xlabel("epoch")
    fig.tight_layout()
    return fig


def build_figure(kind: str, paths: list[Path], limit: int | None = None):
    if kind in ("footprint-panel", "map-grid"):
        return build_map_figure(paths)
    if kind == "rose":
        return build_rose_figure(paths)
    if kind == "timeseries":
        return build_timeseries_figure(paths, limit)
    if kind == "training-curves":
        return build_training_curves_figure(paths)
    raise RenderError(f"unknown figure kind {kind!r}")


def render(kind: str, paths: list[Path], out: Path, limit: int | None = None) -> None:
    fig = build_figure(kind, paths, limit)
    try:
        fig.savefig(out, format="png", metadata={"Software": "footprint-plots"})
    finally:
        plt.close(fig)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--kind", required=True, choices=KINDS)
    parser.add_argument("--in", dest="inputs", required=True, nargs="+")
    parser.add_argument("--out", required=True)
    parser.add_argument("--limit", type=int, default=None,
                        help="for timeseries: keep only the first N points")
    args = parser.parse_args(argv)
    try:
        render(args.kind, [Path(p) for p in args.inputs], Path(args.out), args.limit)
    except RenderError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
