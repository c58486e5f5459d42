"""Seeded analytic meteorology: sheared zonal flow plus harmonic eddies.

The generator stands in for reanalysis winds.  The perturbation component
is derived from a streamfunction, so its horizontal divergence is zero
analytically (in the grid's equirectangular coordinates); the mean flow is
purely zonal and scaled with height by a power law.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from math import atan2, degrees
from pathlib import Path

import numpy as np

from .domain import FormatError, GridSpec, Release, ValidationError

DEFAULT_LEVELS = tuple(float(z) for z in np.geomspace(100.0, 18000.0, 7))
WIND_BOUND = 60.0  # m/s, generator guarantee


@dataclass(frozen=True)
class MetConfig:
    seed: int = 7
    base_u: float = -6.0          # m/s; negative = easterly regime
    perturbation: float = 2.5     # m/s amplitude bound of the eddy component
    n_modes: int = 6
    period_hours: float = 96.0
    shear_exponent: float = 0.15
    levels: tuple[float, ...] = DEFAULT_LEVELS
    time_step_hours: float = 6.0

    def __post_init__(self):
        if self.perturbation < 0:
            raise ValidationError("perturbation amplitude must be >= 0")
        if self.period_hours <= 0:
            raise ValidationError("temporal period must be > 0")
        if self.n_modes < 0:
            raise ValidationError("n_modes must be >= 0")
        if self.shear_exponent < 0:
            raise ValidationError("shear exponent must be >= 0")
        if self.time_step_hours <= 0:
            raise ValidationError("time step must be > 0")
        lv = np.asarray(self.levels, dtype=float)
        if lv.size < 1 or np.any(lv <= 0) or np.any(np.diff(lv) <= 0):
            raise ValidationError("levels must be positive and strictly increasing")


@dataclass(frozen=True)
class MetField:
    """Winds on (time, level, lat, lon) plus surface statics; immutable."""

    grid: GridSpec
    levels: np.ndarray   # m, strictly increasing
    times: np.ndarray    # hours, strictly increasing
    u: np.ndarray        # (T, L, n_lat, n_lon) m/s
    v: np.ndarray
    terrain: np.ndarray  # (n_lat, n_lon) m
    land: np.ndarray     # (n_lat, n_lon) in {0, 1}

    def __post_init__(self):
        for name in ("levels", "times", "u", "v", "terrain", "land"):
            a = np.ascontiguousarray(getattr(self, name), dtype=np.float64)
            a.flags.writeable = False
            object.__setattr__(self, name, a)
        t, l = self.times.size, self.levels.size
        if self.u.shape != (t, l, *self.grid.shape) or self.v.shape != self.u.shape:
            raise ValidationError(f"wind array shape {self.u.shape} inconsistent with axes")
        if np.any(np.diff(self.times) <= 0):
            raise ValidationError("times must be strictly increasing")
        if max(np.abs(self.u).max(), np.abs(self.v).max()) > WIND_BOUND:
            raise ValidationError(f"wind magnitude exceeds the {WIND_BOUND} m/s bound")


def _mode_table(cfg: MetConfig) -> dict[str, np.ndarray]:
    """Seeded per-mode parameters, drawn in a fixed order."""
    rng = np.random.default_rng(np.random.SeedSequence([int(cfg.seed), 0x4D45]))
    m = np.arange(1, cfg.n_modes + 1, dtype=float)
    p = rng.integers(1, 4, cfg.n_modes) * rng.choice([-1.0, 1.0], cfg.n_modes)
    q = rng.integers(1, 4, cfg.n_modes) * rng.choice([-1.0, 1.0], cfg.n_modes)
    phase = rng.uniform(0.0, 2 * np.pi, cfg.n_modes)
    lphase = rng.uniform(0.0, 2 * np.pi, cfg.n_modes)
    omega = 2 * np.pi * (m + rng.uniform(0.0, 1.0, cfg.n_modes)) / cfg.period_hours
    # 1/m amplitude decay, normalised so the summed derivative bound is 1
    harm = np.sum(1.0 / m) if cfg.n_modes else 1.0
    coef = 1.0 / (m * harm * 2 * np.pi * np.maximum(np.abs(p), np.abs(q)))
    return {"p": p, "q": q, "phase": phase, "lphase": lphase, "omega": omega, "coef": coef}


def _statics(cfg: MetConfig, grid: GridSpec) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(np.random.SeedSequence([int(cfg.seed), 0x5354]))
    y = np.linspace(0.0, 1.0, grid.n_lat)[:, None]
    x = np.linspace(0.0, 1.0, grid.n_lon)[None, :]
    terrain = np.zeros(grid.shape)
    for _ in range(3):
        cy, cx = rng.uniform(0.1, 0.9, 2)
        amp = rng.uniform(200.0, 1500.0)
        width = rng.uniform(0.08, 0.25)
        terrain += amp * np.exp(-((y - cy) ** 2 + (x - cx) ** 2) / (2 * width**2))
    ky, kx = rng.uniform(1.0, 2.5, 2)
    ph1, ph2 = rng.uniform(0.0, 2 * np.pi, 2)
    land = (np.sin(2 * np.pi * ky * y + ph1) + np.sin(2 * np.pi * kx * x + ph2) > 0.0)
    return terrain, land.astype(np.float64)


def generate_met(cfg: MetConfig, grid: GridSpec, time_range: tuple[float, float]) -> MetField:
    """Deterministic wind/static fields for (cfg, grid, time_range).

    u = base_u * (z / z_ref)^shear + eddies, v = eddies, where the eddy
    component comes from a streamfunction and is bounded by cfg.perturbation.
    """
    t0, t1 = float(time_range[0]), float(time_range[1])
    if t1 < t0:
        raise ValidationError(f"empty time range ({t0}, {t1})")
    z_ref = cfg.levels[0]
    shear = (np.asarray(cfg.levels) / z_ref) ** cfg.shear_exponent
    if abs(cfg.base_u) * shear.max() + cfg.perturbation > WIND_BOUND:
        raise ValidationError(
            f"config can exceed the {WIND_BOUND} m/s wind bound "
            f"(|base_u|*shear_top + perturbation = "
            f"{abs(cfg.base_u) * shear.max() + cfg.perturbation:.1f})")

    times = t0 + cfg.time_step_hours * np.arange(int(np.floor((t1 - t0) / cfg.time_step_hours)) + 1)
    n_t, n_l = times.size, len(cfg.levels)

    # normalised domain coordinates; extent uses n*d so the same config
    # samples the same analytic field at any resolution
    x = (grid.lon_centers() - grid.lon0) / (grid.n_lon * grid.d_lon)
    y = (grid.lat_centers() - grid.lat0) / (grid.n_lat * grid.d_lat)
    lfrac = np.arange(n_l) / max(n_l - 1, 1)

    up = np.zeros((n_t, n_l, grid.n_lat, grid.n_lon))
    vp = np.zeros_like(up)
    modes = _mode_table(cfg)
    for k in range(cfg.n_modes):
        arg = (2 * np.pi * (modes["p"][k] * x[None, None, None, :]
                            + modes["q"][k] * y[None, None, :, None])
               + modes["phase"][k]
               + modes["lphase"][k] * lfrac[None, :, None, None]
               + modes["omega"][k] * times[:, None, None, None])
        c = np.cos(arg) * modes["coef"][k] * 2 * np.pi
        up -= modes["q"][k] * c   # -d(psi)/dy
        vp += modes["p"][k] * c   # +d(psi)/dx

    u = cfg.base_u * shear[None, :, None, None] + cfg.perturbation * up
    v = cfg.perturbation * vp
    terrain, land = _statics(cfg, grid)
    return MetField(grid, np.asarray(cfg.levels, dtype=float), times, u, v, terrain, land)


def _axis_weights(pos: np.ndarray, centers0: float, step: float, n: int):
    f = np.clip((pos - centers0) / step, 0.0, n - 1.0)
    i = np.minimum(f.astype(np.int64), n - 2) if n > 1 else np.zeros_like(f, dtype=np.int64)
    w = f - i if n > 1 else np.zeros_like(f)
    return i, w


def wind_at_many(met: MetField, lats, lons, heights, times_h) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised wind lookup; see :func:`wind_at` for the contract."""
    lats = np.atleast_1d(np.asarray(lats, dtype=float))
    lons = np.atleast_1d(np.asarray(lons, dtype=float))
    heights = np.broadcast_to(np.asarray(heights, dtype=float), lats.shape)
    times_h = np.broadcast_to(np.asarray(times_h, dtype=float), lats.shape)
    g = met.grid
    ii = np.floor((lats - g.lat0) / g.d_lat + 0.5)
    jj = np.floor((lons - g.lon0) / g.d_lon + 0.5)
    bad = (ii < 0) | (ii >= g.n_lat) | (jj < 0) | (jj >= g.n_lon)
    if np.any(bad):
        k = int(np.argmax(bad))
        raise ValidationError(f"position ({lats[k]}, {lons[k]}) outside grid")

    iy, wy = _axis_weights(lats, g.lat0, g.d_lat, g.n_lat)
    ix, wx = _axis_weights(lons, g.lon0, g.d_lon, g.n_lon)

    # vertical: linear in log-height between bracketing levels, clamped
    logz = np.log(np.clip(heights, met.levels[0], met.levels[-1]))
    loglv = np.log(met.levels)
    iz = np.clip(np.searchsorted(loglv, logz, side="right") - 1, 0, max(met.levels.size - 2, 0))
    if met.levels.size > 1:
        wz = (logz - loglv[iz]) / (loglv[iz + 1] - loglv[iz])
    else:
        wz = np.zeros_like(logz)

    tt = np.clip(times_h, met.times[0], met.times[-1])
    it = np.clip(np.searchsorted(met.times, tt, side="right") - 1, 0, max(met.times.size - 2, 0))
    if met.times.size > 1:
        wt = (tt - met.times[it]) / (met.times[it + 1] - met.times[it])
    else:
        wt = np.zeros_like(tt)

    u = np.zeros(lats.shape)
    v = np.zeros(lats.shape)
    for a in (0, 1):
        fa = (1 - wt) if a == 0 else wt
        ita = it + (a if met.times.size > 1 else 0)
        for b in (0, 1):
            fb = fa * ((1 - wz) if b == 0 else wz)
            izb = iz + (b if met.levels.size > 1 else 0)
            for c in (0, 1):
                fc = fb * ((1 - wy) if c == 0 else wy)
                iyc = iy + (c if g.n_lat > 1 else 0)
                for d in (0, 1):
                    w = fc * ((1 - wx) if d == 0 else wx)
                    ixd = ix + (d if g.n_lon > 1 else 0)
                    u += w * met.u[ita, izb, iyc, ixd]
                    v += w * met.v[ita, izb, iyc, ixd]
    return u, v


def wind_at(met: MetField, lat: float, lon: float, height_m: float,
            time_h: float) -> tuple[float, float]:
    """Interpolated (u, v) at a point.

    Bilinear in the horizontal, linear in log-height between bracketing
    levels, linear in time; height and time are clamped to the sampled
    range, positions outside the grid are rejected.
    """
    u, v = wind_at_many(met, [lat], [lon], [height_m], [time_h])
    return float(u[0]), float(v[0])


@dataclass(frozen=True)
class SurfaceWind:
    speed: float
    direction_deg: float  # meteorological FROM-direction, 0 = north, clockwise
    calm: bool


CALM_SPEED = 1e-12


def surface_wind(met: MetField, release: Release) -> SurfaceWind:
    """Lowest-level wind at the release point, as speed + FROM-direction."""
    u, v = wind_at(met, release.lat, release.lon, float(met.levels[0]), release.time)
    speed = float(np.hypot(u, v))
    if speed < CALM_SPEED:
        return SurfaceWind(0.0, 0.0, True)
    direction = degrees(atan2(-u, -v)) % 360.0
    return SurfaceWind(speed, direction, False)


# --- MET1 container ----------------------------------------------------------
#
# Little-endian: fixed 64-byte prefix, then level heights, time stamps, and
# the u, v, terrain, land arrays as row-major float64.
#
#   magic "MET1" | version u32 | config hash u32 | n_time u32 | n_level u32
#   | n_lat u32 | n_lon u32 | pad 4 | lat0 lon0 d_lat d_lon (4 x f64)

_MET1 = struct.Struct("<4sIIIIII4x4d")
MET1_VERSION = 1


def write_met(path: str | Path, met: MetField, config_hash: int = 0) -> None:
    with open(path, "wb") as fh:
        fh.write(_MET1.pack(b"MET1", MET1_VERSION, config_hash & 0xFFFFFFFF,
                            met.times.size, met.levels.size,
                            met.grid.n_lat, met.grid.n_lon,
                            met.grid.lat0, met.grid.lon0,
                            met.grid.d_lat, met.grid.d_lon))
        for arr in (met.levels, met.times, met.u, met.v, met.terrain, met.land):
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def read_met(path: str | Path) -> MetField:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < _MET1.size:
        raise FormatError(f"{path}: truncated MET1 header")
    magic, version, _cfg, n_t, n_l, n_lat, n_lon, lat0, lon0, d_lat, d_lon = _MET1.unpack_from(raw)
    if magic != b"MET1":
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != MET1_VERSION:
        raise FormatError(f"{path}: unsupported MET1 version {version}")
    grid = GridSpec(n_lat, n_lon, lat0, lon0, d_lat, d_lon)
    counts = [n_l, n_t, n_t * n_l * n_lat * n_lon, n_t * n_l * n_lat * n_lon,
              n_lat * n_lon, n_lat * n_lon]
    need = _MET1.size + 8 * sum(counts)
    if len(raw) < need:
        raise FormatError(f"{path}: expected {need} bytes, got {len(raw)}")
    off = _MET1.size
    parts = []
    for n in counts:
        parts.append(np.frombuffer(raw, dtype="<f8", count=n, offset=off).astype(np.float64))
        off += 8 * n
    levels, times, u, v, terrain, land = parts
    return MetField(grid, levels, times,
                    u.reshape(n_t, n_l, n_lat, n_lon), v.reshape(n_t, n_l, n_lat, n_lon),
                    terrain.reshape(n_lat, n_lon), land.reshape(n_lat, n_lon))
