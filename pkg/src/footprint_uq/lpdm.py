"""Backward-trajectory particle dispersion oracle.

Desk-scale stand-in for a full Lagrangian dispersion model: horizontal
advection against the wind (backward time) plus Gaussian horizontal
diffusion and a vertical random walk between a reflecting ground and lid.
Particles below the surface-contact depth deposit dt/n_particles seconds of
sensitivity into the grid cell they currently occupy.
"""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .domain import (DatasetManifest, Footprint, GridSpec, ManifestEntry, Release, Space,
                     ValidationError, save_manifest, write_footprint)
from .synthmet import MetField, read_met, wind_at_many

M_PER_DEG_LAT = 111320.0  # fixed metric; longitude is scaled by cos(lat)


@dataclass(frozen=True)
class SimConfig:
    n_particles: int = 2000
    dt_seconds: float = 600.0
    t_back_hours: float = 72.0
    k_h: float = 1500.0       # horizontal diffusivity, m^2/s
    sigma_w: float = 0.6      # vertical random-walk scale, m/s
    h_surf: float = 100.0     # surface-contact depth, m
    h_top: float = 2000.0     # reflecting lid, m
    seed: int = 99

    def __post_init__(self):
        if self.n_particles < 1:
            raise ValidationError("n_particles must be >= 1")
        if self.dt_seconds <= 0:
            raise ValidationError("dt must be > 0")
        if self.t_back_hours <= 0:
            raise ValidationError("t_back_hours must be > 0")
        if not (0 < self.h_surf < self.h_top):
            raise ValidationError("need 0 < h_surf < h_top")
        if self.k_h < 0 or self.sigma_w < 0:
            raise ValidationError("diffusivities must be >= 0")

    @property
    def n_steps(self) -> int:
        return int(round(self.t_back_hours * 3600.0 / self.dt_seconds))


@dataclass(frozen=True)
class ParticleState:
    lat: float
    lon: float
    z: float
    alive: bool = True


def _reflect(z: np.ndarray, h_top: float) -> np.ndarray:
    """Fold z into [0, h_top] by reflection at both boundaries."""
    zm = np.mod(z, 2.0 * h_top)
    return h_top - np.abs(zm - h_top)


def _advance(lat, lon, z, alive, met: MetField, t_hours: float, cfg: SimConfig,
             rng: np.random.Generator) -> None:
    """One backward step, in place.  Draws 3 normals per alive particle."""
    idx = np.nonzero(alive)[0]
    if idx.size == 0:
        return
    u, v = wind_at_many(met, lat[idx], lon[idx], z[idx], t_hours)
    draws = rng.normal(size=(idx.size, 3))
    dt = cfg.dt_seconds
    sig_h = np.sqrt(2.0 * cfg.k_h * dt)
    dlat_m = -v * dt + sig_h * draws[:, 0]
    dlon_m = -u * dt + sig_h * draws[:, 1]
    new_lat = lat[idx] + dlat_m / M_PER_DEG_LAT
    new_lon = lon[idx] + dlon_m / (M_PER_DEG_LAT * np.cos(np.radians(lat[idx])))
    new_z = _reflect(z[idx] + cfg.sigma_w * np.sqrt(dt) * draws[:, 2], cfg.h_top)

    g = met.grid
    i = np.floor((new_lat - g.lat0) / g.d_lat + 0.5)
    j = np.floor((new_lon - g.lon0) / g.d_lon + 0.5)
    dead = (i < 0) | (i >= g.n_lat) | (j < 0) | (j >= g.n_lon)
    lat[idx], lon[idx], z[idx] = new_lat, new_lon, new_z
    alive[idx[dead]] = False


def step_particle(p: ParticleState, met: MetField, t_hours: float, cfg: SimConfig,
                  rng: np.random.Generator) -> ParticleState:
    """Advance one particle by one backward step.

    Dead particles pass through unchanged (and consume no random draws).
    """
    if not p.alive:
        return p
    lat = np.array([p.lat])
    lon = np.array([p.lon])
    z = np.array([p.z])
    alive = np.array([True])
    _advance(lat, lon, z, alive, met, t_hours, cfg, rng)
    return ParticleState(float(lat[0]), float(lon[0]), float(z[0]), bool(alive[0]))


def simulate_footprint(release: Release, met: MetField, cfg: SimConfig) -> Footprint:
    """Simulate the full backward release and return the linear footprint.

    Deposition uses the pre-step position: at each of the n_steps backward
    steps, every alive particle with z < h_surf adds dt/n_particles to its
    current cell, then all particles are advanced.  Deterministic for a
    given cfg.seed.
    """
    g = met.grid
    if not g.contains(release.lat, release.lon):
        raise ValidationError(f"release {release.id} outside domain")
    rng = np.random.default_rng(np.random.SeedSequence([int(cfg.seed)]))

    n = cfg.n_particles
    lat = np.full(n, release.lat)
    lon = np.full(n, release.lon)
    z = _reflect(np.full(n, release.altitude), cfg.h_top)
    alive = np.ones(n, dtype=bool)

    deposit = np.zeros(g.n_lat * g.n_lon)
    w = cfg.dt_seconds / n
    dt_hours = cfg.dt_seconds / 3600.0
    for k in range(cfg.n_steps):
        contact = alive & (z < cfg.h_surf)
        if np.any(contact):
            i = np.floor((lat[contact] - g.lat0) / g.d_lat + 0.5).astype(np.int64)
            j = np.floor((lon[contact] - g.lon0) / g.d_lon + 0.5).astype(np.int64)
            deposit += w * np.bincount(i * g.n_lon + j, minlength=deposit.size)
        _advance(lat, lon, z, alive, met, release.time - k * dt_hours, cfg, rng)
        if not alive.any():
            break
    return Footprint(g, release, deposit.reshape(g.shape), Space.LINEAR)


def release_sim_config(cfg: SimConfig, release: Release) -> SimConfig:
    """Per-release config whose seed is derived from (cfg.seed, release.id).

    Any subset of releases regenerates identically to a full run.
    """
    derived = np.random.SeedSequence([int(cfg.seed), int(release.id)]).generate_state(1)[0]
    return replace(cfg, seed=int(derived))


# --- dataset generation -------------------------------------------------------

_WORKER_MET: MetField | None = None


def _worker_init(met_path: str) -> None:
    global _WORKER_MET
    _WORKER_MET = read_met(met_path)


def _worker_job(args) -> int:
    release, cfg, fp_path, ft_path, feature_writer, config_hash = args
    fp = simulate_footprint(release, _WORKER_MET, release_sim_config(cfg, release))
    write_footprint(fp_path, fp, config_hash)
    if feature_writer is not None:
        feature_writer(release, _WORKER_MET, ft_path)
    return release.id


def generate_dataset(releases: list[Release], met: MetField, cfg: SimConfig,
                     out_dir: str | Path, split_ends: tuple[float, float],
                     feature_writer=None, config_hash: int = 0, jobs: int = 1,
                     met_path: str | Path | None = None) -> DatasetManifest:
    """Simulate a footprint (and optionally features) per release.

    Releases must be ordered in time; splits are cut at the two boundary
    times in ``split_ends`` (train <= t0 < val <= t1 < test).  With jobs > 1
    the work fans out over processes; per-release seeds make the result
    identical to a serial run.  ``feature_writer(release, met, path)`` is
    called for each release when given.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    times = [r.time for r in releases]
    if any(t2 < t1 for t1, t2 in zip(times, times[1:])):
        raise ValidationError("release times must be non-decreasing")
    for r in releases:
        if not met.grid.contains(r.lat, r.lon):
            raise ValidationError(f"release {r.id} outside domain")

    jobs = max(1, int(jobs))
    tasks = []
    entries = []
    t_train, t_val = split_ends
    if not t_train < t_val:
        raise ValidationError("split boundaries must be increasing")
    splits: dict[str, list[ManifestEntry]] = {"train": [], "val": [], "test": []}
    for r in releases:
        fp_name = f"fp_{r.id:05d}.fpg"
        ft_name = f"ft_{r.id:05d}.ftr"
        tasks.append((r, cfg, str(out_dir / fp_name), str(out_dir / ft_name),
                      feature_writer, config_hash))
        entry = ManifestEntry(r, fp_name, ft_name if feature_writer is not None else "")
        split = "train" if r.time <= t_train else ("val" if r.time <= t_val else "test")
        splits[split].append(entry)
        entries.append(entry)

    if jobs > 1:
        if met_path is None:
            raise ValidationError("parallel dataset generation needs met_path")
        import multiprocessing as mp
        methods = mp.get_all_start_methods()
        ctx = mp.get_context("fork" if "fork" in methods else "spawn")
        with ProcessPoolExecutor(max_workers=jobs, mp_context=ctx,
                                 initializer=_worker_init, initargs=(str(met_path),)) as pool:
            list(pool.map(_worker_job, tasks, chunksize=max(1, len(tasks) // (4 * jobs))))
    else:
        global _WORKER_MET
        _WORKER_MET = met
        try:
            for task in tasks:
                _worker_job(task)
        finally:
            _WORKER_MET = None

    manifest = DatasetManifest(met.grid, splits, config_hash)
    save_manifest(out_dir / "manifest.json", manifest)
    return manifest
