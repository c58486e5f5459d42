from functools import partial

import numpy as np
import pytest

from footprint_uq.domain import GridSpec, Release
from footprint_uq.features import FeatureSpec, write_features_for_release
from footprint_uq.gnn import GnnHyperParams
from footprint_uq.lpdm import SimConfig, generate_dataset
from footprint_uq.synthmet import MetConfig, MetField, generate_met


@pytest.fixture(scope="session")
def grid() -> GridSpec:
    return GridSpec(64, 64, 0.0, 0.0, 0.3, 0.3)


@pytest.fixture(scope="session")
def met(grid) -> MetField:
    return generate_met(MetConfig(seed=7), grid, (0.0, 144.0))


@pytest.fixture
def release() -> Release:
    return Release(0, 9.0, 9.0, 50.0, 100.0)


def constant_met(grid: GridSpec, u: float, v: float, levels=(100.0, 1000.0),
                 times=(0.0, 144.0)) -> MetField:
    """Spatially and temporally constant wind field for analytic tests."""
    shape = (len(times), len(levels), grid.n_lat, grid.n_lon)
    return MetField(grid, np.asarray(levels, dtype=float), np.asarray(times, dtype=float),
                    np.full(shape, float(u)), np.full(shape, float(v)),
                    np.zeros(grid.shape), np.zeros(grid.shape))


def make_tiny_dataset(out_dir, n_train=8, n_val=4, n_test=4, met_seed=3, sim_seed=5):
    """Miniature but fully real dataset (footprints + features on disk)."""
    grid = GridSpec(24, 24, 0.0, 0.0, 0.3, 0.3)
    met_cfg = MetConfig(seed=met_seed, base_u=-5.0, perturbation=2.0, n_modes=3,
                        levels=(100.0, 1000.0, 5000.0))
    met = generate_met(met_cfg, grid, (0.0, 72.0))
    fspec = FeatureSpec(levels=met_cfg.levels, lags=(0.0, -3.0), side=12)
    sim = SimConfig(n_particles=15, dt_seconds=600.0, t_back_hours=3.0,
                    k_h=800.0, sigma_w=0.5, seed=sim_seed)
    n = n_train + n_val + n_test
    rng = np.random.default_rng(17)
    releases = [Release(k, float(rng.uniform(1.0, 5.9)), float(rng.uniform(1.0, 5.9)),
                        float(rng.uniform(30.0, 120.0)), 10.0 + 2.0 * k)
                for k in range(n)]
    writer = partial(write_features_for_release, spec=fspec)
    manifest = generate_dataset(
        releases, met, sim, out_dir,
        split_ends=(releases[n_train - 1].time, releases[n_train + n_val - 1].time),
        feature_writer=writer)
    hyper = GnnHyperParams(channels=fspec.channels, latent=8, rounds=1,
                           hidden_layers=1, side=12, mesh_r=3.0)
    return {"grid": grid, "met": met, "manifest": manifest, "spec": fspec,
            "hyper": hyper, "sim": sim}
