"""Ensemble statistics: mean, spread (population std), and relative spread.

The coefficient of variation is sigma / (mu + eps), computed on
linear-space sensitivities.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .domain import (GridSpec, Patch, Release, ValidationError, embed_patch,
                     expected_patch_mask, unlog_values)
from .features import FeatureTensor, Normalizer, apply_normalizer
from .gnn import ModelParams, forward_batch
from .mesh import GridMeshMap, Mesh
from .postprocess import QuantileMap, apply_quantile_map_values, threshold_values

DEFAULT_EPS_CV = 1e-9


@dataclass(frozen=True)
class EnsembleStats:
    mean: np.ndarray | float
    std: np.ndarray | float
    cv: np.ndarray | float
    n: int
    eps: float


def ensemble_stats(members, eps: float = DEFAULT_EPS_CV) -> EnsembleStats:
    """Per-cell (or scalar) mean, population std, and cv over N members."""
    n = len(members)
    if n < 2:
        raise ValidationError(f"ensemble statistics need >= 2 members, got {n}")
    for m in members[1:]:
        if np.shape(m) != np.shape(members[0]):
            raise ValidationError(
                f"member shape {np.shape(m)} != {np.shape(members[0])}")
    stack = np.asarray([np.asarray(m, dtype=np.float64) for m in members])
    mean = stack.mean(axis=0)
    std = stack.std(axis=0)  # population: divide by N
    cv = std / (mean + eps)
    if stack.ndim == 1:
        return EnsembleStats(float(mean), float(std), float(cv), n, eps)
    return EnsembleStats(mean, std, cv, n, eps)


def mean_error(mean_field: np.ndarray, truth: np.ndarray) -> np.ndarray:
    """Signed error: ensemble mean minus truth."""
    mean_field = np.asarray(mean_field)
    truth = np.asarray(truth)
    if mean_field.shape != truth.shape:
        raise ValidationError(f"shape mismatch {mean_field.shape} vs {truth.shape}")
    return mean_field - truth


@dataclass(frozen=True)
class Member:
    """One trained ensemble member plus its fitted post-processing."""

    params: ModelParams
    normalizer: Normalizer
    qmap: QuantileMap


@dataclass(frozen=True)
class PostOptions:
    eps_log: float
    tau: float
    eps_cv: float = DEFAULT_EPS_CV


def _check_compatible(members: list[Member]) -> None:
    if len(members) < 2:
        raise ValidationError(f"ensemble needs >= 2 checkpoints, got {len(members)}")
    ref = members[0]
    for k, m in enumerate(members[1:], start=1):
        if m.params.hyper != ref.params.hyper:
            raise ValidationError(
                f"checkpoint {k} hyperparameters {m.params.hyper} != {ref.params.hyper}")
        if m.normalizer.channel_hash != ref.normalizer.channel_hash:
            raise ValidationError(
                f"checkpoint {k} feature hash {m.normalizer.channel_hash:#x} "
                f"!= {ref.normalizer.channel_hash:#x}")


def ensemble_predict(members: list[Member], tensor: FeatureTensor, grid: GridSpec,
                     mesh: Mesh, maps: GridMeshMap, post: PostOptions,
                     ) -> tuple[np.ndarray, EnsembleStats]:
    """Full per-member pipeline for one release, embedded on the domain grid.

    Each member runs forward -> quantile map -> inverse log -> threshold;
    statistics are taken over the linear-space members.  Returns the
    (N, n_lat, n_lon) member fields and their EnsembleStats.
    """
    _check_compatible(members)
    release: Release = tensor.release
    side = members[0].params.hyper.side
    ic, jc = grid.cell_of(release.lat, release.lon)
    offset = (ic - side // 2, jc - side // 2)
    mask = expected_patch_mask(offset, side, grid)

    fields = []
    for m in members:
        if tensor.channel_hash != m.normalizer.channel_hash:
            raise ValidationError(
                f"feature hash {tensor.channel_hash:#x} does not match checkpoint "
                f"{m.normalizer.channel_hash:#x}")
        x = apply_normalizer(tensor, m.normalizer).values.astype(np.float32)
        pred_log, _ = forward_batch(m.params, x[None], mask[None], mesh, maps)
        mapped = apply_quantile_map_values(pred_log[0].astype(np.float64), m.qmap)
        linear = threshold_values(unlog_values(mapped, post.eps_log), post.tau)
        linear = np.where(mask, linear, 0.0)
        fields.append(embed_patch(Patch(linear, offset, mask), grid))
    members_full = np.asarray(fields)
    return members_full, ensemble_stats(members_full, post.eps_cv)
