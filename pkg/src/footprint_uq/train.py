"""Loss, Adam, and the per-seed training loop with epoch metric logging."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import analysis
from .domain import (DEFAULT_EPS_LOG, DatasetManifest, ValidationError, crop_footprint,
                     log_values, read_footprint, unlog_values)
from .features import FeatureTensor, Normalizer, apply_normalizer, fit_normalizer, read_features
from .gnn import GnnHyperParams, ModelParams, backward_batch, forward_batch, init_params
from .mesh import GridMeshMap, Mesh, build_maps, build_mesh
from .postprocess import auto_threshold


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 8
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    shuffle_seed: int = 1234
    eps_log: float = DEFAULT_EPS_LOG

    def __post_init__(self):
        if self.epochs < 1:
            raise ValidationError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValidationError("batch size must be >= 1")
        if self.learning_rate <= 0:
            raise ValidationError("learning rate must be > 0")


@dataclass(frozen=True)
class EpochLog:
    epoch: int
    train_loss: float
    val_loss: float
    nmae: float
    mse: float
    accuracy: float
    iou: float
    r2: float


def loss_mse_log(pred: np.ndarray, truth: np.ndarray) -> float:
    """Mean squared difference over all patch cells (log space)."""
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise ValidationError(f"shape mismatch {pred.shape} vs {truth.shape}")
    if not (np.all(np.isfinite(pred)) and np.all(np.isfinite(truth))):
        raise ValidationError("non-finite input to loss")
    return float(np.mean((pred - truth) ** 2))


def loss_mse_log_grad(pred: np.ndarray, truth: np.ndarray) -> tuple[float, np.ndarray]:
    value = loss_mse_log(pred, truth)
    return value, 2.0 * (pred - truth) / pred.size


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]

    @classmethod
    def zeros_like(cls, params: ModelParams) -> "AdamState":
        return cls({k: np.zeros_like(t) for k, t in params.tensors.items()},
                   {k: np.zeros_like(t) for k, t in params.tensors.items()})


def adam_step(params: ModelParams, grads: dict[str, np.ndarray], state: AdamState,
              t: int, cfg: TrainConfig) -> tuple[ModelParams, AdamState]:
    """One bias-corrected Adam update; returns fresh params and moments."""
    if t < 1:
        raise ValidationError("Adam step index must be >= 1")
    new_t, new_m, new_v = {}, {}, {}
    bc1 = 1.0 - cfg.beta1**t
    bc2 = 1.0 - cfg.beta2**t
    for name, p in params.tensors.items():
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise ValidationError(f"non-finite gradient in tensor {name!r}")
        m = cfg.beta1 * state.m[name] + (1.0 - cfg.beta1) * g
        v = cfg.beta2 * state.v[name] + (1.0 - cfg.beta2) * g * g
        step = cfg.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + cfg.adam_eps)
        new_t[name] = (p - step).astype(p.dtype)
        new_m[name], new_v[name] = m, v
    return replace(params, tensors=new_t), AdamState(new_m, new_v)


# --- dataset loading ------------------------------------------------------------

@dataclass
class LoadedSplit:
    feats: np.ndarray        # (n, side, side, C) float32, normalized
    masks: np.ndarray        # (n, side, side) bool
    log_truth: np.ndarray    # (n, side, side) float32, 0 outside domain
    linear_truth: np.ndarray  # (n, side, side) float64
    releases: list = field(default_factory=list)


def load_split(manifest: DatasetManifest, base: Path, split: str, side: int,
               eps_log: float) -> tuple[list[FeatureTensor], LoadedSplit]:
    """Read footprints + raw features for one split; targets are log patches."""
    entries = manifest.entries(split)
    tensors = []
    feats, masks, logt, lint, releases = [], [], [], [], []
    for e in entries:
        fp = read_footprint(base / e.footprint)
        patch = crop_footprint(fp, side)
        tensor = read_features(base / e.features, e.release)
        tensors.append(tensor)
        masks.append(patch.in_domain)
        lint.append(patch.values)
        logt.append(np.where(patch.in_domain, log_values(patch.values, eps_log), 0.0))
        releases.append(e.release)
    loaded = LoadedSplit(
        feats=np.zeros(0),  # filled after normalization
        masks=np.asarray(masks),
        log_truth=np.asarray(logt, dtype=np.float32),
        linear_truth=np.asarray(lint),
        releases=releases,
    )
    return tensors, loaded


def normalize_split(tensors: list[FeatureTensor], norm: Normalizer) -> np.ndarray:
    return np.asarray([apply_normalizer(t, norm).values for t in tensors], dtype=np.float32)


def predict_batches(params: ModelParams, feats: np.ndarray, masks: np.ndarray,
                    mesh: Mesh, maps: GridMeshMap, batch_size: int = 8) -> np.ndarray:
    """Forward a whole split in batches; returns log-space predictions."""
    out = []
    for lo in range(0, feats.shape[0], batch_size):
        preds, _ = forward_batch(params, feats[lo:lo + batch_size],
                                 masks[lo:lo + batch_size], mesh, maps)
        out.append(preds)
    return np.concatenate(out, axis=0) if out else np.zeros_like(masks, dtype=np.float32)


def _val_metrics(preds_log, split: LoadedSplit, eps_log, active_tau) -> analysis.MetricReport:
    m = split.masks
    pred_lin = unlog_values(preds_log.astype(np.float64), eps_log)[m]
    truth_lin = split.linear_truth[m]
    return analysis.metrics(pred_lin, truth_lin, active_tau)


def train_model(manifest: DatasetManifest, base_dir: str | Path, seed: int,
                cfg: TrainConfig, hyper: GnnHyperParams,
                active_tau: float | None = None,
                ) -> tuple[ModelParams, list[EpochLog], Normalizer]:
    """Train one ensemble member; returns the best-validation checkpoint.

    Deterministic for fixed (seed, cfg, data).  The normalizer is fitted on
    the training split only and reused for validation.
    """
    base = Path(base_dir)
    mesh = build_mesh(hyper.side, hyper.mesh_r)
    maps = build_maps(mesh, hyper.side)

    train_tensors, train_split = load_split(manifest, base, "train", hyper.side, cfg.eps_log)
    val_tensors, val_split = load_split(manifest, base, "val", hyper.side, cfg.eps_log)
    if not train_tensors or not val_tensors:
        raise ValidationError("training requires non-empty train and val splits")

    norm = fit_normalizer(train_tensors)
    train_split.feats = normalize_split(train_tensors, norm)
    val_split.feats = normalize_split(val_tensors, norm)
    if active_tau is None:
        active_tau = auto_threshold(train_split.linear_truth[train_split.masks])

    params = init_params(seed, hyper)
    state = AdamState.zeros_like(params)
    n_train = train_split.feats.shape[0]
    logs: list[EpochLog] = []
    best: tuple[float, ModelParams] | None = None
    step = 0
    for epoch in range(cfg.epochs):
        rng = np.random.default_rng(np.random.SeedSequence([cfg.shuffle_seed, epoch]))
        order = rng.permutation(n_train)
        total, seen = 0.0, 0
        for lo in range(0, n_train, cfg.batch_size):
            idx = order[lo:lo + cfg.batch_size]
            preds, cache = forward_batch(params, train_split.feats[idx],
                                         train_split.masks[idx], mesh, maps)
            truth = train_split.log_truth[idx]
            if not np.all(np.isfinite(preds)):
                raise RuntimeError(f"non-finite prediction at epoch {epoch} batch {lo // cfg.batch_size}")
            value, d_pred = loss_mse_log_grad(preds, truth)
            grads = backward_batch(params, cache, d_pred.astype(np.float32))
            step += 1
            params, state = adam_step(params, grads, state, step, cfg)
            total += value * idx.size
            seen += idx.size
        train_loss = total / seen

        val_preds = predict_batches(params, val_split.feats, val_split.masks,
                                    mesh, maps, cfg.batch_size)
        val_loss = loss_mse_log(val_preds, val_split.log_truth)
        rep = _val_metrics(val_preds, val_split, cfg.eps_log, active_tau)
        logs.append(EpochLog(epoch, train_loss, val_loss, rep.nmae, rep.mse,
                             rep.accuracy, rep.iou, rep.r2))
        if best is None or val_loss < best[0]:
            best = (val_loss, replace(params, tensors=dict(params.tensors)))
    return best[1], logs, norm


def write_epoch_csv(path: str | Path, logs: list[EpochLog]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "train_loss", "val_loss", "nmae", "mse", "acc", "iou", "r2"])
        for log in logs:
            w.writerow([log.epoch, repr(log.train_loss), repr(log.val_loss),
                        repr(log.nmae), repr(log.mse), repr(log.accuracy),
                        repr(log.iou), repr(log.r2)])


def read_epoch_csv(path: str | Path) -> list[EpochLog]:
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out.append(EpochLog(int(row["epoch"]), float(row["train_loss"]),
                                float(row["val_loss"]), float(row["nmae"]),
                                float(row["mse"]), float(row["acc"]),
                                float(row["iou"]), float(row["r2"])))
    return out
