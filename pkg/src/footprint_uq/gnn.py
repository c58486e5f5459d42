"""Encoder-processor-decoder network over the patch mesh.

Forward and reverse passes are written directly against numpy so the
gradients are exact and checkable against finite differences.  Cells feed
their nearest node (mean aggregation), R rounds of message passing update
node latents with residual connections, and each cell decodes from its
nearest node's latent plus its node distance.

Training runs in float32; gradient verification runs the same code in
float64.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .domain import FormatError, ValidationError
from .features import Normalizer
from .mesh import GridMeshMap, Mesh

ACTIVATIONS = ("relu", "identity")


@dataclass(frozen=True)
class GnnHyperParams:
    channels: int
    latent: int = 32
    rounds: int = 3
    hidden_layers: int = 2
    side: int = 50
    mesh_r: float = 4.0
    activation: str = "relu"

    def __post_init__(self):
        if self.channels < 1 or self.latent < 1:
            raise ValidationError("channels and latent width must be >= 1")
        if self.rounds < 0 or self.hidden_layers < 0:
            raise ValidationError("rounds and hidden_layers must be >= 0")
        if self.side < 1:
            raise ValidationError("side must be >= 1")
        if self.activation not in ACTIVATIONS:
            raise ValidationError(f"unknown activation {self.activation!r}")


def _mlp_specs(prefix: str, d_in: int, d_out: int, hyper: GnnHyperParams):
    dims = [d_in] + [hyper.latent] * hyper.hidden_layers + [d_out]
    out = []
    for i in range(len(dims) - 1):
        out.append((f"{prefix}.w{i}", (dims[i], dims[i + 1])))
        out.append((f"{prefix}.b{i}", (dims[i + 1],)))
    return out


def tensor_specs(hyper: GnnHyperParams) -> list[tuple[str, tuple[int, ...]]]:
    """Canonical (name, shape) list; fixes checkpoint serialization order."""
    h = hyper.latent
    specs = _mlp_specs("enc_cell", hyper.channels + 1, h, hyper)
    specs += _mlp_specs("enc_node", h, h, hyper)
    for rd in range(hyper.rounds):
        specs += _mlp_specs(f"round{rd}.msg", 2 * h, h, hyper)
        specs += _mlp_specs(f"round{rd}.upd", 2 * h, h, hyper)
    specs += _mlp_specs("dec", h + 1, 1, hyper)
    return specs


def count_params(hyper: GnnHyperParams) -> int:
    return sum(int(np.prod(shape)) for _, shape in tensor_specs(hyper))


@dataclass(frozen=True)
class ModelParams:
    hyper: GnnHyperParams
    seed: int
    tensors: dict[str, np.ndarray]

    @property
    def dtype(self):
        return next(iter(self.tensors.values())).dtype


def init_params(seed: int, hyper: GnnHyperParams, dtype=np.float32) -> ModelParams:
    """Glorot-uniform weights, zero biases; deterministic per seed."""
    rng = np.random.default_rng(int(seed))
    tensors = {}
    for name, shape in tensor_specs(hyper):
        if len(shape) == 2:
            bound = np.sqrt(6.0 / (shape[0] + shape[1]))
            tensors[name] = rng.uniform(-bound, bound, shape).astype(dtype)
        else:
            tensors[name] = np.zeros(shape, dtype=dtype)
    return ModelParams(hyper, int(seed), tensors)


def cast_params(params: ModelParams, dtype) -> ModelParams:
    return replace(params, tensors={k: v.astype(dtype) for k, v in params.tensors.items()})


# --- MLP kernels ---------------------------------------------------------------

def _mlp_forward(params: ModelParams, prefix: str, x: np.ndarray):
    n_layers = params.hyper.hidden_layers + 1
    relu = params.hyper.activation == "relu"
    inputs, preacts = [], []
    h = x
    for i in range(n_layers):
        inputs.append(h)
        z = h @ params.tensors[f"{prefix}.w{i}"] + params.tensors[f"{prefix}.b{i}"]
        preacts.append(z)
        h = (np.maximum(z, 0) if relu else z) if i < n_layers - 1 else z
    return h, (inputs, preacts)


def _mlp_backward(params: ModelParams, prefix: str, d_out: np.ndarray, cache,
                  grads: dict[str, np.ndarray]) -> np.ndarray:
    inputs, preacts = cache
    n_layers = params.hyper.hidden_layers + 1
    relu = params.hyper.activation == "relu"
    d = d_out
    for i in reversed(range(n_layers)):
        if i < n_layers - 1 and relu:
            d = d * (preacts[i] > 0)
        grads[f"{prefix}.w{i}"] = inputs[i].T @ d
        grads[f"{prefix}.b{i}"] = d.sum(axis=0)
        d = d @ params.tensors[f"{prefix}.w{i}"].T
    return d


# --- segment helpers -----------------------------------------------------------

def _segment_sum(sorted_arr: np.ndarray, counts: np.ndarray) -> np.ndarray:
    """Sum contiguous segments of a (B, M, H) array sorted by segment id.

    Segments with count 0 yield exact zeros (np.add.reduceat alone would
    corrupt neighbours of empty segments).
    """
    b, _, h = sorted_arr.shape
    out = np.zeros((b, counts.size, h), dtype=sorted_arr.dtype)
    nz = np.nonzero(counts > 0)[0]
    if nz.size:
        starts = np.concatenate([[0], np.cumsum(counts[nz])[:-1]])
        out[:, nz, :] = np.add.reduceat(sorted_arr, starts, axis=1)
    return out


# --- forward / backward ----------------------------------------------------------

def forward_batch(params: ModelParams, feats: np.ndarray, masks: np.ndarray,
                  mesh: Mesh, maps: GridMeshMap):
    """Predict log-space patches for a batch.

    feats: (B, side, side, C); masks: (B, side, side) bool, True in-domain.
    Returns (preds (B, side, side), cache).  Out-of-domain cells are exactly
    zero in the output.
    """
    hyper = params.hyper
    b, side, side2, c = feats.shape
    if side != hyper.side or side2 != hyper.side:
        raise ValidationError(f"patch side {side}x{side2} != model side {hyper.side}")
    if c != hyper.channels:
        raise ValidationError(f"feature channels {c} != model channels {hyper.channels} (enc_cell)")
    dtype = params.dtype
    s2 = side * side
    n = mesh.n_nodes
    hdim = hyper.latent

    x = feats.reshape(b, s2, c).astype(dtype, copy=False)
    dist = (maps.distance / mesh.spacing).astype(dtype)
    cell_in = np.concatenate(
        [x, np.broadcast_to(dist, (b, s2)).astype(dtype)[..., None]], axis=2)
    cell_lat_flat, enc_cell_cache = _mlp_forward(params, "enc_cell", cell_in.reshape(b * s2, c + 1))
    cell_lat = cell_lat_flat.reshape(b, s2, hdim)

    node_sum = _segment_sum(cell_lat[:, maps.cell_order, :], maps.counts)
    node_mean = node_sum / np.maximum(maps.counts, 1)[None, :, None].astype(dtype)

    h_flat, enc_node_cache = _mlp_forward(params, "enc_node", node_mean.reshape(b * n, hdim))
    h = h_flat.reshape(b, n, hdim)

    rounds_cache = []
    for rd in range(hyper.rounds):
        if mesh.n_directed:
            msg_in = np.concatenate([h[:, mesh.dir_src, :], h[:, mesh.dir_dst, :]], axis=2)
            msg_flat, msg_cache = _mlp_forward(
                params, f"round{rd}.msg", msg_in.reshape(b * mesh.n_directed, 2 * hdim))
            msg = msg_flat.reshape(b, mesh.n_directed, hdim)
            mmean = _segment_sum(msg, mesh.indegree) \
                / np.maximum(mesh.indegree, 1)[None, :, None].astype(dtype)
        else:
            msg_cache = None
            mmean = np.zeros_like(h)
        upd_in = np.concatenate([h, mmean], axis=2)
        delta_flat, upd_cache = _mlp_forward(
            params, f"round{rd}.upd", upd_in.reshape(b * n, 2 * hdim))
        h = h + delta_flat.reshape(b, n, hdim)
        rounds_cache.append((msg_cache, upd_cache))

    cell_h = h[:, maps.assign, :]
    dec_in = np.concatenate(
        [cell_h, np.broadcast_to(dist, (b, s2)).astype(dtype)[..., None]], axis=2)
    out_flat, dec_cache = _mlp_forward(params, "dec", dec_in.reshape(b * s2, hdim + 1))
    preds = out_flat.reshape(b, s2) * masks.reshape(b, s2).astype(dtype)
    cache = {
        "hyper": hyper, "mesh": mesh, "maps": maps, "masks": masks, "b": b,
        "enc_cell": enc_cell_cache, "enc_node": enc_node_cache,
        "rounds": rounds_cache, "dec": dec_cache,
    }
    return preds.reshape(b, side, side), cache


def forward(params: ModelParams, feat_values: np.ndarray, mask: np.ndarray,
            mesh: Mesh, maps: GridMeshMap):
    """Single-sample convenience wrapper over :func:`forward_batch`."""
    preds, cache = forward_batch(params, feat_values[None], mask[None], mesh, maps)
    return preds[0], cache


def backward_batch(params: ModelParams, cache, d_pred: np.ndarray) -> dict[str, np.ndarray]:
    """Exact reverse-mode gradients for every parameter tensor."""
    if cache["hyper"] != params.hyper:
        raise ValidationError("forward cache does not match these parameters")
    hyper = params.hyper
    mesh: Mesh = cache["mesh"]
    maps: GridMeshMap = cache["maps"]
    b = cache["b"]
    s2 = hyper.side * hyper.side
    n = mesh.n_nodes
    hdim = hyper.latent
    dtype = params.dtype

    grads: dict[str, np.ndarray] = {}
    d = d_pred.reshape(b, s2).astype(dtype, copy=False) \
        * cache["masks"].reshape(b, s2).astype(dtype)
    d_dec_in = _mlp_backward(params, "dec", d.reshape(b * s2, 1), cache["dec"], grads)
    d_cell_h = d_dec_in.reshape(b, s2, hdim + 1)[:, :, :hdim]

    # decoder gather -> scatter-sum back to nodes (same nearest-node partition)
    d_h = _segment_sum(d_cell_h[:, maps.cell_order, :], maps.counts)

    for rd in reversed(range(hyper.rounds)):
        msg_cache, upd_cache = cache["rounds"][rd]
        d_upd_in = _mlp_backward(params, f"round{rd}.upd",
                                 d_h.reshape(b * n, hdim), upd_cache, grads)
        d_upd_in = d_upd_in.reshape(b, n, 2 * hdim)
        d_h = d_h + d_upd_in[:, :, :hdim]
        if mesh.n_directed:
            d_mmean = d_upd_in[:, :, hdim:]
            d_msg = d_mmean[:, mesh.dir_dst, :] \
                / np.maximum(mesh.indegree, 1)[mesh.dir_dst][None, :, None].astype(dtype)
            d_msg_in = _mlp_backward(params, f"round{rd}.msg",
                                     d_msg.reshape(b * mesh.n_directed, hdim),
                                     msg_cache, grads)
            d_msg_in = d_msg_in.reshape(b, mesh.n_directed, 2 * hdim)
            # scatter by source: edges regrouped by src, then summed per node
            src_sorted = d_msg_in[:, mesh.src_perm, :hdim]
            if mesh.src_ids.size:
                src_sums = np.add.reduceat(src_sorted, mesh.src_starts, axis=1)
                d_h[:, mesh.src_ids, :] += src_sums
            # scatter by destination: directed edges are already dst-sorted
            d_h += _segment_sum(d_msg_in[:, :, hdim:], mesh.indegree)

    d_node_mean = _mlp_backward(params, "enc_node", d_h.reshape(b * n, hdim),
                                cache["enc_node"], grads).reshape(b, n, hdim)
    d_cell_lat = d_node_mean[:, maps.assign, :] \
        / np.maximum(maps.counts, 1)[maps.assign][None, :, None].astype(dtype)
    _mlp_backward(params, "enc_cell", d_cell_lat.reshape(b * s2, hdim),
                  cache["enc_cell"], grads)
    return grads


def gradient_check(params: ModelParams, feats: np.ndarray, masks: np.ndarray,
                   mesh: Mesh, maps: GridMeshMap, loss, epsilon: float = 1e-5,
                   n_sample: int = 200, rng: np.random.Generator | None = None) -> float:
    """Max relative error of analytic vs central-difference gradients.

    ``loss`` maps predictions (B, side, side) to (scalar, d_pred).  At least
    n_sample parameter coordinates are probed, spanning every tensor; all
    arithmetic runs in float64.
    """
    if not (1e-7 <= epsilon <= 1e-4):
        raise ValidationError(f"epsilon {epsilon} outside [1e-7, 1e-4]")
    rng = rng or np.random.default_rng(0)
    p = cast_params(params, np.float64)
    feats = feats.astype(np.float64)

    preds, cache = forward_batch(p, feats, masks, mesh, maps)
    value, d_pred = loss(preds)
    if not np.isfinite(value):
        raise ValidationError("loss is not finite")
    grads = backward_batch(p, cache, np.asarray(d_pred, dtype=np.float64))

    sizes = {name: t.size for name, t in p.tensors.items()}
    total = sum(sizes.values())
    picks: list[tuple[str, int]] = []
    for name, size in sizes.items():
        k = min(size, max(1, int(round(n_sample * size / total))))
        picks.extend((name, int(i)) for i in rng.choice(size, size=k, replace=False))
    while len(picks) < n_sample:
        name = list(sizes)[int(rng.integers(len(sizes)))]
        picks.append((name, int(rng.integers(sizes[name]))))

    def eval_loss() -> float:
        out, _ = forward_batch(p, feats, masks, mesh, maps)
        return float(loss(out)[0])

    worst = 0.0
    for name, idx in picks:
        t = p.tensors[name]
        orig = t.flat[idx]
        t.flat[idx] = orig + epsilon
        up = eval_loss()
        t.flat[idx] = orig - epsilon
        down = eval_loss()
        t.flat[idx] = orig
        g_fd = (up - down) / (2 * epsilon)
        g_an = float(grads[name].flat[idx])
        rel = abs(g_an - g_fd) / max(abs(g_an), abs(g_fd), 1e-8)
        worst = max(worst, rel)
    return worst


# --- CKP1 checkpoint container --------------------------------------------------
#
# Little-endian 60-byte header, then the normalizer (mean f64[C], std
# f64[C], degenerate u8[C]) and every parameter tensor as float32 in
# tensor_specs order:
#   magic "CKP1" | version u32 | config hash u32 | seed i64 | channels u32
#   | latent u32 | rounds u32 | hidden_layers u32 | side u32
#   | activation u8 (0 relu, 1 identity) | pad 3 | mesh_r f64
#   | feature channel hash u64

_CKP1 = struct.Struct("<4sIIqIIIIIB3xdQ")
CKP1_VERSION = 1


def save_checkpoint(path: str | Path, params: ModelParams, norm: Normalizer,
                    config_hash: int = 0) -> None:
    hyper = params.hyper
    if norm.mean.size != hyper.channels:
        raise ValidationError("normalizer channel count != model channels")
    with open(path, "wb") as fh:
        fh.write(_CKP1.pack(b"CKP1", CKP1_VERSION, config_hash & 0xFFFFFFFF,
                            params.seed, hyper.channels, hyper.latent, hyper.rounds,
                            hyper.hidden_layers, hyper.side,
                            ACTIVATIONS.index(hyper.activation), hyper.mesh_r,
                            norm.channel_hash))
        fh.write(np.ascontiguousarray(norm.mean, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(norm.std, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(norm.degenerate, dtype="u1").tobytes())
        for name, _shape in tensor_specs(hyper):
            fh.write(np.ascontiguousarray(params.tensors[name], dtype="<f4").tobytes())


def load_checkpoint(path: str | Path) -> tuple[ModelParams, Normalizer]:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < _CKP1.size:
        raise FormatError(f"{path}: truncated CKP1 header")
    (magic, version, _cfg, seed, channels, latent, rounds, hidden_layers,
     side, act, mesh_r, channel_hash) = _CKP1.unpack_from(raw)
    if magic != b"CKP1":
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != CKP1_VERSION:
        raise FormatError(f"{path}: unsupported CKP1 version {version}")
    hyper = GnnHyperParams(channels, latent, rounds, hidden_layers, side,
                           mesh_r, ACTIVATIONS[act])
    off = _CKP1.size
    mean = np.frombuffer(raw, dtype="<f8", count=channels, offset=off).astype(np.float64)
    off += 8 * channels
    std = np.frombuffer(raw, dtype="<f8", count=channels, offset=off).astype(np.float64)
    off += 8 * channels
    degenerate = np.frombuffer(raw, dtype="u1", count=channels, offset=off).astype(bool)
    off += channels
    tensors = {}
    for name, shape in tensor_specs(hyper):
        size = int(np.prod(shape))
        flat = np.frombuffer(raw, dtype="<f4", count=size, offset=off)
        if flat.size != size:
            raise FormatError(f"{path}: tensor {name} truncated")
        tensors[name] = flat.reshape(shape).astype(np.float32)
        off += 4 * size
    norm = Normalizer(mean, std, degenerate, channel_hash)
    return ModelParams(hyper, seed, tensors), norm
