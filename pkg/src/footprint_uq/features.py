"""Per-cell input features for the emulator, plus train-set normalization.

Each patch cell gets wind components sampled at every (level, lag) pair and
a small set of static channels.  Channel order is fixed
(variable-major, then level, then lag, then statics) and fingerprinted so
checkpoints can verify they are fed compatible tensors.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .domain import (DEFAULT_PATCH_SIDE, FormatError, GridSpec, Release,
                     ValidationError, expected_patch_mask)
from .synthmet import DEFAULT_LEVELS, MetField, wind_at_many

DEFAULT_LAGS = (0.0, -6.0, -12.0)
#: bearing_sin/bearing_cos point from the release toward the cell; the
#: release-cell indicator is 1 on exactly the release cell.  A normalized
#: distance-to-release channel exists but is off by default to keep the
#: default channel count at 2*7*3 + 5 = 47.
DEFAULT_STATICS = ("terrain", "land", "bearing_sin", "bearing_cos", "release_cell")
KNOWN_STATICS = DEFAULT_STATICS + ("distance",)


@dataclass(frozen=True)
class FeatureSpec:
    levels: tuple[float, ...] = DEFAULT_LEVELS
    lags: tuple[float, ...] = DEFAULT_LAGS
    variables: tuple[str, ...] = ("u", "v")
    statics: tuple[str, ...] = DEFAULT_STATICS
    side: int = DEFAULT_PATCH_SIDE

    def __post_init__(self):
        if not self.levels or not self.lags or not self.variables:
            raise ValidationError("levels, lags and variables must be non-empty")
        for v in self.variables:
            if v not in ("u", "v"):
                raise ValidationError(f"unknown variable {v!r}")
        for s in self.statics:
            if s not in KNOWN_STATICS:
                raise ValidationError(f"unknown static channel {s!r}")
        if self.side < 1:
            raise ValidationError("patch side must be >= 1")

    @property
    def channels(self) -> int:
        return len(self.variables) * len(self.levels) * len(self.lags) + len(self.statics)

    def channel_names(self) -> list[str]:
        names = [f"{v}@z{z:g}@t{lag:g}"
                 for v in self.variables for z in self.levels for lag in self.lags]
        return names + [f"static:{s}" for s in self.statics]

    def channel_hash(self) -> int:
        digest = hashlib.sha256(",".join(self.channel_names()).encode()).digest()
        return int.from_bytes(digest[:8], "little")


@dataclass(frozen=True)
class FeatureTensor:
    """(side, side, C) float array tied to one release."""

    values: np.ndarray
    release: Release
    channel_hash: int

    def __post_init__(self):
        v = np.ascontiguousarray(self.values)
        if v.ndim != 3 or v.shape[0] != v.shape[1]:
            raise ValidationError(f"feature tensor must be (side, side, C), got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValidationError("feature tensor contains non-finite values")
        v.flags.writeable = False
        object.__setattr__(self, "values", v)

    @property
    def side(self) -> int:
        return self.values.shape[0]

    @property
    def channels(self) -> int:
        return self.values.shape[2]


def extract_features(release: Release, met: MetField, spec: FeatureSpec) -> FeatureTensor:
    """Sample the feature channels on the patch centred at the release cell.

    Out-of-domain patch cells are zero in every channel, mirroring the
    zero-fill convention for patches.
    """
    g = met.grid
    if not g.contains(release.lat, release.lon):
        raise ValidationError(f"release {release.id} outside domain")
    side = spec.side
    ic, jc = g.cell_of(release.lat, release.lon)
    i0, j0 = ic - side // 2, jc - side // 2
    mask = expected_patch_mask((i0, j0), side, g)

    ii, jj = np.nonzero(mask)
    lats = g.lat0 + (i0 + ii) * g.d_lat
    lons = g.lon0 + (j0 + jj) * g.d_lon

    out = np.zeros((side, side, spec.channels), dtype=np.float64)
    ch = 0
    wind_cache: dict[tuple[float, float], tuple[np.ndarray, np.ndarray]] = {}
    for var in spec.variables:
        for z in spec.levels:
            for lag in spec.lags:
                key = (z, lag)
                if key not in wind_cache:
                    wind_cache[key] = wind_at_many(met, lats, lons, z, release.time + lag)
                u, v = wind_cache[key]
                out[ii, jj, ch] = u if var == "u" else v
                ch += 1

    for s in spec.statics:
        if s == "terrain":
            out[ii, jj, ch] = met.terrain[i0 + ii, j0 + jj]
        elif s == "land":
            out[ii, jj, ch] = met.land[i0 + ii, j0 + jj]
        elif s in ("bearing_sin", "bearing_cos"):
            dy = lats - release.lat
            dx = lons - release.lon
            ang = np.arctan2(dx, dy)
            out[ii, jj, ch] = np.sin(ang) if s == "bearing_sin" else np.cos(ang)
        elif s == "release_cell":
            out[ic - i0, jc - j0, ch] = 1.0
        elif s == "distance":
            d = np.hypot((i0 + ii) - ic, (j0 + jj) - jc)
            out[ii, jj, ch] = d / max(side / 2.0, 1.0)
        ch += 1
    return FeatureTensor(out, release, spec.channel_hash())


@dataclass(frozen=True)
class Normalizer:
    """Per-channel train-set mean/std; degenerate channels pass through."""

    mean: np.ndarray
    std: np.ndarray
    degenerate: np.ndarray
    channel_hash: int

    DEGENERATE_STD = 1e-12

    def __post_init__(self):
        for name in ("mean", "std", "degenerate"):
            a = np.ascontiguousarray(getattr(self, name))
            a.flags.writeable = False
            object.__setattr__(self, name, a)
        if not (self.mean.shape == self.std.shape == self.degenerate.shape):
            raise ValidationError("normalizer fields must share one shape per channel")


def fit_normalizer(tensors: list[FeatureTensor]) -> Normalizer:
    """Per-channel mean and population std over all cells of all tensors."""
    if len(tensors) < 2:
        raise ValidationError(f"need at least 2 tensors to fit a normalizer, got {len(tensors)}")
    c = tensors[0].channels
    h = tensors[0].channel_hash
    for t in tensors:
        if t.channels != c or t.channel_hash != h:
            raise ValidationError("tensors disagree on channel layout")
    stacked = np.concatenate([t.values.reshape(-1, c) for t in tensors], axis=0)
    mean = stacked.mean(axis=0)
    std = stacked.std(axis=0)
    degenerate = std < Normalizer.DEGENERATE_STD
    return Normalizer(mean, std, degenerate, h)


def apply_normalizer(tensor: FeatureTensor, norm: Normalizer) -> FeatureTensor:
    if tensor.channels != norm.mean.size:
        raise ValidationError(
            f"channel mismatch: tensor has {tensor.channels}, normalizer {norm.mean.size}")
    if tensor.channel_hash != norm.channel_hash:
        raise ValidationError("tensor channel hash does not match the normalizer")
    scale = np.where(norm.degenerate, 1.0, norm.std)
    shift = np.where(norm.degenerate, 0.0, norm.mean)
    return FeatureTensor((tensor.values - shift) / scale, tensor.release, tensor.channel_hash)


# --- FTR1 container ----------------------------------------------------------
#
# Little-endian 32-byte header followed by side*side*C float32 values in
# row-major (row, col, channel) order:
#   magic "FTR1" | version u32 | side u32 | C u32 | channel hash u64
#   | release id u32 | config hash u32

_FTR1 = struct.Struct("<4sIIIQII")
FTR1_VERSION = 1


def write_features(path: str | Path, tensor: FeatureTensor, config_hash: int = 0) -> None:
    with open(path, "wb") as fh:
        fh.write(_FTR1.pack(b"FTR1", FTR1_VERSION, tensor.side, tensor.channels,
                            tensor.channel_hash, tensor.release.id,
                            config_hash & 0xFFFFFFFF))
        fh.write(np.ascontiguousarray(tensor.values, dtype="<f4").tobytes())


def read_features(path: str | Path, release: Release) -> FeatureTensor:
    """Load an FTR1 file; the release comes from the manifest."""
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < _FTR1.size:
        raise FormatError(f"{path}: truncated FTR1 header")
    magic, version, side, c, chash, rid, _cfg = _FTR1.unpack_from(raw)
    if magic != b"FTR1":
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != FTR1_VERSION:
        raise FormatError(f"{path}: unsupported FTR1 version {version}")
    if rid != release.id:
        raise FormatError(f"{path}: file is for release {rid}, expected {release.id}")
    n = side * side * c
    body = np.frombuffer(raw, dtype="<f4", count=n, offset=_FTR1.size)
    if body.size != n:
        raise FormatError(f"{path}: expected {n} values, file too short")
    return FeatureTensor(body.reshape(side, side, c).astype(np.float64), release, chash)


def write_features_for_release(release: Release, met: MetField, path: str | Path,
                               spec: FeatureSpec, config_hash: int = 0) -> None:
    """Extract-and-write helper usable as a dataset-generation callback."""
    write_features(path, extract_features(release, met, spec), config_hash)
