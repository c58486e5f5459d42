"""Core geometry and field types shared by the whole pipeline.

Grids are regular latitude/longitude rasters indexed ``values[i, j]`` with
row 0 the southernmost row.  A footprint is a per-cell surface-sensitivity
field tied to one release; patches are fixed-size windows centred on the
release cell, zero-filled where they fall outside the parent grid.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np


class ValidationError(ValueError):
    """A precondition or invariant was violated."""


class FormatError(RuntimeError):
    """A serialized artifact could not be parsed."""


class Space(str, Enum):
    LINEAR = "linear"
    LOG = "log"


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class GridSpec:
    """Regular lat/lon grid described by its cell-center origin and spacing."""

    n_lat: int
    n_lon: int
    lat0: float
    lon0: float
    d_lat: float
    d_lon: float

    def __post_init__(self):
        if self.n_lat < 1 or self.n_lon < 1:
            raise ValidationError(f"grid dims must be >= 1, got {self.n_lat}x{self.n_lon}")
        if self.d_lat <= 0 or self.d_lon <= 0:
            raise ValidationError(f"grid spacing must be > 0, got d_lat={self.d_lat}, d_lon={self.d_lon}")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.n_lat, self.n_lon)

    def lat_centers(self) -> np.ndarray:
        return self.lat0 + self.d_lat * np.arange(self.n_lat)

    def lon_centers(self) -> np.ndarray:
        return self.lon0 + self.d_lon * np.arange(self.n_lon)

    def cell_of(self, lat: float, lon: float) -> tuple[int, int]:
        """Index of the cell whose center is nearest to (lat, lon).

        Each cell (i, j) owns the half-open box of width (d_lat, d_lon)
        around its center, so center -> index -> center round-trips exactly.
        """
        i = int(np.floor((lat - self.lat0) / self.d_lat + 0.5))
        j = int(np.floor((lon - self.lon0) / self.d_lon + 0.5))
        return i, j

    def center_of(self, i: int, j: int) -> tuple[float, float]:
        if not (0 <= i < self.n_lat and 0 <= j < self.n_lon):
            raise ValidationError(f"cell ({i}, {j}) outside {self.n_lat}x{self.n_lon} grid")
        return self.lat0 + i * self.d_lat, self.lon0 + j * self.d_lon

    def contains(self, lat: float, lon: float) -> bool:
        i, j = self.cell_of(lat, lon)
        return 0 <= i < self.n_lat and 0 <= j < self.n_lon


@dataclass(frozen=True)
class Release:
    """One backward-release point: the simulated measurement location."""

    id: int
    lat: float
    lon: float
    altitude: float
    time: float  # hours since epoch start

    def __post_init__(self):
        if self.id < 0:
            raise ValidationError(f"release id must be >= 0, got {self.id}")
        if self.altitude < 0:
            raise ValidationError(f"release {self.id}: altitude must be >= 0, got {self.altitude}")


@dataclass(frozen=True)
class Footprint:
    """Per-cell surface sensitivity for one release, in linear or log space."""

    grid: GridSpec
    release: Release
    values: np.ndarray
    space: Space

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.shape != self.grid.shape:
            raise ValidationError(f"footprint shape {v.shape} != grid shape {self.grid.shape}")
        if not np.all(np.isfinite(v)):
            i, j = np.argwhere(~np.isfinite(v))[0]
            raise ValidationError(f"non-finite footprint value at cell ({i}, {j})")
        if self.space == Space.LINEAR and np.any(v < 0):
            i, j = np.argwhere(v < 0)[0]
            raise ValidationError(f"negative linear-space value {v[i, j]} at cell ({i}, {j})")
        object.__setattr__(self, "values", _readonly(v))


@dataclass(frozen=True)
class FluxField:
    """Non-negative per-cell emission flux on the same grid as the footprints."""

    grid: GridSpec
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.shape != self.grid.shape:
            raise ValidationError(f"flux shape {v.shape} != grid shape {self.grid.shape}")
        if not np.all(np.isfinite(v)) or np.any(v < 0):
            raise ValidationError("flux values must be finite and >= 0")
        object.__setattr__(self, "values", _readonly(v))


@dataclass(frozen=True)
class Patch:
    """side x side window of a parent grid, centred on a release cell.

    ``offset`` is the parent-grid index of patch cell (0, 0) and may be
    negative; ``in_domain`` marks cells that map to a parent cell.  Cells
    outside the parent grid are exactly zero.
    """

    values: np.ndarray
    offset: tuple[int, int]
    in_domain: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values)
        m = np.asarray(self.in_domain, dtype=bool)
        if v.ndim != 2 or v.shape[0] != v.shape[1]:
            raise ValidationError(f"patch must be square, got shape {v.shape}")
        if m.shape != v.shape:
            raise ValidationError("in_domain mask shape differs from values")
        if np.any(v[~m] != 0):
            raise ValidationError("out-of-domain patch cells must be exactly 0")
        object.__setattr__(self, "values", _readonly(v))
        object.__setattr__(self, "in_domain", _readonly(m))

    @property
    def side(self) -> int:
        return self.values.shape[0]


DEFAULT_PATCH_SIDE = 50
DEFAULT_EPS_LOG = 1e-9


def log_transform(fp: Footprint, eps_log: float = DEFAULT_EPS_LOG) -> Footprint:
    """Map each linear-space sensitivity s to ln(s + eps_log).

    eps_log keeps exact zeros finite and makes the transform invertible.
    """
    if fp.space != Space.LINEAR:
        raise ValidationError("log_transform expects a linear-space footprint")
    if eps_log <= 0:
        raise ValidationError(f"eps_log must be > 0, got {eps_log}")
    return Footprint(fp.grid, fp.release, np.log(fp.values + eps_log), Space.LOG)


def inverse_log_transform(fp: Footprint, eps_log: float = DEFAULT_EPS_LOG) -> Footprint:
    """Invert :func:`log_transform`; results are clamped at zero."""
    if fp.space != Space.LOG:
        raise ValidationError("inverse_log_transform expects a log-space footprint")
    if eps_log <= 0:
        raise ValidationError(f"eps_log must be > 0, got {eps_log}")
    with np.errstate(over="raise"):
        try:
            linear = np.exp(fp.values) - eps_log
        except FloatingPointError as exc:
            raise ValidationError("log-space value too large to invert") from exc
    return Footprint(fp.grid, fp.release, np.maximum(linear, 0.0), Space.LINEAR)


def log_values(values: np.ndarray, eps_log: float = DEFAULT_EPS_LOG) -> np.ndarray:
    """Array-level form of :func:`log_transform` used on patches."""
    return np.log(np.asarray(values) + eps_log)


def unlog_values(values: np.ndarray, eps_log: float = DEFAULT_EPS_LOG) -> np.ndarray:
    return np.maximum(np.exp(np.asarray(values)) - eps_log, 0.0)


def crop_patch(values: np.ndarray, grid: GridSpec, release: Release,
               side: int = DEFAULT_PATCH_SIDE) -> Patch:
    """Cut the side x side window centred on the release cell.

    The release cell lands at patch index (side // 2, side // 2); for even
    sides the tie is broken toward the lower index.  Parent cells are copied
    verbatim; cells falling outside the parent grid are zero.
    """
    if side < 1:
        raise ValidationError(f"patch side must be >= 1, got {side}")
    values = np.asarray(values)
    if values.shape != grid.shape:
        raise ValidationError(f"field shape {values.shape} != grid shape {grid.shape}")
    if not grid.contains(release.lat, release.lon):
        raise ValidationError(
            f"release {release.id} at ({release.lat}, {release.lon}) outside grid")
    ic, jc = grid.cell_of(release.lat, release.lon)
    i0, j0 = ic - side // 2, jc - side // 2

    out = np.zeros((side, side), dtype=values.dtype)
    mask = np.zeros((side, side), dtype=bool)
    pi0, pi1 = max(0, -i0), min(side, grid.n_lat - i0)
    pj0, pj1 = max(0, -j0), min(side, grid.n_lon - j0)
    if pi0 < pi1 and pj0 < pj1:
        out[pi0:pi1, pj0:pj1] = values[i0 + pi0:i0 + pi1, j0 + pj0:j0 + pj1]
        mask[pi0:pi1, pj0:pj1] = True
    return Patch(out, (i0, j0), mask)


def crop_footprint(fp: Footprint, side: int = DEFAULT_PATCH_SIDE) -> Patch:
    return crop_patch(fp.values, fp.grid, fp.release, side)


def expected_patch_mask(offset: tuple[int, int], side: int, grid: GridSpec) -> np.ndarray:
    i0, j0 = offset
    ii = np.arange(side) + i0
    jj = np.arange(side) + j0
    return ((ii >= 0) & (ii < grid.n_lat))[:, None] & ((jj >= 0) & (jj < grid.n_lon))[None, :]


def coverage_mask(offset: tuple[int, int], side: int, grid: GridSpec) -> np.ndarray:
    """Full-grid mask of the cells covered by a patch window."""
    i0, j0 = offset
    ii = np.arange(grid.n_lat)
    jj = np.arange(grid.n_lon)
    return ((ii >= i0) & (ii < i0 + side))[:, None] & ((jj >= j0) & (jj < j0 + side))[None, :]


def embed_patch(patch: Patch, grid: GridSpec) -> np.ndarray:
    """Write the in-domain patch cells back at their parent coordinates.

    Cells not covered by the patch are zero.  Restricted to the window this
    is the inverse of :func:`crop_patch`.
    """
    side = patch.side
    i0, j0 = patch.offset
    if not np.array_equal(patch.in_domain, expected_patch_mask(patch.offset, side, grid)):
        raise ValidationError(f"patch offset {patch.offset} inconsistent with grid {grid.shape}")
    out = np.zeros(grid.shape, dtype=patch.values.dtype)
    pi0, pi1 = max(0, -i0), min(side, grid.n_lat - i0)
    pj0, pj1 = max(0, -j0), min(side, grid.n_lon - j0)
    if pi0 < pi1 and pj0 < pj1:
        out[i0 + pi0:i0 + pi1, j0 + pj0:j0 + pj1] = patch.values[pi0:pi1, pj0:pj1]
    return out


# --- FPG1: binary grid-field container -------------------------------------
#
# Little-endian, 96-byte header followed by n_lat*n_lon float64 values in
# row-major order, row 0 southernmost:
#
#   offset  0  magic "FPG1"            4s
#   offset  4  format version          u32   (currently 1)
#   offset  8  n_lat                   u32
#   offset 12  n_lon                   u32
#   offset 16  space flag              u8    (0 = linear, 1 = log)
#   offset 20  config hash             u32   (0 when not produced by a run)
#   offset 24  lat0, lon0, d_lat, d_lon        4 x f64
#   offset 56  release id              u32
#   offset 64  release lat, lon, altitude, time  4 x f64
#
# Note: the header carries every field at full width, which does not fit in
# 64 bytes; this container uses 96.

_FPG1 = struct.Struct("<4sIIIB3xI4dI4x4d")
FPG1_VERSION = 1


def write_footprint(path: str | Path, fp: Footprint, config_hash: int = 0) -> None:
    header = _FPG1.pack(
        b"FPG1", FPG1_VERSION, fp.grid.n_lat, fp.grid.n_lon,
        1 if fp.space == Space.LOG else 0, config_hash & 0xFFFFFFFF,
        fp.grid.lat0, fp.grid.lon0, fp.grid.d_lat, fp.grid.d_lon,
        fp.release.id,
        fp.release.lat, fp.release.lon, fp.release.altitude, fp.release.time,
    )
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(fp.values, dtype="<f8").tobytes())


def read_footprint(path: str | Path) -> Footprint:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < _FPG1.size:
        raise FormatError(f"{path}: truncated FPG1 header")
    (magic, version, n_lat, n_lon, space_flag, _cfg,
     lat0, lon0, d_lat, d_lon, rid, rlat, rlon, ralt, rtime) = _FPG1.unpack_from(raw)
    if magic != b"FPG1":
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != FPG1_VERSION:
        raise FormatError(f"{path}: unsupported FPG1 version {version}")
    n = n_lat * n_lon
    body = np.frombuffer(raw, dtype="<f8", count=n, offset=_FPG1.size)
    if body.size != n:
        raise FormatError(f"{path}: expected {n} values, file too short")
    grid = GridSpec(n_lat, n_lon, lat0, lon0, d_lat, d_lon)
    release = Release(rid, rlat, rlon, ralt, rtime)
    space = Space.LOG if space_flag else Space.LINEAR
    return Footprint(grid, release, body.reshape(n_lat, n_lon).astype(np.float64), space)


def write_flux(path: str | Path, flux: FluxField, config_hash: int = 0) -> None:
    """Store a flux field in the FPG1 container (release fields zeroed)."""
    fp = Footprint(flux.grid, Release(0, flux.grid.lat0, flux.grid.lon0, 0.0, 0.0),
                   flux.values, Space.LINEAR)
    write_footprint(path, fp, config_hash)


def read_flux(path: str | Path) -> FluxField:
    fp = read_footprint(path)
    return FluxField(fp.grid, fp.values)


# --- dataset manifest -------------------------------------------------------

SPLIT_NAMES = ("train", "val", "test")


@dataclass(frozen=True)
class ManifestEntry:
    release: Release
    footprint: str  # path relative to the manifest file
    features: str


@dataclass(frozen=True)
class DatasetManifest:
    """Train/val/test listing of releases and their artifact files."""

    grid: GridSpec
    splits: dict[str, list[ManifestEntry]] = field(default_factory=dict)
    config_hash: int = 0

    def __post_init__(self):
        for name in self.splits:
            if name not in SPLIT_NAMES:
                raise ValidationError(f"unknown split {name!r}")
        times = {name: [e.release.time for e in self.splits.get(name, [])]
                 for name in SPLIT_NAMES}
        prev_max = -np.inf
        for name in SPLIT_NAMES:
            if not times[name]:
                continue
            if min(times[name]) <= prev_max:
                raise ValidationError(f"split {name!r} overlaps an earlier split in time")
            prev_max = max(times[name])

    def entries(self, split: str) -> list[ManifestEntry]:
        return list(self.splits.get(split, []))

    def all_entries(self) -> list[ManifestEntry]:
        return [e for name in SPLIT_NAMES for e in self.splits.get(name, [])]


def _release_to_json(r: Release) -> dict:
    return {"id": r.id, "lat": r.lat, "lon": r.lon, "altitude": r.altitude, "time": r.time}


def _release_from_json(d: dict) -> Release:
    return Release(int(d["id"]), float(d["lat"]), float(d["lon"]),
                   float(d["altitude"]), float(d["time"]))


def save_manifest(path: str | Path, manifest: DatasetManifest) -> None:
    doc = {
        "format": "FPMANIFEST1",
        "config_hash": manifest.config_hash,
        "grid": {
            "n_lat": manifest.grid.n_lat, "n_lon": manifest.grid.n_lon,
            "lat0": manifest.grid.lat0, "lon0": manifest.grid.lon0,
            "d_lat": manifest.grid.d_lat, "d_lon": manifest.grid.d_lon,
        },
        "splits": {
            name: [
                {"release": _release_to_json(e.release),
                 "footprint": e.footprint, "features": e.features}
                for e in manifest.splits.get(name, [])
            ]
            for name in SPLIT_NAMES
        },
    }
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True))


def load_manifest(path: str | Path) -> DatasetManifest:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from exc
    if doc.get("format") != "FPMANIFEST1":
        raise FormatError(f"{path}: not a dataset manifest")
    g = doc["grid"]
    grid = GridSpec(int(g["n_lat"]), int(g["n_lon"]), float(g["lat0"]),
                    float(g["lon0"]), float(g["d_lat"]), float(g["d_lon"]))
    splits = {
        name: [ManifestEntry(_release_from_json(e["release"]), e["footprint"], e["features"])
               for e in doc["splits"].get(name, [])]
        for name in SPLIT_NAMES
    }
    return DatasetManifest(grid, splits, int(doc.get("config_hash", 0)))
