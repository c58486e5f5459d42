"""Pipeline configuration: one JSON document validated against the defaults.

Unknown keys are rejected (with a best-effort line number from the source
text); known keys override the defaults.  The canonical JSON of the merged
document is hashed and stamped into every artifact the run produces.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any

from .domain import GridSpec, ValidationError
from .features import FeatureSpec
from .gnn import GnnHyperParams
from .lpdm import SimConfig
from .synthmet import MetConfig
from .train import TrainConfig


class ConfigError(ValidationError):
    """Bad configuration document."""


def default_config() -> dict[str, Any]:
    return {
        "grid": {"n_lat": 64, "n_lon": 64, "lat0": 0.0, "lon0": 0.0,
                 "d_lat": 0.3, "d_lon": 0.3},
        "met": {"seed": 7, "base_u": -6.0, "perturbation": 2.5, "n_modes": 6,
                "period_hours": 96.0, "shear_exponent": 0.15,
                "time_step_hours": 6.0},
        "sim": {"n_particles": 2000, "dt_seconds": 600.0, "t_back_hours": 72.0,
                "k_h": 1500.0, "sigma_w": 0.6, "h_surf": 100.0, "h_top": 2000.0,
                "seed": 99},
        "dataset": {"seed": 42, "n_train": 600, "n_val": 150, "n_test": 250,
                    "windows": {"train": [96.0, 396.0], "val": [408.0, 468.0],
                                "test": [480.0, 600.0]},
                    "altitude_range": [50.0, 150.0]},
        "features": {"lags": [0.0, -6.0, -12.0], "side": 50},
        "model": {"latent": 32, "rounds": 3, "hidden_layers": 2, "mesh_r": 3.0,
                  "activation": "relu"},
        "train": {"epochs": 20, "batch_size": 8, "learning_rate": 2e-3,
                  "beta1": 0.9, "beta2": 0.999, "adam_eps": 1e-8,
                  "shuffle_seed": 1234},
        "ensemble": {"seeds": [1, 2, 3, 4], "eps_cv": 1e-9},
        "postprocess": {"eps_log": 1e-9, "tau": "auto", "tau_percentile": 5.0,
                        "n_quantiles": 101},
        "flux": {"seed": 11, "n_hotspots": 12, "background": 0.05},
        "analysis": {"coarse_factor": 8},
        "bench": {"n": 20},
    }


def _line_of_key(text: str, key: str) -> int | None:
    needle = f'"{key}"'
    pos = text.find(needle)
    if pos < 0:
        return None
    return text.count("\n", 0, pos) + 1


def _check_keys(user: Any, defaults: Any, path: str, text: str) -> None:
    if isinstance(defaults, dict):
        if not isinstance(user, dict):
            raise ConfigError(f"config section {path or '<root>'} must be an object")
        for key, value in user.items():
            if key not in defaults:
                line = _line_of_key(text, key)
                where = f" (line {line})" if line else ""
                raise ConfigError(f"unknown config key {path + key!r}{where}")
            _check_keys(value, defaults[key], f"{path}{key}.", text)


def _merge(user: Any, defaults: Any) -> Any:
    if isinstance(defaults, dict):
        out = {}
        for key, dv in defaults.items():
            out[key] = _merge(user[key], dv) if isinstance(user, dict) and key in user else dv
        return out
    return user if user is not None else defaults


def canonical_json(doc: Any) -> str:
    return json.dumps(doc, sort_keys=True, separators=(",", ":"))


def config_hash(doc: dict[str, Any]) -> int:
    digest = hashlib.sha256(canonical_json(doc).encode()).digest()
    return int.from_bytes(digest[:4], "little")


@dataclass(frozen=True)
class PipelineConfig:
    raw: dict[str, Any]
    grid: GridSpec
    met: MetConfig
    sim: SimConfig
    feature_spec: FeatureSpec
    hyper: GnnHyperParams
    train: TrainConfig
    hash: int

    @property
    def ensemble_seeds(self) -> list[int]:
        return [int(s) for s in self.raw["ensemble"]["seeds"]]

    @property
    def eps_cv(self) -> float:
        return float(self.raw["ensemble"]["eps_cv"])

    @property
    def eps_log(self) -> float:
        return float(self.raw["postprocess"]["eps_log"])


def build_config(doc: dict[str, Any]) -> PipelineConfig:
    """Build the typed config from an already-merged document."""
    g = doc["grid"]
    grid = GridSpec(int(g["n_lat"]), int(g["n_lon"]), float(g["lat0"]),
                    float(g["lon0"]), float(g["d_lat"]), float(g["d_lon"]))
    m = doc["met"]
    met = MetConfig(seed=int(m["seed"]), base_u=float(m["base_u"]),
                    perturbation=float(m["perturbation"]), n_modes=int(m["n_modes"]),
                    period_hours=float(m["period_hours"]),
                    shear_exponent=float(m["shear_exponent"]),
                    time_step_hours=float(m["time_step_hours"]))
    s = doc["sim"]
    sim = SimConfig(n_particles=int(s["n_particles"]), dt_seconds=float(s["dt_seconds"]),
                    t_back_hours=float(s["t_back_hours"]), k_h=float(s["k_h"]),
                    sigma_w=float(s["sigma_w"]), h_surf=float(s["h_surf"]),
                    h_top=float(s["h_top"]), seed=int(s["seed"]))
    f = doc["features"]
    spec = FeatureSpec(levels=met.levels, lags=tuple(float(x) for x in f["lags"]),
                       side=int(f["side"]))
    mo = doc["model"]
    hyper = GnnHyperParams(channels=spec.channels, latent=int(mo["latent"]),
                           rounds=int(mo["rounds"]), hidden_layers=int(mo["hidden_layers"]),
                           side=spec.side, mesh_r=float(mo["mesh_r"]),
                           activation=str(mo["activation"]))
    t = doc["train"]
    train = TrainConfig(epochs=int(t["epochs"]), batch_size=int(t["batch_size"]),
                        learning_rate=float(t["learning_rate"]), beta1=float(t["beta1"]),
                        beta2=float(t["beta2"]), adam_eps=float(t["adam_eps"]),
                        shuffle_seed=int(t["shuffle_seed"]),
                        eps_log=float(doc["postprocess"]["eps_log"]))

    ds = doc["dataset"]
    w = ds["windows"]
    if not (w["train"][1] < w["val"][0] <= w["val"][1] < w["test"][0]):
        raise ConfigError("dataset windows must be disjoint and ordered train < val < test")
    if len(doc["ensemble"]["seeds"]) < 2:
        raise ConfigError("ensemble needs at least 2 seeds")
    tau = doc["postprocess"]["tau"]
    if tau != "auto" and float(tau) < 0:
        raise ConfigError("postprocess.tau must be 'auto' or a number >= 0")
    return PipelineConfig(doc, grid, met, sim, spec, hyper, train, config_hash(doc))


def load_config(path: str | Path) -> PipelineConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    text = path.read_text()
    try:
        user = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from exc
    defaults = default_config()
    _check_keys(user, defaults, "", text)
    return build_config(_merge(user, defaults))


def write_default_config(path: str | Path) -> None:
    Path(path).write_text(json.dumps(default_config(), indent=1, sort_keys=True))
