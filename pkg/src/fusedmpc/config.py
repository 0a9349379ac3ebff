"""Layered run configuration: defaults <- YAML file <- dotted CLI overrides.

Every key has a default; unknown keys are rejected with a diagnostic naming
the offending path. The effective configuration is echoed into the output
directory of each run for reproducibility.
"""

from __future__ import annotations

import copy
import os
from importlib import resources

import numpy as np
import yaml

from .dynamics import DynModel
from .errors import ConfigError
from .ilqr import SolveSettings
from .policy import CostHeadScaling
from .raceenv import RewardConfig, TrackSpec, load_track
from .trainer import TrainConfig

DEFAULTS = {
    "seed": 0,
    "workers": 2,
    "out": "runs/out",
    "model": {
        "kind": "planar_quadrotor",
        "dt": 0.05,
        "mass": 0.6,
        "arm": 0.15,
        "inertia": 0.01,
        "gravity": 9.81,
        "dim": 1,  # double_integrator only
    },
    "solver": {
        "T": 2,
        "K_max": 5,
        "u_min": 0.0,
        "u_max": 6.0,
        "alphas": [1.0, 0.5, 0.25, 0.1],
        "conv_tol": 1.0e-6,
        "boxqp_max_iter": 20,
        "boxqp_tol": 1.0e-9,
    },
    "policy": {
        "hidden": [512, 512],
        "diag_lo": 1.0e-3,
        "diag_hi": 10.0,
        "c_lo": -10.0,
        "c_hi": 10.0,
        "sigma_init_scale": 0.1,
    },
    "train": {
        "mode": "ac_mpc",
        "gamma": 0.99,
        "lam": 0.95,
        "steps_per_update": 256,
        "minibatch_size": 2048,
        "sgd_epochs": 10,
        "clip_range": 0.2,
        "lr_start": 3.0e-4,
        "lr_end": 3.0e-5,
        "entropy_coef": 0.0,
        "value_coef": 0.5,
        "grad_clip": 0.5,
        "total_steps": 200_000,
        "num_envs": 16,
        "normalize_advantages": True,
        "checkpoint_every": 20,
        "grid_T": None,
        "grid_K": None,
    },
    "env": {
        "track": "bundled",
        "reset_noise": 0.1,
        "timeout": 20.0,
        "k_p": 1.0,
        "gate_bonus": 10.0,
        "crash_penalty": 10.0,
        "time_penalty": 0.1,
        "progress_cap": 5.0,
        "miss_factor": 2.0,
    },
    "bench": {"B": [1, 256], "T": [2, 10, 50], "K": 10, "reps": 10},
    "eval": {"episodes": 8, "checkpoint": None},
    "solve": {"scenario": "hover", "B": 1, "mode": "fused"},
}


def _merge(dst, src, prefix=""):
    for key, value in src.items():
        if key not in dst:
            raise ConfigError(f"unknown config key: {prefix}{key}")
        if isinstance(dst[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {prefix}{key} must be a section")
            _merge(dst[key], value, prefix + key + ".")
        else:
            dst[key] = value


def apply_override(cfg: dict, dotted: str, raw_value: str):
    parts = dotted.split(".")
    node = cfg
    for part in parts[:-1]:
        if part not in node or not isinstance(node[part], dict):
            raise ConfigError(f"unknown config key: {dotted}")
        node = node[part]
    leaf = parts[-1]
    if leaf not in node or isinstance(node[leaf], dict):
        raise ConfigError(f"unknown config key: {dotted}")
    value = yaml.safe_load(raw_value)
    if isinstance(value, str):
        # YAML leaves scientific notation like 1e-3 as a string
        try:
            value = float(value)
        except ValueError:
            pass
    node[leaf] = value


def load_config(path=None, overrides=()) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        try:
            with open(path) as f:
                raw = yaml.safe_load(f) or {}
        except yaml.YAMLError as e:
            raise ConfigError(f"cannot parse config file {path}: {e}") from e
        except OSError as e:
            raise ConfigError(f"cannot read config file {path}: {e}") from e
        if not isinstance(raw, dict):
            raise ConfigError(f"config file {path} must hold a mapping")
        _merge(cfg, raw)
    for dotted, value in overrides:
        apply_override(cfg, dotted, value)
    return cfg


def echo_config(cfg: dict, out_dir: str, drop=()):
    os.makedirs(out_dir, exist_ok=True)
    echo = {k: v for k, v in cfg.items() if k not in drop}
    path = os.path.join(out_dir, "config.yaml")
    with open(path, "w") as f:
        yaml.safe_dump(echo, f, sort_keys=True)
    return path


# ---------------------------------------------------------------------------
# object builders
# ---------------------------------------------------------------------------


def build_model(cfg) -> DynModel:
    m = cfg["model"]
    kind = m["kind"]
    if kind == "planar_quadrotor":
        return DynModel.planar_quadrotor(
            dt=m["dt"], mass=m["mass"], arm=m["arm"], inertia=m["inertia"],
            gravity=m["gravity"],
        )
    if kind == "double_integrator":
        return DynModel.double_integrator(int(m["dim"]), dt=m["dt"])
    raise ConfigError(f"unknown model kind: {kind!r}")


def build_settings(cfg, T=None, K=None) -> SolveSettings:
    s = cfg["solver"]
    return SolveSettings(
        T=int(T if T is not None else s["T"]),
        K_max=int(K if K is not None else s["K_max"]),
        u_min=np.asarray(s["u_min"], dtype=np.float64),
        u_max=np.asarray(s["u_max"], dtype=np.float64),
        alphas=tuple(s["alphas"]),
        conv_tol=float(s["conv_tol"]),
        boxqp_max_iter=int(s["boxqp_max_iter"]),
        boxqp_tol=float(s["boxqp_tol"]),
    )


def bundled_track_path() -> str:
    return str(resources.files("fusedmpc") / "tracks" / "hairpin5.yaml")


def build_track(cfg) -> TrackSpec:
    track = cfg["env"]["track"]
    if track == "bundled":
        return load_track(bundled_track_path())
    return load_track(track)


def build_reward(cfg) -> RewardConfig:
    e = cfg["env"]
    return RewardConfig(
        k_p=e["k_p"], gate_bonus=e["gate_bonus"], crash_penalty=e["crash_penalty"],
        time_penalty=e["time_penalty"], progress_cap=e["progress_cap"],
        timeout=e["timeout"], miss_factor=e["miss_factor"],
    )


def build_train_config(cfg, mode=None, total_steps=None) -> TrainConfig:
    t = cfg["train"]
    return TrainConfig(
        gamma=t["gamma"], lam=t["lam"], steps_per_update=int(t["steps_per_update"]),
        minibatch_size=int(t["minibatch_size"]), sgd_epochs=int(t["sgd_epochs"]),
        clip_range=t["clip_range"], lr_start=t["lr_start"], lr_end=t["lr_end"],
        entropy_coef=t["entropy_coef"], value_coef=t["value_coef"],
        grad_clip=t["grad_clip"],
        total_steps=int(total_steps if total_steps is not None else t["total_steps"]),
        num_envs=int(t["num_envs"]),
        mode=mode if mode is not None else t["mode"],
        normalize_advantages=bool(t["normalize_advantages"]),
        checkpoint_every=int(t["checkpoint_every"]),
    )


def build_scaling(cfg, model: DynModel) -> CostHeadScaling:
    p = cfg["policy"]
    return CostHeadScaling.for_model(
        model, model.n_x,
        diag_lo=p["diag_lo"], diag_hi=p["diag_hi"], c_lo=p["c_lo"], c_hi=p["c_hi"],
    )
