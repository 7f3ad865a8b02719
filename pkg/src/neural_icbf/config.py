"""Single JSON config with sections mirroring the module layout.

Validation is strict: unknown keys anywhere are rejected (catches typos),
missing keys fall back to the defaults below. Numeric lists are allowed
wherever a scalar default is a list.
"""

from __future__ import annotations

import copy
import hashlib
import json


DEFAULTS = {
    "system": "vehicle",
    "seed": 0,
    "dynamics": {
        "quadrotor_mass": 1.0,
        "quadrotor_inertia": [0.01, 0.01, 0.02],
        "gravity": 9.81,
    },
    "env": {
        "state_low": [0.0, 0.0],
        "state_high": [1.0, 1.0],
        "obstacles": [
            {"center": [0.5, 0.42], "radius": 0.15},
            {"center": [0.18, 0.75], "radius": 0.12},
        ],
        "input_ball_radius": 2.0,
        "goal": [0.0, 0.0],
        "pos_idx": [0, 1],
    },
    "sysid": {
        "n_traj": 200,
        "horizon_s": 10.0,
        "dt": 0.1,
        "input_low": [-3.0, -3.0],
        "input_high": [3.0, 3.0],
        "x0_low": 0.0,
        "x0_high": 1.0,
        "epochs": 60,
        "batch_size": 256,
        "lr": 1e-3,
        "val_fraction": 0.1,
        "hidden_layers": 4,
        "hidden_units": 128,
        "activation": "tanh",
    },
    "expert": {
        "horizon": 20,
        "dt": 0.1,
        "q_weight": 1.0,
        "r_weight": [1.0, 0.001],
        "max_iters": 400,
        "grad_tol": 1e-5,
        "lr": 0.1,
        "lr_decay": 0.0,
        "n_starts": 200,
        "rh_steps": 60,
        "x0_low": 0.0,
        "x0_high": 1.0,
    },
    "imitation": {
        "epochs": 600,
        "batch_size": 128,
        "lr": 1e-3,
        "val_fraction": 0.1,
        "hidden_layers": 2,
        "hidden_units": 128,
    },
    "icbf": {
        "n_samples": 10000,
        "input_box_scale": 1.5,
        "epochs": 1200,
        "batch_size": 1024,
        "lr": 2e-3,
        "lr_decay_every": 300,
        "val_fraction": 0.1,
        "hidden_layers": 4,
        "hidden_units": 128,
        "eps": 0.05,
        "gamma_gain": 1.0,
        "kappa_track": 2.0,
        "eps_tightens": True,
        "checkpoint_metric": "val_sign_accuracy",
        "balance_low": 0.2,
        "balance_high": 0.8,
    },
    "safectl": {
        "substeps": 5,
        "p_tol": 1e-9,
        "project_input": False,
        "input_slack": 1e-3,
        "eps1": 0.1,
        "max_steps": 200,
        "sim_model": "true",
        "n_eval_starts": 100,
    },
    "certify": {
        "n_test_states": 200,
        "n_lipschitz_pairs": 2000,
        "smooth_rho": 0.01,
        "oracle_horizon": 20,
        "oracle_max_iters": 400,
    },
    "bench": {
        "n_avg": 100,
        "methods": ["nmpc", "proposed", "nominal_unfiltered"],
        "obstacle_penalty_weight": 1e3,
        "max_steps": 200,
    },
}


class ConfigError(ValueError):
    pass


def _merge(defaults, overrides, path=""):
    if not isinstance(overrides, dict):
        raise ConfigError(f"section {path or '<root>'} must be an object")
    merged = copy.deepcopy(defaults)
    for key, value in overrides.items():
        if key not in defaults:
            raise ConfigError(f"unknown config key: {path + key}")
        if isinstance(defaults[key], dict):
            merged[key] = _merge(defaults[key], value, path + key + ".")
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def load_config(path=None, overrides=None):
    """Defaults merged with a JSON file and/or a dict of overrides."""
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        with open(path) as fh:
            data = json.load(fh)
        cfg = _merge(cfg, data)
    if overrides:
        cfg = _merge(cfg, overrides)
    return cfg


def config_hash(cfg) -> str:
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def save_config(cfg, path) -> None:
    with open(path, "w") as fh:
        json.dump(cfg, fh, indent=1, sort_keys=True)
        fh.write("\n")
