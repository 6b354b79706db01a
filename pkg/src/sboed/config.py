"""Run configuration: two documented profiles plus JSON overrides.

Every section is a flat mapping; overrides may only set keys that exist in
the chosen profile, so typos fail loudly instead of silently using defaults.
"""
from __future__ import annotations

import copy
import json
import zlib
from pathlib import Path
from typing import Any, Optional

import numpy as np

from .errors import ContractError
from .io import json_hash

__all__ = ["PROFILES", "SECTIONS", "load_config", "config_hash", "substream", "resolve"]

SECTIONS = ("grid", "pde", "prior", "reduction", "lano", "rl", "eval", "seeds", "paths")

_DESK = {
    "grid": {"nx": 33, "ny": 33, "lx": 1.0, "ly": 1.0, "obstacles": []},
    "pde": {
        "kappa": 0.02,
        "t_final": 1.0,
        "n_steps": 10,
        "theta": 1.0,
        "initial_condition": "square",
        "velocity": "g1",
        "velocity_strength": 1.0,
        "upwind": False,
    },
    "prior": {"gamma": 0.1, "delta": 0.8, "mean": 3.0},
    "reduction": {
        "n_samples": 200,
        "n_train": 160,
        "n_valid": 20,
        "n_test": 20,
        "r_m": 20,
        "r_u": 16,
        "as_samples": 16,
        "oversample": 5,
    },
    "lano": {
        "d_z": 48,
        "d_a": 24,
        "hidden_decoder": 32,
        "ffn_hidden": 96,
        "lambda_jac": 1.0,
        "epochs": 400,
        "batch": 16,
        "lr": 3e-3,
        "patience": 10,
    },
    "rl": {
        "obs_times": [0.2, 0.3, 0.4, 0.5, 0.6, 0.7],
        "stage_sets": [[1, 2], [3, 4], [5, 6]],
        "sensors": [[0.15, 0.5], [0.85, 0.5]],
        "rects": [[0.02, 0.28, 0.05, 0.95], [0.72, 0.98, 0.05, 0.95]],
        "noise_fraction": 0.01,
        "L": 40,
        "M": 64,
        "critic_steps": 50,
        "lr_actor": 1e-3,
        "lr_critic": 1e-3,
        "decay": 0.98,
        "explore": 0.3,
        "final_init": 3e-3,
        "seeds": [0, 1, 2],
    },
    "eval": {
        "n_test_params": 3,
        "n_random": 100,
        "compare_params": 10,
        "compare_designs": 5,
        "map_max_newton": 50,
        "lbfgs_max_iter": 200,
        "lbfgs_history": 200,
        "timing_repeats": 20,
    },
    "seeds": {"root": 20240601},
    "paths": {"out": "runs/desk"},
}

_PAPER = copy.deepcopy(_DESK)
_PAPER["grid"].update(
    {"nx": 89, "ny": 89, "obstacles": [[0.25, 0.5, 0.15, 0.4], [0.6, 0.75, 0.6, 0.85]]}
)
_PAPER["pde"].update({"kappa": 0.001, "t_final": 4.0, "n_steps": 40})
_PAPER["reduction"].update(
    {"n_samples": 2000, "n_train": 1600, "n_valid": 200, "n_test": 200, "r_m": 160, "r_u": 80, "as_samples": 100}
)
_PAPER["lano"].update({"d_z": 200, "d_a": 100, "hidden_decoder": 128, "ffn_hidden": 400, "epochs": 800, "batch": 100, "lr": 1e-3})
_PAPER["rl"].update(
    {
        "obs_times": [round(0.4 + 0.2 * k, 10) for k in range(19)],
        "stage_sets": [[1, 2], [3, 4], [5, 6], list(range(7, 20))],
        "sensors": [[0.2, 0.375], [0.8, 0.375], [0.5, 0.9]],
        "rects": [[0.0, 0.4, 0.15, 0.6], [0.6, 1.0, 0.15, 0.6], [0.3, 0.7, 0.85, 0.95]],
        "L": 200,
        "M": 1000,
        "critic_steps": 200,
        "lr_actor": 1e-4,
        "lr_critic": 3e-4,
        "explore": 0.0,
    }
)
_PAPER["eval"].update({"n_test_params": 5, "n_random": 200, "compare_params": 20})
_PAPER["paths"]["out"] = "runs/paper"

PROFILES = {"desk": _DESK, "paper": _PAPER}


def _merge(base: dict, override: dict, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, val in override.items():
        path = f"{where}.{key}" if where else key
        if key not in base:
            raise ContractError(f"unknown config key '{path}'")
        if isinstance(base[key], dict):
            if not isinstance(val, dict):
                raise ContractError(f"config key '{path}' must be a mapping")
            out[key] = _merge(base[key], val, path)
        else:
            out[key] = val
    return out


def _validate(cfg: dict):
    red = cfg["reduction"]
    if red["n_train"] + red["n_valid"] + red["n_test"] > red["n_samples"]:
        raise ContractError("train/valid/test split exceeds the sample count")
    if red["as_samples"] > max(red["n_train"], 0) and red["n_samples"] > 0:
        raise ContractError("active-subspace samples must come from the training split")
    rl = cfg["rl"]
    if len(rl["sensors"]) != len(rl["rects"]):
        raise ContractError("one permissible rectangle per sensor is required")
    idx = sorted(i for s in rl["stage_sets"] for i in s)
    if idx != list(range(1, len(rl["obs_times"]) + 1)):
        raise ContractError("stage sets must partition the observation indices 1..K")
    dt = cfg["pde"]["t_final"] / cfg["pde"]["n_steps"]
    for t in rl["obs_times"]:
        if abs(t / dt - round(t / dt)) > 1e-9 or not 0 < t <= cfg["pde"]["t_final"] + 1e-12:
            raise ContractError(f"observation time {t} is not a positive multiple of dt inside (0, T]")


def resolve(profile: str = "desk", overrides: Optional[dict] = None) -> dict:
    if profile not in PROFILES:
        raise ContractError(f"unknown profile {profile!r}; choose from {sorted(PROFILES)}")
    cfg = _merge(PROFILES[profile], overrides or {})
    cfg["profile"] = profile
    _validate(cfg)
    return cfg


def load_config(path=None, profile: str = "desk", seed: Optional[int] = None, out=None) -> dict:
    """Profile defaults, then the JSON file at ``path``, then command-line seed/out."""
    overrides: dict = {}
    if path is not None:
        try:
            overrides = json.loads(Path(path).read_text())
        except FileNotFoundError as exc:
            raise ContractError(f"config file {path} not found") from exc
        except json.JSONDecodeError as exc:
            raise ContractError(f"config file {path} is not valid JSON: {exc}") from exc
        if not isinstance(overrides, dict):
            raise ContractError("config file must hold a JSON object")
        overrides.pop("profile", None)
    cfg = resolve(profile, overrides)
    if seed is not None:
        cfg["seeds"]["root"] = int(seed)
    if out is not None:
        cfg["paths"]["out"] = str(out)
    return cfg


def config_hash(cfg: dict) -> str:
    """Hash of everything except the output location."""
    body = {k: v for k, v in cfg.items() if k != "paths"}
    return json_hash(body)[:16]


def substream(root: int, name: str, *extra: int) -> np.random.SeedSequence:
    """Named, reproducible child stream of the root seed."""
    return np.random.SeedSequence([int(root), zlib.crc32(name.encode()), *map(int, extra)])


def seed_int(ss: np.random.SeedSequence) -> int:
    return int(ss.generate_state(1, dtype=np.uint32)[0])
