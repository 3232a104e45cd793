"""Run configuration: defaults, JSON config files, and flag overrides.

Precedence is flags > file > defaults.  The only environment overrides are
LATENTPLAN_OUT (output directory) and LATENTPLAN_THREADS (torch thread
count); everything else, including every seed, must be explicit so runs are
reproducible from the config alone.
"""

from __future__ import annotations

import copy
import json
import os
from dataclasses import replace
from pathlib import Path
from typing import Any

import torch

from .denoiser import DenoiserConfig, DiffusionSchedule, PRESETS
from .pretrain import PretrainConfig
from .renderer import BaseTrainConfig, RendererConfig, RobustTrainConfig
from .rl import RLConfig

DEFAULTS: dict[str, Any] = {
    "seed": 0,
    "out_dir": "runs/default",
    "preset": "desk",
    "d_e": 32,
    "embedder_seed": 0,
    "t_steps": 8,
    "sigma_max": 0.1,
    "threads": 1,
    "pretrain": {
        "lambda_stop": 0.1,
        "batch_size": 64,
        "steps": 3000,
        "lr": 6e-3,
        "log_every": 50,
        "checkpoint_every": 500,
        "corpus_size": 4096,
    },
    "rl": {
        "iterations": 60,
        "episodes_per_iter": 16,
        "ppo_epochs": 4,
        "gamma": 1.0,
        "lam": 0.95,
        "clip_eps": 0.2,
        "beta_kl": 0.01,
        "lr_policy": 1e-4,
        "lr_value": 1e-3,
        "shared_advantage": True,
        "standardize": True,
        "max_halvings": 8,
        "guard_frac": 0.5,
        "guard_min_peak": 0.4,
        "guard_patience": 5,
        "family": "mc",
        "k": 4,
        "pool_size": 256,
        "tasks_file": "",
        "pretrain_checkpoint": "",
        "dump_rollouts": False,
    },
    "renderer": {
        "d_model": 128,
        "n_layers": 2,
        "n_heads": 4,
        "d_ff": 256,
        "max_text_len": 16,
        "base_epochs": 30,
        "corrector_epochs": 20,
        "batch_size": 64,
        "lr": 1e-3,
        "alpha": 0.01,
        "samples_per_example": 1,
        "train_rounds": 1,
        "train_size": 1024,
        "eval_size": 256,
        "min_len": 4,
        "max_len": 12,
        "iters": 10,
        "eval_noise": 0.01,
        "corpus_file": "",
        "pretrain_checkpoint": "",
    },
}


class ConfigError(ValueError):
    """Raised on unknown keys or invalid configuration values."""


def deep_merge(base: dict, override: dict, path: str = "") -> dict:
    """Merge override into base, rejecting keys absent from the schema."""
    out = copy.deepcopy(base)
    for key, value in override.items():
        here = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"unknown config key {here!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{here!r} must be a table")
            out[key] = deep_merge(base[key], value, here)
        else:
            out[key] = value
    return out


def load_config(path: str | Path | None, overrides: dict | None = None) -> dict:
    """defaults <- file <- overrides, then environment for out_dir/threads."""
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        with open(path) as fh:
            cfg = deep_merge(cfg, json.load(fh))
    if overrides:
        cfg = deep_merge(cfg, overrides)
    if os.environ.get("LATENTPLAN_OUT"):
        cfg["out_dir"] = os.environ["LATENTPLAN_OUT"]
    if os.environ.get("LATENTPLAN_THREADS"):
        cfg["threads"] = int(os.environ["LATENTPLAN_THREADS"])
    return cfg


def apply_threads(cfg: dict) -> None:
    # bitwise reproducibility is only guaranteed single-threaded
    torch.set_num_threads(int(cfg["threads"]))


def denoiser_config(cfg: dict) -> DenoiserConfig:
    preset = cfg["preset"]
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}, have {sorted(PRESETS)}")
    base = PRESETS[preset]
    if base.t_steps != cfg["t_steps"]:
        base = replace(base, t_steps=int(cfg["t_steps"]))
    return base


def schedule(cfg: dict) -> DiffusionSchedule:
    return DiffusionSchedule(t_steps=int(cfg["t_steps"]), sigma_max=float(cfg["sigma_max"]))


def pretrain_config(cfg: dict) -> PretrainConfig:
    p = cfg["pretrain"]
    return PretrainConfig(
        lambda_stop=float(p["lambda_stop"]),
        batch_size=int(p["batch_size"]),
        steps=int(p["steps"]),
        lr=float(p["lr"]),
        log_every=int(p["log_every"]),
        checkpoint_every=int(p["checkpoint_every"]),
    )


def rl_config(cfg: dict) -> RLConfig:
    r = cfg["rl"]
    return RLConfig(
        iterations=int(r["iterations"]),
        episodes_per_iter=int(r["episodes_per_iter"]),
        ppo_epochs=int(r["ppo_epochs"]),
        gamma=float(r["gamma"]),
        lam=float(r["lam"]),
        clip_eps=float(r["clip_eps"]),
        beta_kl=float(r["beta_kl"]),
        lr_policy=float(r["lr_policy"]),
        lr_value=float(r["lr_value"]),
        shared_advantage=bool(r["shared_advantage"]),
        standardize=bool(r["standardize"]),
        max_halvings=int(r["max_halvings"]),
        guard_frac=float(r["guard_frac"]),
        guard_min_peak=float(r["guard_min_peak"]),
        guard_patience=int(r["guard_patience"]),
    )


def renderer_config(cfg: dict, d: int) -> RendererConfig:
    r = cfg["renderer"]
    return RendererConfig(
        d=d,
        d_model=int(r["d_model"]),
        n_layers=int(r["n_layers"]),
        n_heads=int(r["n_heads"]),
        d_ff=int(r["d_ff"]),
        max_text_len=int(r["max_text_len"]),
    )


def base_train_config(cfg: dict) -> BaseTrainConfig:
    r = cfg["renderer"]
    return BaseTrainConfig(
        epochs=int(r["base_epochs"]), batch_size=int(r["batch_size"]), lr=float(r["lr"])
    )


def robust_train_config(cfg: dict, alpha: float | None = None) -> RobustTrainConfig:
    r = cfg["renderer"]
    return RobustTrainConfig(
        alpha=float(r["alpha"] if alpha is None else alpha),
        samples_per_example=int(r["samples_per_example"]),
        train_rounds=int(r["train_rounds"]),
        epochs=int(r["corrector_epochs"]),
        batch_size=int(r["batch_size"]),
        lr=float(r["lr"]),
    )
