"""Run configuration: defaults, YAML loading, flag overrides, builders.

Precedence is flags > config file > defaults. The fully resolved mapping
is what lands in the run manifest, so every knob that affected a run is
recorded in one diffable document.
"""

from __future__ import annotations

import copy
import os

import yaml

from .backend import BACKEND_REGISTRY, DEFAULT_VOCAB, ToyBackendConfig
from .cut import PatchConfig
from .editor import EditConfig
from .backend import GuidanceConfig
from .schedule import TimestepRange, make_schedule


class ConfigError(ValueError):
    """Invalid or inconsistent run configuration."""


DEFAULTS = {
    "run": {
        "source": None,
        "prompt_ref": "cat",
        "prompt_tgt": "dog",
        "out": "runs",
        "tag": None,
    },
    "backend": {
        "name": "toy",
        "latent_shape": [4, 64, 64],
        "sigma": 0.25,
        "seed": 0,
        "vocab": list(DEFAULT_VOCAB),
        "tap_channels": [16, 16, 16, 16],
        "attn_dim": 8,
        "mean_amplitude": 0.7,
        "object_amplitude": 1.0,
        "object_radius": 0.38,
        "mean_grid": 8,
    },
    "schedule": {
        "kind": "scaled_linear",
        "num_steps": 1000,
        "params": {},
    },
    "guidance": {"omega": 7.5},
    "edit": {
        "lambda_con": 3.0,
        "steps": 200,
        "step_size": 0.02,
        "t_min": 50,
        "t_max": 950,
        "seed": 0,
        "log_every": 20,
        "loss_location": "self_attention",
    },
    "patch": {
        "num_patches": 256,
        "patch_size": None,
        "tau": 0.07,
        "layer_policy": "up_path_no_bottleneck",
        "layers": [],
        "normalize": True,
        "aggregation": "sum",
        "debug_locations": False,
    },
}

# sections whose values are free-form (kind-specific schedule parameters)
_FREEFORM = {("schedule", "params")}


def load_config_file(path: str) -> dict:
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    with open(path) as fh:
        try:
            data = yaml.safe_load(fh) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"config root must be a mapping: {path}")
    return data


def _merge(base: dict, override: dict, path=()) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if key not in base and path not in _FREEFORM:
            dotted = ".".join(path + (str(key),))
            raise ConfigError(f"unknown config key: {dotted}")
        if isinstance(value, dict) and isinstance(base.get(key), dict):
            out[key] = _merge(base[key], value, path + (key,))
        else:
            out[key] = copy.deepcopy(value)
    return out


def resolve_config(file_cfg: dict | None = None, overrides: dict | None = None,
                   config_dir: str | None = None) -> dict:
    """Merge defaults <- file <- flag overrides; resolve relative paths.

    ``overrides`` maps dotted keys like ``edit.lambda_con`` to values;
    entries whose value is None are ignored (unset flags).
    """
    resolved = _merge(DEFAULTS, file_cfg or {})
    for dotted, value in (overrides or {}).items():
        if value is None:
            continue
        node = resolved
        *parents, leaf = dotted.split(".")
        for part in parents:
            if part not in node:
                raise ConfigError(f"unknown config key: {dotted}")
            node = node[part]
        if leaf not in node and tuple(parents) not in _FREEFORM:
            raise ConfigError(f"unknown config key: {dotted}")
        node[leaf] = value
    source = resolved["run"]["source"]
    if source and config_dir and not os.path.isabs(source):
        resolved["run"]["source"] = os.path.normpath(os.path.join(config_dir, source))
    return resolved


def build_schedule(resolved: dict):
    section = resolved["schedule"]
    try:
        return make_schedule(section["kind"], int(section["num_steps"]), **section["params"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def build_backend(resolved: dict, sched):
    section = dict(resolved["backend"])
    name = section.pop("name")
    if name not in BACKEND_REGISTRY:
        raise ConfigError(
            f"unknown backend {name!r}; registered: {sorted(BACKEND_REGISTRY)}"
        )
    try:
        cfg = ToyBackendConfig(
            latent_shape=tuple(section["latent_shape"]),
            sigma=float(section["sigma"]),
            seed=int(section["seed"]),
            vocab=tuple(section["vocab"]),
            tap_channels=tuple(section["tap_channels"]),
            attn_dim=int(section["attn_dim"]),
            mean_amplitude=float(section["mean_amplitude"]),
            object_amplitude=float(section["object_amplitude"]),
            object_radius=float(section["object_radius"]),
            mean_grid=int(section["mean_grid"]),
        )
        return BACKEND_REGISTRY[name](cfg, sched)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def build_edit_config(resolved: dict) -> EditConfig:
    edit = resolved["edit"]
    patch = resolved["patch"]
    try:
        return EditConfig(
            guidance=GuidanceConfig(omega=float(resolved["guidance"]["omega"])),
            lambda_con=float(edit["lambda_con"]),
            steps=int(edit["steps"]),
            step_size=float(edit["step_size"]),
            t_range=TimestepRange(int(edit["t_min"]), int(edit["t_max"])),
            patch=PatchConfig(
                num_patches=int(patch["num_patches"]),
                patch_size=None if patch["patch_size"] is None else int(patch["patch_size"]),
                tau=float(patch["tau"]),
                layer_policy=patch["layer_policy"],
                layers=tuple(patch["layers"]),
                normalize=bool(patch["normalize"]),
                aggregation=patch["aggregation"],
                debug_locations=bool(patch["debug_locations"]),
            ),
            seed=int(edit["seed"]),
            log_every=int(edit["log_every"]),
            loss_location=edit["loss_location"],
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
