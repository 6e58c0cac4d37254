"""Experiment configuration: a YAML tree with preset inheritance.

A config file names a ``preset`` (``desk`` or ``paper``) and overrides any
subset of its fields.  The resolved tree is validated against
``config.schema.json`` and hashed into a digest that stamps every output.
"""
from __future__ import annotations

import copy
import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Any, Mapping, Optional

import jsonschema
import yaml

from .codec import CodecConfig
from .diffusion import DiffusionConfig
from .metrics import config_digest
from .phantom import PhantomSpec
from .unet import UNetConfig

__all__ = ["DESK", "PAPER", "PRESETS", "ExperimentConfig", "ConfigError", "load_config",
           "resolve_config", "deep_merge", "schema"]

DESK: dict = {
    "preset": "desk",
    "seed": 0,
    "output_dir": "runs/default",
    "phantom": {
        "grid": [64, 64, 8],
        "n_ellipses": 3,
        "motion_amplitude": 0.08,
        "contrast_levels": [0.35, 0.7, 1.0],
        "noise_sigma": 0.0,
        "edge_blur": 0.0,
    },
    "corpus": {"n": 50, "train_size": None, "n_heldout": 50, "ablation_sizes": [50, 200]},
    "fusion": {"scheme_mix": [1 / 3, 1 / 3, 1 / 3], "group_size": 3, "freq_weighting": None,
               "augment_factor": 3},
    "codec": {
        "latent_channels": 4, "code_dim": 8, "codebook_size": 256, "quantize": True,
        "width": 32, "temporal_width": 32, "commitment": 0.25, "codebook_weight": 1.0,
        "centered": True, "iterations": 2000, "lr": 1e-3, "batch_volumes": 4,
        "patch": [64, 64, 3], "ema_decay": 0.999,
    },
    "diffusion": {
        "T": 200, "loss_p": 1, "iterations": 5000, "lr": 1e-3, "batch": 16,
        "ema_decay": 0.995, "cond_dropout": 0.1, "widths": [32, 64], "emb_dim": 64, "groups": 8,
    },
    "synthesis": {"n": 200, "strength": 1.0},
    "metrics": {"domain": "kspace", "kid_subset_size": 50, "kid_subsets": 100},
}

# full-scale operating point (full-size grid, short low-lr schedules)
_PAPER_OVERRIDES: dict = {
    "preset": "paper",
    "phantom": {"grid": [192, 192, 16]},
    "corpus": {"n": 200, "n_heldout": 50},
    "codec": {"iterations": 350, "lr": 4.5e-6, "patch": [64, 64, 3]},
    "diffusion": {"T": 1000, "iterations": 200, "lr": 1e-6},
    "synthesis": {"n": 2000},
}


def deep_merge(base: Mapping, over: Mapping) -> dict:
    out = copy.deepcopy(dict(base))
    for k, v in over.items():
        if isinstance(v, Mapping) and isinstance(out.get(k), Mapping):
            out[k] = deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


PAPER: dict = deep_merge(DESK, _PAPER_OVERRIDES)
PRESETS = {"desk": DESK, "paper": PAPER}


class ConfigError(ValueError):
    """Invalid configuration tree."""


def schema() -> dict:
    text = resources.files("ksyn").joinpath("config.schema.json").read_text(encoding="utf-8")
    return json.loads(text)


def resolve_config(tree: Optional[Mapping] = None) -> dict:
    """Merge ``tree`` over its preset and validate the result."""
    tree = dict(tree or {})
    preset = tree.get("preset", "desk")
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r} (choose from {sorted(PRESETS)})")
    try:
        jsonschema.validate(tree, schema())
        resolved = deep_merge(PRESETS[preset], tree)
        jsonschema.validate(resolved, schema())
    except jsonschema.ValidationError as e:
        where = "/".join(str(p) for p in e.absolute_path) or "<root>"
        raise ConfigError(f"config error at {where}: {e.message}") from None
    if abs(sum(resolved["fusion"]["scheme_mix"]) - 1.0) > 1e-9:
        raise ConfigError("fusion.scheme_mix must sum to 1")
    return resolved


@dataclass(frozen=True)
class ExperimentConfig:
    """Resolved configuration tree plus typed views of its sections."""

    tree: dict

    @classmethod
    def from_tree(cls, tree: Optional[Mapping] = None) -> "ExperimentConfig":
        return cls(resolve_config(tree))

    def __getitem__(self, key: str) -> Any:
        return self.tree[key]

    @property
    def digest(self) -> str:
        """Content hash of everything except ``output_dir``."""
        t = {k: v for k, v in self.tree.items() if k != "output_dir"}
        return config_digest(t)

    @property
    def training_digest(self) -> str:
        """Hash of the sections that shape trained models.

        Checkpoints are stamped with this, so run-level settings such as the
        synthesis count or metric options do not block loading a model.
        """
        skip = {"output_dir", "synthesis", "metrics"}
        return config_digest({k: v for k, v in self.tree.items() if k not in skip})

    @property
    def seed(self) -> int:
        return int(self.tree["seed"])

    def override(self, **sections) -> "ExperimentConfig":
        """New config with the given (possibly nested) values merged in."""
        return ExperimentConfig.from_tree(deep_merge(self.tree, sections))

    def phantom_spec(self) -> PhantomSpec:
        p = self.tree["phantom"]
        return PhantomSpec(grid=tuple(p["grid"]), n_ellipses=p["n_ellipses"],
                           motion_amplitude=p["motion_amplitude"],
                           contrast_levels=tuple(p["contrast_levels"]),
                           noise_sigma=p["noise_sigma"], edge_blur=p["edge_blur"])

    def codec_config(self, seed: Optional[int] = None) -> CodecConfig:
        c = dict(self.tree["codec"])
        c["patch"] = tuple(c["patch"])
        return CodecConfig(seed=self.seed if seed is None else seed, **c)

    def diffusion_config(self, seed: Optional[int] = None) -> DiffusionConfig:
        d = dict(self.tree["diffusion"])
        unet = UNetConfig(widths=tuple(d.pop("widths")), emb_dim=d.pop("emb_dim"), groups=d.pop("groups"))
        return DiffusionConfig(seed=self.seed if seed is None else seed, unet=unet, **d)

    def metric_config(self) -> dict:
        return dict(self.tree["metrics"], seed=self.seed)

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.tree, sort_keys=True)


def load_config(path=None, overrides: Optional[Mapping] = None) -> ExperimentConfig:
    """Read a YAML config (or start from the desk preset) and merge ``overrides``."""
    tree: dict = {}
    if path is not None:
        p = Path(path)
        try:
            text = p.read_text(encoding="utf-8")
        except OSError as e:
            raise ConfigError(f"cannot read config {p}: {e}") from None
        try:
            tree = yaml.safe_load(text) or {}
        except yaml.YAMLError as e:
            raise ConfigError(f"config {p} is not valid YAML: {e}") from None
        if not isinstance(tree, dict):
            raise ConfigError(f"config {p} must be a mapping at the top level")
    if overrides:
        tree = deep_merge(tree, overrides)
    return ExperimentConfig.from_tree(tree)
