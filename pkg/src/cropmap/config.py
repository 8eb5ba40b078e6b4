"""Pipeline configuration: one YAML file driving every command.

The file is a nested mapping; unknown keys are rejected so typos surface as
config errors instead of silently falling back to defaults. Paths resolve
relative to the config file's directory.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .errors import ConfigError

DEFAULTS: dict = {
    "paths": {
        "out_dir": "out",
        "imagery": None,      # list of four level GeoTIFFs
        "polygons": None,     # labels GeoJSON
        "schema": None,       # category CSV; built-in 21-category schema if unset
        "landcover": None,    # landcover GeoTIFF
        "probability": None,  # probability map (input to stratify)
        "strata": None,       # strata raster (input to allocate/attribute)
        "stratification": None,  # stratification JSON
    },
    "synth": {
        "rows": 1024,
        "cols": 1024,
        "pixel_size": 5.0,
        "origin_x": 500000.0,
        "origin_y": 1500000.0,
        "crs_id": "EPSG:32648",
        "mixture": {"Cashew": 0.3, "Forest Cover": 0.5, "Bare land": 0.2},
        "field_px_min": 16,
        "field_px_max": 64,
        "noise_std": 0.05,
        "age_min": 1,
        "age_max": 20,
    },
    "dataset": {
        "n_patches": 200,
        "augment_per_patch": 0,
        "min_age": 3.0,
        "min_fraction": 0.0,
    },
    "model": {
        "input_channels": [4, 6, 6, 6],
        "base_channels": [16, 32, 64, 128],
        "n_categories": 22,
        "dropout_rate": 0.1,
        "attention_inter_channels": 16,
        "norm": "group",
    },
    "train": {
        "batch_size": 16,
        "max_epochs": 20,
        "patience": 5,
        "learning_rate": 1e-3,
        "lr_plateau_factor": 0.5,
        "lr_plateau_patience": 2,
        "val_fraction": 0.25,
    },
    "inference": {
        "stride": 128,
        "margin": 32,
        "mc_runs": 10,
        "dropout": 0.1,
        "combine": "mean",
        "batch_size": 4,
        "suppress": [],
    },
    "stratification": {
        "cashew_min_stratum": 1,
    },
    "allocation": {
        "budget": 500,
        "prob_bin_multiplier": 2.0,
        "landcover_multiplier": 0.5,
        "min_per_stratum": 30,
    },
    "attribution": {
        "cashew_strata": [1, 2, 3, 4, 5, 6, 7],
    },
    "seeds": {
        "synth": 7,
        "patches": 11,
        "train": 13,
        "mc": 17,
        "allocate": 19,
    },
}


@dataclass(frozen=True)
class PipelineConfig:
    """Resolved configuration plus the directory paths resolve against."""

    data: dict
    base_dir: Path = field(default_factory=Path.cwd)

    def section(self, name: str) -> dict:
        return self.data[name]

    def path(self, key: str, required: bool = False) -> Path | None:
        """A resolved path from the paths section; errors when required and unset."""
        value = self.data["paths"].get(key)
        if value is None:
            if required:
                raise ConfigError(f"missing required config key: paths.{key}")
            return None
        if isinstance(value, list):
            raise ConfigError(f"paths.{key} must be a single path")
        return self._resolve(value)

    def imagery_paths(self) -> list[Path]:
        value = self.data["paths"].get("imagery")
        if not value:
            raise ConfigError("missing required config key: paths.imagery")
        if not isinstance(value, list) or len(value) != 4:
            raise ConfigError("paths.imagery must list exactly 4 level rasters")
        return [self._resolve(v) for v in value]

    def out_dir(self) -> Path:
        out = self._resolve(self.data["paths"]["out_dir"])
        out.mkdir(parents=True, exist_ok=True)
        return out

    def _resolve(self, value: str) -> Path:
        p = Path(value)
        return p if p.is_absolute() else self.base_dir / p


def _merge(defaults: dict, override: dict, trail: str = "") -> dict:
    out = {}
    for key, base in defaults.items():
        if key in override:
            value = override[key]
            if isinstance(base, dict) and key not in ("mixture",):
                if not isinstance(value, dict):
                    raise ConfigError(f"config key {trail}{key} must be a mapping")
                out[key] = _merge(base, value, trail=f"{trail}{key}.")
            else:
                out[key] = value
        else:
            out[key] = base
    unknown = set(override) - set(defaults)
    if unknown:
        raise ConfigError(f"unknown config key(s): "
                          f"{', '.join(sorted(trail + k for k in unknown))}")
    return out


def load_config(path=None, overrides: dict | None = None) -> PipelineConfig:
    """Load and validate a YAML config; None gives pure defaults.

    ``overrides`` is a same-shaped nested dict applied on top (CLI flags).
    """
    raw: dict = {}
    base_dir = Path.cwd()
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"missing config file: {p}")
        try:
            raw = yaml.safe_load(p.read_text()) or {}
        except yaml.YAMLError as e:
            raise ConfigError(f"config is not valid YAML: {p} ({e})")
        if not isinstance(raw, dict):
            raise ConfigError(f"config root must be a mapping: {p}")
        base_dir = p.parent.resolve()
    data = _merge(DEFAULTS, raw)
    if overrides:
        data = _merge(data, overrides)
    return PipelineConfig(data=data, base_dir=base_dir)
