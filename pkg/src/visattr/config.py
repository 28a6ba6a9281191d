"""Run configuration: flat key = value file with sections, strictly validated.

Every training hyperparameter is surfaced as a key with its default;
unknown sections or keys are rejected so typos cannot silently fall back
to defaults.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, fields
from pathlib import Path

from .errors import ConfigError


@dataclass
class RunConfig:
    # [run]
    seed: int = 0
    epochs: int = 150
    lr: float = 5e-5
    batch_size: int = 32
    tau: float = 0.07
    eta: float = 0.5
    lambda_rgb: float = 1.0
    lambda_slpd: float = 1e-2
    lambda_td: float = 1e-5
    patch_ratio_lo: float = 0.05
    patch_ratio_hi: float = 0.15
    pretext: tuple[str, ...] = ("rgb", "slpd", "td")
    color_distortion: bool = False
    id_crop_lo: float = 0.2
    id_crop_hi: float = 1.0
    id_flip: bool = True
    exclude_background: bool = True
    save_interval: int = 0
    # [model]
    widths: tuple[int, ...] = (16, 32, 64)
    kernel: int = 3
    n_feat: int = 64
    input_side: int = 64
    n_bins: int = 10
    d_slpd: int = 64
    td_channels: int = 16
    # [paths]
    manifest: str = ""
    checkpoint: str = ""
    log: str = ""
    embeddings: str = ""
    # [synth]
    synth_num_palettes: int = 6
    synth_items_per_outfit: int = 4
    synth_outfits: int = 200
    synth_image_side: int = 64
    synth_noise_sigma: float = 0.02
    synth_fitb_per_outfit: int = 5
    synth_retrieval_views: bool = True
    synth_disjoint: bool = False

    def validate(self) -> None:
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.tau <= 0:
            raise ConfigError("tau must be positive")
        if not 0.0 <= self.eta <= 1.0:
            raise ConfigError("eta must be in [0, 1]")
        if min(self.lambda_rgb, self.lambda_slpd, self.lambda_td) < 0:
            raise ConfigError("loss weights must be non-negative")
        if not 0.0 < self.patch_ratio_lo <= self.patch_ratio_hi <= 1.0:
            raise ConfigError("patch ratio range must satisfy 0 < lo <= hi <= 1")
        if not 0.0 < self.id_crop_lo <= self.id_crop_hi <= 1.0:
            raise ConfigError("id crop range must satisfy 0 < lo <= hi <= 1")
        if self.n_bins < 2:
            raise ConfigError("n_bins must be >= 2")
        tasks = set(self.pretext)
        if not tasks:
            raise ConfigError("pretext must name at least one task")
        if "id" in tasks and tasks != {"id"}:
            raise ConfigError("pretext 'id' cannot be combined with other tasks")
        if "id" not in tasks and not tasks <= {"rgb", "slpd", "td"}:
            raise ConfigError(f"unknown pretext tasks: {sorted(tasks - {'rgb', 'slpd', 'td'})}")
        if self.save_interval < 0:
            raise ConfigError("save_interval must be >= 0")


_SECTIONS: dict[str, dict[str, str]] = {
    "run": {
        "seed": "int", "epochs": "int", "lr": "float", "batch_size": "int",
        "tau": "float", "eta": "float", "lambda_rgb": "float", "lambda_slpd": "float",
        "lambda_td": "float", "patch_ratio_lo": "float", "patch_ratio_hi": "float",
        "pretext": "strlist", "color_distortion": "bool", "id_crop_lo": "float",
        "id_crop_hi": "float", "id_flip": "bool", "exclude_background": "bool",
        "save_interval": "int",
    },
    "model": {
        "widths": "intlist", "kernel": "int", "n_feat": "int", "input_side": "int",
        "n_bins": "int", "d_slpd": "int", "td_channels": "int",
    },
    "paths": {
        "manifest": "str", "checkpoint": "str", "log": "str", "embeddings": "str",
    },
    "synth": {
        "num_palettes": "int", "items_per_outfit": "int", "outfits": "int",
        "image_side": "int", "noise_sigma": "float", "fitb_per_outfit": "int",
        "retrieval_views": "bool", "disjoint": "bool",
    },
}

_FIELD_FOR = {("synth", key): f"synth_{key}" for key in _SECTIONS["synth"]}


def _convert(kind: str, raw: str, where: str):
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "bool":
            lowered = raw.strip().lower()
            if lowered in ("true", "yes", "1", "on"):
                return True
            if lowered in ("false", "no", "0", "off"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if kind == "intlist":
            return tuple(int(v) for v in raw.replace(",", " ").split())
        if kind == "strlist":
            return tuple(v for v in raw.replace(",", " ").split())
        return raw.strip()
    except ValueError as exc:
        raise ConfigError(f"{where}: {exc}") from None


def parse_config(path: str | Path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    parser = configparser.ConfigParser(strict=True, interpolation=None)
    try:
        parser.read_string(path.read_text(encoding="utf-8"), source=str(path))
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None

    config = RunConfig()
    known_fields = {f.name for f in fields(RunConfig)}
    for section in parser.sections():
        if section not in _SECTIONS:
            raise ConfigError(f"{path}: unknown section [{section}]")
        for key, raw in parser.items(section):
            if key not in _SECTIONS[section]:
                raise ConfigError(f"{path}: unknown key {key!r} in section [{section}]")
            field_name = _FIELD_FOR.get((section, key), key)
            assert field_name in known_fields
            value = _convert(_SECTIONS[section][key], raw, f"{path} [{section}] {key}")
            setattr(config, field_name, value)
    config.validate()
    return config


def default_config_text() -> str:
    """A config file listing every key at its default value."""
    config = RunConfig()
    lines = []
    for section, keys in _SECTIONS.items():
        lines.append(f"[{section}]")
        for key in keys:
            field_name = _FIELD_FOR.get((section, key), key)
            value = getattr(config, field_name)
            if isinstance(value, tuple):
                value = ",".join(str(v) for v in value)
            lines.append(f"{key} = {value}")
        lines.append("")
    return "\n".join(lines)
