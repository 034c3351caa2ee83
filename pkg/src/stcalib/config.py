"""Sectioned ``key = value`` configuration covering every tunable default.

Sections map one-to-one onto the frozen dataclasses used by the library:
``[field]`` FieldConfig, ``[render]`` RenderConfig, ``[loss]`` LossWeights plus
patch settings, ``[train]`` TrainSchedule and ``[simulate]`` SimConfig.
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass
from pathlib import Path

from .errors import MissingFile, ParseError
from .field import FieldConfig
from .losses import LossWeights, PatchSpec
from .optimizer import TrainSchedule
from .renderer import RenderConfig


@dataclass(frozen=True)
class LossConfig:
    lambda_c: float = 1.0
    lambda_d: float = 20.0
    lambda_ssim: float = 0.1
    lambda_ds: float = 0.0001
    patch_size: int = 8
    patches_per_frame: float = 0.5
    depth_scale: float = 0.0  # 0: largest scene-box side

    def weights(self) -> LossWeights:
        return LossWeights(self.lambda_c, self.lambda_d, self.lambda_ssim, self.lambda_ds)

    def patch(self) -> PatchSpec:
        return PatchSpec(self.patch_size, self.patches_per_frame)


@dataclass(frozen=True)
class SimConfig:
    """Synthetic rig, scene and trajectory settings used by ``simulate``."""

    trajectory: str = "straight-arc"
    duration: float = 10.0
    speed: float = 2.0
    knot_rate: float = 10.0
    turn_deg: float = 180.0
    straight_fraction: float = 0.3
    speed_variation: float = 0.4
    speed_cycles: float = 2.0
    start: tuple = (-6.0, -4.0)
    start_heading_deg: float = 0.0
    height: float = 1.5
    width: int = 80
    height_px: int = 60
    fx: float = 60.0
    camera_rate: float = 10.0
    lidar_rate: float = 10.0
    lidar_rings: int = 16
    lidar_azimuth_steps: int = 180
    lidar_max_range: float = 40.0
    cam1_delta: float = 0.03
    lidar_delta: float = -0.02
    supersample: int = 3
    pixel_noise: float = 0.0
    range_noise: float = 0.0
    shading: str = "flat"
    background: tuple = (1.0, 1.0, 1.0)
    perturb_cm: float = 20.0
    perturb_deg: float = 5.0
    perturb_ms: float = 50.0


# Sized for one CPU core: a 50-epoch calibration of the default synthetic
# dataset takes about five minutes. The dataclasses themselves keep the
# full-scale values.
DESK_FIELD = dict(n_levels=8, base_resolution=16, max_resolution=256, log2_hash_size=14, hidden_width=32,
                  geo_features=7, color_hidden_width=32)
DESK_RENDER = dict(n_samples=32)
DESK_TRAIN = dict(lr_network=3e-2, lr_calib=1e-3, lr_final_factor=0.1, batch_rays=512, rays_per_frame=128)


@dataclass(frozen=True)
class Config:
    field: FieldConfig = dataclasses.field(default_factory=lambda: FieldConfig(**DESK_FIELD))
    render: RenderConfig = dataclasses.field(default_factory=lambda: RenderConfig(**DESK_RENDER))
    loss: LossConfig = dataclasses.field(default_factory=LossConfig)
    train: TrainSchedule = dataclasses.field(default_factory=lambda: TrainSchedule(**DESK_TRAIN))
    simulate: SimConfig = dataclasses.field(default_factory=SimConfig)

    def replace(self, **sections):
        return dataclasses.replace(self, **sections)


SECTIONS = ("field", "render", "loss", "train", "simulate")


def _format(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return " ".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    if value is None:
        return "none"
    return str(value)


def _parse(text, default, annotation):
    text = text.strip()
    if isinstance(default, bool):
        low = text.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"expected a boolean, got {text!r}")
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    if isinstance(default, tuple):
        return tuple(float(v) for v in text.replace(",", " ").split())
    if default is None:
        # Optional[float] fields
        return None if text.lower() == "none" else float(text)
    return text


def config_to_text(cfg: Config) -> str:
    lines = []
    for name in SECTIONS:
        lines.append(f"[{name}]")
        section = getattr(cfg, name)
        for f in dataclasses.fields(section):
            lines.append(f"{f.name} = {_format(getattr(section, f.name))}")
        lines.append("")
    return "\n".join(lines)


def save_config(path, cfg: Config):
    Path(path).write_text(config_to_text(cfg))


def parse_config(text, path="<config>") -> Config:
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ParseError(path, getattr(exc, "lineno", None), str(exc)) from None
    unknown = set(cp.sections()) - set(SECTIONS)
    if unknown:
        raise ParseError(path, None, f"unknown section(s): {', '.join(sorted(unknown))}")
    base = Config()
    out = {}
    for name in SECTIONS:
        section = getattr(base, name)
        if name not in cp:
            out[name] = section
            continue
        known = {f.name: f for f in dataclasses.fields(section)}
        updates = {}
        for key, raw in cp[name].items():
            if key not in known:
                raise ParseError(path, None, f"[{name}] unknown key {key!r}")
            try:
                updates[key] = _parse(raw, getattr(section, key), known[key].type)
            except ValueError as exc:
                raise ParseError(path, None, f"[{name}] {key}: {exc}") from None
        try:
            out[name] = dataclasses.replace(section, **updates)
        except (TypeError, ValueError) as exc:
            raise ParseError(path, None, f"[{name}] {exc}") from None
    return Config(**out)


def load_config(path) -> Config:
    path = Path(path)
    if not path.exists():
        raise MissingFile(f"config file {path} not found")
    return parse_config(path.read_text(), path)
