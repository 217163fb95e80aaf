"""Pipeline configuration: dataclass tree mirrored by a TOML file.

Every published hyperparameter is a default, so an empty config file
reproduces the reference setup. Validation reports the dotted field path of
any out-of-range value.
"""

from __future__ import annotations

import math
import sys
from dataclasses import asdict, dataclass, field, fields, is_dataclass

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


class ConfigError(ValueError):
    pass


@dataclass
class OracleConfig:
    kind: str = "remote"  # remote | constant | image
    endpoint: str = "http://127.0.0.1:8151"
    color: list = field(default_factory=lambda: [0.7, 0.3, 0.3])  # for kind=constant
    target: str = ""  # PNG path for kind=image


@dataclass
class CameraSection:
    elevation_min_deg: float = -10.0
    elevation_max_deg: float = 45.0
    radius: float = 2.5
    fov_y_deg: float = 49.1


@dataclass
class Stage1Config:
    steps: int = 700
    batch: int = 1  # batches of 4 orthogonal views per step
    resolution: int = 256
    init_points: int = 6000
    init_radius: float = 0.5
    densify_interval: int = 55
    grad_threshold: float = 0.01
    opacity_reset_step: int = 500
    max_splats: int = 100_000
    oracle: OracleConfig = field(default_factory=OracleConfig)


@dataclass
class Stage2Config:
    steps: int = 700
    batch: int = 2
    resolution: int = 512
    densify_interval: int = 50
    grad_threshold: float = 0.01
    opacity_reset_interval: int = 300
    max_splats: int = 100_000
    oracle: OracleConfig = field(default_factory=OracleConfig)


@dataclass
class MeshConfig:
    grid_resolution: int = 128
    threshold: float = 1.0


@dataclass
class Stage3Config:
    iterations: int = 2000
    batch: int = 4
    texture_size: int = 1024
    render_resolution: int = 512
    weight_strategy: str = "constant"
    texel_lr: float = 0.01
    camera_pool: int = 0
    oracle: OracleConfig = field(default_factory=OracleConfig)


@dataclass
class EvalConfig:
    reference_dir: str = ""
    views: int = 10
    resolution: int = 256


@dataclass
class PipelineConfig:
    prompt: str = ""
    negative_prompt: str = ""
    seed: int = 0
    cfg_scale: float = 100.0
    camera: CameraSection = field(default_factory=CameraSection)
    stage1: Stage1Config = field(default_factory=Stage1Config)
    stage2: Stage2Config = field(default_factory=Stage2Config)
    mesh: MeshConfig = field(default_factory=MeshConfig)
    stage3: Stage3Config = field(default_factory=Stage3Config)
    eval: EvalConfig = field(default_factory=EvalConfig)


_RANGE_RULES = {
    "cfg_scale": (0.0, math.inf),
    "camera.radius": (1e-6, math.inf),
    "camera.fov_y_deg": (1e-3, 179.0),
    "stage1.steps": (1, math.inf),
    "stage1.batch": (1, math.inf),
    "stage1.resolution": (8, 4096),
    "stage1.init_points": (1, math.inf),
    "stage1.init_radius": (1e-9, math.inf),
    "stage1.densify_interval": (1, math.inf),
    "stage1.grad_threshold": (1e-12, math.inf),
    "stage2.steps": (7, math.inf),
    "stage2.batch": (1, math.inf),
    "stage2.resolution": (8, 4096),
    "stage2.densify_interval": (1, math.inf),
    "stage2.grad_threshold": (1e-12, math.inf),
    "stage2.opacity_reset_interval": (1, math.inf),
    "mesh.grid_resolution": (2, 1024),
    "mesh.threshold": (1e-12, math.inf),
    "stage3.iterations": (1, math.inf),
    "stage3.batch": (1, math.inf),
    "stage3.texture_size": (4, 8192),
    "stage3.render_resolution": (8, 4096),
    "stage3.texel_lr": (1e-12, 10.0),
    "eval.views": (1, math.inf),
    "eval.resolution": (8, 4096),
}


def _merge(obj, data: dict, path: str = ""):
    names = {f.name: f for f in fields(obj)}
    for key, value in data.items():
        dotted = f"{path}{key}"
        if key not in names:
            raise ConfigError(f"{dotted}: unknown configuration key")
        current = getattr(obj, key)
        if is_dataclass(current):
            if not isinstance(value, dict):
                raise ConfigError(f"{dotted}: expected a table")
            _merge(current, value, dotted + ".")
        else:
            if isinstance(current, int) and not isinstance(current, bool):
                if isinstance(value, bool) or not isinstance(value, int):
                    raise ConfigError(f"{dotted}: expected an integer, got {value!r}")
            elif isinstance(current, float):
                if not isinstance(value, (int, float)) or isinstance(value, bool):
                    raise ConfigError(f"{dotted}: expected a number, got {value!r}")
                value = float(value)
            elif isinstance(current, str) and not isinstance(value, str):
                raise ConfigError(f"{dotted}: expected a string, got {value!r}")
            setattr(obj, key, value)


def _flatten(d: dict, prefix: str = ""):
    for k, v in d.items():
        if isinstance(v, dict):
            yield from _flatten(v, f"{prefix}{k}.")
        else:
            yield f"{prefix}{k}", v


def validate(config: PipelineConfig):
    flat = dict(_flatten(asdict(config)))
    for dotted, (lo, hi) in _RANGE_RULES.items():
        value = flat[dotted]
        if not lo <= value <= hi:
            raise ConfigError(f"{dotted}: value {value} outside allowed range [{lo}, {hi}]")
    for stage in ("stage1", "stage2", "stage3"):
        kind = flat[f"{stage}.oracle.kind"]
        if kind not in ("remote", "constant", "image"):
            raise ConfigError(f"{stage}.oracle.kind: unknown oracle kind {kind!r}")
        if kind == "image" and not flat[f"{stage}.oracle.target"]:
            raise ConfigError(f"{stage}.oracle.target: required when kind is 'image'")
    if flat["stage3.weight_strategy"] not in ("constant", "sigma_squared"):
        raise ConfigError(
            f"stage3.weight_strategy: unknown strategy {flat['stage3.weight_strategy']!r}"
        )
    return config


def load_config(path=None, overrides: dict = None) -> PipelineConfig:
    config = PipelineConfig()
    if path is not None:
        with open(path, "rb") as f:
            try:
                data = tomllib.load(f)
            except tomllib.TOMLDecodeError as exc:
                raise ConfigError(f"{path}: {exc}") from exc
        _merge(config, data)
    if overrides:
        _merge(config, overrides)
    return validate(config)
