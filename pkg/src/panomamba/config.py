"""Run configuration: a dataclass mirrored by a `key = value` config file.

Unknown keys are rejected; command-line flags override file values. Lists use
bracket syntax, e.g. gma_active_scales=[2,3,4].
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

from .tensor import ContractError


@dataclass
class RunConfig:
    # diffusion
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    sample_steps: int = 25
    cfg_scale: float = 2.5
    # panorama geometry
    pano_w: int = 128
    pano_h: int = 64
    view_size: int = 64
    view_fov: float = 90.0
    n_yaw: int = 6
    # model dimensions
    d_model: int = 64
    d_state: int = 8
    d_key: int = 32
    d_time: int = 128
    unet_widths: tuple = (32, 64, 96, 128)
    vcr_blocks: int = 8
    text_blocks: int = 2
    image_blocks: int = 2
    gma_active_scales: tuple = (2, 3, 4)
    # training
    lr: float = 1e-4
    weight_decay: float = 0.01
    warmup_steps: int = 200
    text_drop_prob: float = 0.5
    dataset_size: int = 64
    seed: int = 0
    scan_parallel: bool = True

    def __post_init__(self):
        if self.pano_w != 2 * self.pano_h:
            raise ContractError(f"pano_w must equal 2*pano_h, got {self.pano_w}x{self.pano_h}")
        if self.view_size % 64:
            raise ContractError(f"view_size must divide by 64, got {self.view_size}")
        if not 1 <= self.sample_steps <= self.T:
            raise ContractError(f"sample_steps must lie in [1, T], got {self.sample_steps}")


_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}


def _parse_value(name, raw):
    field = _FIELDS[name]
    raw = raw.strip()
    if field.type in ("tuple", tuple):
        if not (raw.startswith("[") and raw.endswith("]")):
            raise ContractError(f"{name} expects a [..] list, got {raw!r}")
        inner = raw[1:-1].strip()
        return tuple(int(v.strip()) for v in inner.split(",")) if inner else ()
    if field.type in ("bool", bool):
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ContractError(f"{name} expects a boolean, got {raw!r}")
    if field.type in ("int", int):
        return int(raw)
    if field.type in ("float", float):
        return float(raw)
    return raw


def parse_config_text(text):
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ContractError(f"config line {lineno}: expected key = value, got {line!r}")
        key, raw = line.split("=", 1)
        key = key.strip()
        if key not in _FIELDS:
            raise ContractError(f"config line {lineno}: unknown key {key!r}")
        values[key] = _parse_value(key, raw)
    return RunConfig(**values)


def load_config(path):
    with open(path, encoding="utf-8") as f:
        return parse_config_text(f.read())


def config_to_text(cfg):
    lines = []
    for f in dataclasses.fields(RunConfig):
        v = getattr(cfg, f.name)
        if isinstance(v, tuple):
            v = "[" + ",".join(str(x) for x in v) + "]"
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"


def apply_overrides(cfg, overrides):
    """Flags win over file values; unknown names are contract errors."""
    vals = dataclasses.asdict(cfg)
    for k, v in overrides.items():
        if k not in _FIELDS:
            raise ContractError(f"unknown config key {k!r}")
        if v is not None:
            vals[k] = v
    vals = {k: tuple(v) if isinstance(v, list) else v for k, v in vals.items()}
    return RunConfig(**vals)
