"""Model configuration and ``key=value`` override handling."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

from .nn import ConfigError


@dataclass
class EncoderConfig:
    input_size: int = 64
    patch_size: int = 8
    vit_dim: int = 96
    vit_layers: int = 4
    vit_heads: int = 4
    vit_mlp_ratio: int = 2
    neck_out_dim: int = 64
    frozen: bool = False

    def __post_init__(self):
        if self.input_size % self.patch_size:
            raise ConfigError(f"input_size {self.input_size} is not a multiple of patch_size {self.patch_size}")
        if self.neck_out_dim >= self.vit_dim:
            raise ConfigError("neck_out_dim must be smaller than vit_dim")

    @property
    def grid(self) -> int:
        return self.input_size // self.patch_size


@dataclass
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    num_heads: int = 2
    prompt_depth: int = 2
    decoder_depth: int = 2
    mlp_dim: int = 128
    mask_size: int = 256
    pool_size: int = 64
    pe_sigma: float = 1.0
    max_points: int = 10
    token_pool: bool = True
    class_example_mixer: bool = True
    spatial_convs: bool = True
    per_example_prototypes: bool = False
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.encoder, dict):
            self.encoder = EncoderConfig(**self.encoder)
        d = self.embed_dim
        if d % 8:
            raise ConfigError(f"embedding width {d} must be divisible by 8")
        if d % self.num_heads:
            raise ConfigError(f"embedding width {d} is not divisible by num_heads {self.num_heads}")
        ratio = self.mask_size // self.encoder.grid
        if ratio * self.encoder.grid != self.mask_size or ratio & (ratio - 1):
            raise ConfigError("mask_size / feature grid must be a power of two")
        up = self.encoder.patch_size // 4
        if up < 1 or up * 4 != self.encoder.patch_size or up & (up - 1):
            raise ConfigError("patch_size must be 4 times a power of two")

    @property
    def embed_dim(self) -> int:
        return self.encoder.neck_out_dim


def to_dict(cfg) -> dict:
    return dataclasses.asdict(cfg)


def config_hash(obj) -> str:
    payload = json.dumps(obj if isinstance(obj, dict) else to_dict(obj), sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


def parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(data: dict, overrides: list[str], known: dict | None = None) -> dict:
    """Apply ``a.b=value`` strings to a nested dict, rejecting unknown keys.

    ``known`` is a template of valid keys (defaults to ``data`` itself).
    """
    known = data if known is None else known
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override '{item}' is not of the form key=value")
        key, raw = item.split("=", 1)
        parts = key.split(".")
        node, tmpl = data, known
        for p in parts[:-1]:
            if not isinstance(tmpl, dict) or p not in tmpl:
                raise ConfigError(f"unknown config key '{key}'")
            node = node.setdefault(p, {})
            tmpl = tmpl[p]
        if not isinstance(tmpl, dict) or parts[-1] not in tmpl:
            raise ConfigError(f"unknown config key '{key}'")
        node[parts[-1]] = parse_value(raw)
    return data


def check_keys(data: dict, template: dict, prefix: str = "") -> None:
    for key, value in data.items():
        if key not in template:
            raise ConfigError(f"unknown config key '{prefix}{key}'")
        if isinstance(value, dict) and isinstance(template[key], dict):
            check_keys(value, template[key], f"{prefix}{key}.")
