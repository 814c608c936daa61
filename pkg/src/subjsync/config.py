"""Run configuration: strict JSON loading and validation."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from subjsync.errors import ConfigError
from subjsync.masking import THRESHOLD_METHODS


@dataclass(frozen=True)
class RunConfig:
    n_images: int = 5
    grid_h: int = 16
    grid_w: int = 16
    d_model: int = 64
    d_k: int = 64
    heads: int = 4
    blocks: int = 4
    timesteps: int = 20
    seed: int = 0
    gamma: float = 0.3
    lam: float = 0.7
    tau: float = 0.1
    bli_window: float = 0.4
    p_attn: float = 0.1
    p_rfh: float = 0.1
    p_mask: float = 0.1
    threshold: str = "otsu"
    subset: tuple[int, ...] = ()
    use_masks: bool = True
    use_sharing: bool = True
    use_rfh: bool = True
    use_bli: bool = True
    use_dropout: bool = True
    n_subjects: int = 1
    beta: float = 2.0
    prompt_tokens: int = 8
    residual_scale: float = 0.15
    attn_gain: float = 8.0
    pos_scale: float = 1.0
    cross_attn_layers: tuple[int, ...] | None = None
    rfh_layers: tuple[int, ...] | None = None
    bli_layers: tuple[int, ...] | None = None

    def __post_init__(self):
        for name in ("subset", "cross_attn_layers", "rfh_layers", "bli_layers"):
            val = getattr(self, name)
            if val is not None:
                object.__setattr__(self, name, tuple(int(v) for v in val))
        self.validate()

    @property
    def n_patches(self) -> int:
        return self.grid_h * self.grid_w

    def layer_set(self, name: str) -> tuple[int, ...]:
        val = getattr(self, name)
        return tuple(range(self.blocks)) if val is None else tuple(sorted(set(val)))

    def validate(self) -> None:
        def need(cond, msg):
            if not cond:
                raise ConfigError(msg)

        ints = ("n_images", "grid_h", "grid_w", "d_model", "d_k", "heads", "blocks",
                "timesteps", "n_subjects", "prompt_tokens")
        for name in ints:
            val = getattr(self, name)
            need(isinstance(val, int) and not isinstance(val, bool) and val >= 1,
                 f"{name} must be a positive integer, got {val!r}")
        need(isinstance(self.seed, int) and not isinstance(self.seed, bool) and self.seed >= 0,
             f"seed must be a non-negative integer, got {self.seed!r}")
        need(self.d_k % self.heads == 0, f"d_k={self.d_k} not divisible by heads={self.heads}")
        for name in ("gamma", "lam", "bli_window"):
            val = getattr(self, name)
            need(_is_real(val) and 0.0 <= val <= 1.0, f"{name} must be in [0, 1], got {val!r}")
        for name in ("p_attn", "p_rfh", "p_mask"):
            val = getattr(self, name)
            need(_is_real(val) and 0.0 <= val < 1.0, f"{name} must be in [0, 1), got {val!r}")
        need(_is_real(self.tau) and self.tau > 0, f"tau must be positive, got {self.tau!r}")
        need(_is_real(self.beta) and self.beta >= 0, f"beta must be non-negative, got {self.beta!r}")
        need(_is_real(self.residual_scale) and self.residual_scale > 0,
             f"residual_scale must be positive, got {self.residual_scale!r}")
        need(_is_real(self.attn_gain) and self.attn_gain > 0,
             f"attn_gain must be positive, got {self.attn_gain!r}")
        need(_is_real(self.pos_scale) and self.pos_scale >= 0,
             f"pos_scale must be non-negative, got {self.pos_scale!r}")
        need(self.threshold in THRESHOLD_METHODS,
             f"threshold must be one of {THRESHOLD_METHODS}, got {self.threshold!r}")
        for name in ("use_masks", "use_sharing", "use_rfh", "use_bli", "use_dropout"):
            need(isinstance(getattr(self, name), bool), f"{name} must be a boolean")
        need(all(0 <= s < self.n_images for s in self.subset),
             f"subset {list(self.subset)} not within 0..{self.n_images - 1}")
        need(len(set(self.subset)) == len(self.subset), "subset has duplicate image ids")
        for name in ("cross_attn_layers", "rfh_layers", "bli_layers"):
            val = getattr(self, name)
            if val is not None:
                need(all(0 <= l < self.blocks for l in val),
                     f"{name} entries must be within 0..{self.blocks - 1}")
        need(len(self.layer_set("cross_attn_layers")) >= 1, "cross_attn_layers must not be empty")
        need(self.n_subjects <= self.prompt_tokens, "n_subjects exceeds prompt_tokens")
        need(self.n_subjects <= self.grid_w, "too many subjects for the grid width")

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        out = {}
        for f in dataclasses.fields(self):
            val = getattr(self, f.name)
            out[f.name] = list(val) if isinstance(val, tuple) else val
        return out

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"


def _is_real(x) -> bool:
    return isinstance(x, (int, float)) and not isinstance(x, bool)


FIELD_NAMES = tuple(f.name for f in dataclasses.fields(RunConfig))


def config_from_dict(data: dict) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    unknown = sorted(set(data) - set(FIELD_NAMES))
    if unknown:
        raise ConfigError(f"unknown field {unknown[0]}")
    for name in FIELD_NAMES:
        if name not in data:
            raise ConfigError(f"missing field {name}")
    try:
        return RunConfig(**data)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def loads_config(text: str) -> RunConfig:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    return config_from_dict(data)


def load_config(path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return loads_config(text)


def default_config_text() -> str:
    return resources.files("subjsync").joinpath("default_config.json").read_text()


def default_config() -> RunConfig:
    return loads_config(default_config_text())
