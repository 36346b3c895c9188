"""Run configuration: TOML file plus flag overrides, validated up front.

The file is TOML with five optional tables::

    [model]    layers, heads, d_model, rope_base, seed, mlp_ratio, precision_bytes
    [layout]   prompt_len, tiles, tokens_per_tile, frames, tokens_per_frame, prompt_position
    [prefill]  mode, block_size, align, policy, budget, budget_mode, budget_stats,
               layer_entropies, protect_recent, protect_prompt, proxy_source
    [task]     needle_segment, kappa, needle_scale, seed
    [output]   csv, json, wall_clock

Unknown keys are rejected.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Any, Mapping

import tomli

from .errors import InvalidConfiguration


@dataclass
class ModelSection:
    layers: int = 2
    heads: int = 2
    d_model: int = 64
    rope_base: float = 10000.0
    seed: int = 0
    mlp_ratio: float = 2.0
    precision_bytes: int = 2


@dataclass
class LayoutSection:
    prompt_len: int = 16
    tiles: int = 36
    tokens_per_tile: int = 64
    frames: int = 0
    tokens_per_frame: int = 64
    prompt_position: str = "first"


@dataclass
class PrefillSection:
    mode: str = "hybrid"
    block_size: int = 256
    align: str = "none"
    policy: str = "snapkv"
    budget: int = 1024
    budget_mode: str = "static"
    # "none", "first_block" (measure on the first block) or "explicit" (layer_entropies)
    budget_stats: str = "none"
    layer_entropies: list = field(default_factory=list)
    protect_recent: bool = True
    protect_prompt: bool = True
    proxy_source: str = "prompt_first"


@dataclass
class TaskSection:
    # structure id of the needle tile/frame; -1 picks the middle one
    needle_segment: int = -1
    kappa: float = 8.0
    needle_scale: float = 4.0
    seed: int = 0


@dataclass
class OutputSection:
    csv: str = ""
    json: str = ""
    wall_clock: bool = False


@dataclass
class RunConfig:
    model: ModelSection = field(default_factory=ModelSection)
    layout: LayoutSection = field(default_factory=LayoutSection)
    prefill: PrefillSection = field(default_factory=PrefillSection)
    task: TaskSection = field(default_factory=TaskSection)
    output: OutputSection = field(default_factory=OutputSection)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def echo(self) -> dict:
        """Config sections that determine a run's numbers (output paths excluded)."""
        d = self.to_dict()
        d.pop("output")
        return d

    def replace(self, **dotted: Any) -> "RunConfig":
        return apply_overrides(self, dotted)


_CHOICES = {
    "layout.prompt_position": ("first", "last"),
    "prefill.mode": ("bulk", "blockwise", "hybrid"),
    "prefill.align": ("none", "structure"),
    "prefill.policy": ("snapkv", "keydiff", "random", "query_aware", "query_agnostic"),
    "prefill.budget_mode": ("static", "dynamic"),
    "prefill.budget_stats": ("none", "first_block", "explicit"),
    "prefill.proxy_source": ("prompt_first", "block_local"),
}
_POSITIVE = {
    "model.layers", "model.heads", "model.d_model", "model.precision_bytes", "model.rope_base", "model.mlp_ratio",
    "layout.prompt_len", "prefill.block_size", "prefill.budget",
}
_NONNEG = {"layout.tiles", "layout.frames", "layout.tokens_per_tile", "layout.tokens_per_frame",
           "task.kappa", "task.needle_scale"}


def _coerce(path: str, value: Any, default: Any) -> Any:
    kind = type(default)
    if kind is bool:
        if isinstance(value, bool):
            return value
        if isinstance(value, str) and value.lower() in ("true", "false", "1", "0", "yes", "no"):
            return value.lower() in ("true", "1", "yes")
        raise InvalidConfiguration(f"{path}: expected a boolean, got {value!r}")
    if kind is int:
        if isinstance(value, bool):
            raise InvalidConfiguration(f"{path}: expected an integer, got {value!r}")
        try:
            if isinstance(value, float) and not value.is_integer():
                raise ValueError
            return int(value)
        except (TypeError, ValueError):
            raise InvalidConfiguration(f"{path}: expected an integer, got {value!r}") from None
    if kind is float:
        try:
            return float(value)
        except (TypeError, ValueError):
            raise InvalidConfiguration(f"{path}: expected a number, got {value!r}") from None
    if kind is list:
        if isinstance(value, str):
            value = [v for v in value.split(",") if v.strip()]
        try:
            return [float(v) for v in value]
        except (TypeError, ValueError):
            raise InvalidConfiguration(f"{path}: expected a list of numbers, got {value!r}") from None
    if not isinstance(value, str):
        raise InvalidConfiguration(f"{path}: expected a string, got {value!r}")
    return value


def _set(cfg: RunConfig, path: str, value: Any) -> None:
    parts = path.split(".")
    if len(parts) != 2:
        raise InvalidConfiguration(f"{path}: keys must be of the form section.key")
    section, key = parts
    if not hasattr(cfg, section):
        raise InvalidConfiguration(f"{path}: unknown section {section!r}")
    sec = getattr(cfg, section)
    names = {f.name for f in dataclasses.fields(sec)}
    if key not in names:
        raise InvalidConfiguration(f"{path}: unknown key")
    setattr(sec, key, _coerce(path, value, getattr(sec, key)))


def apply_overrides(cfg: RunConfig, overrides: Mapping[str, Any]) -> RunConfig:
    out = dataclasses.replace(
        cfg, **{f.name: dataclasses.replace(getattr(cfg, f.name)) for f in dataclasses.fields(cfg)}
    )
    for path, value in overrides.items():
        _set(out, path, value)
    validate(out)
    return out


def validate(cfg: RunConfig) -> None:
    for path, allowed in _CHOICES.items():
        sec, key = path.split(".")
        v = getattr(getattr(cfg, sec), key)
        if v not in allowed:
            raise InvalidConfiguration(f"{path}: must be one of {allowed}, got {v!r}")
    for path in _POSITIVE | _NONNEG:
        sec, key = path.split(".")
        v = getattr(getattr(cfg, sec), key)
        if v < 0 or (path in _POSITIVE and v == 0):
            raise InvalidConfiguration(f"{path}: must be {'positive' if path in _POSITIVE else 'nonnegative'}")
    m, lay, pf = cfg.model, cfg.layout, cfg.prefill
    if m.d_model % m.heads or (m.d_model // m.heads) % 2:
        raise InvalidConfiguration("model.d_model: must split into an even head dimension across model.heads")
    if lay.tiles and lay.frames:
        raise InvalidConfiguration("layout.frames: tiles and frames cannot both be nonzero")
    if (lay.tiles and not lay.tokens_per_tile) or (lay.frames and not lay.tokens_per_frame):
        raise InvalidConfiguration("layout.tokens_per_tile: zero-length vision segments")
    if pf.budget_mode == "dynamic":
        if pf.budget_stats == "none":
            raise InvalidConfiguration(
                "prefill.budget_stats: budget_mode=dynamic needs a statistics source ('first_block' or 'explicit')"
            )
        if pf.budget_stats == "explicit" and len(pf.layer_entropies) != m.layers:
            raise InvalidConfiguration(
                f"prefill.layer_entropies: need {m.layers} values for budget_stats=explicit"
            )
    if pf.policy in ("snapkv", "query_aware") and pf.proxy_source == "prompt_first" and lay.prompt_position == "last":
        raise InvalidConfiguration(
            "prefill.proxy_source: prompt_first requires layout.prompt_position=first (use block_local)"
        )
    if pf.align == "structure":
        longest = max(lay.prompt_len, lay.tokens_per_tile if lay.tiles else 0, lay.tokens_per_frame if lay.frames else 0)
        if pf.block_size < longest:
            raise InvalidConfiguration(
                f"prefill.block_size: align=structure needs block_size >= longest segment ({longest})"
            )


def _flatten(data: Mapping[str, Any]) -> dict[str, Any]:
    flat = {}
    for section, body in data.items():
        if not isinstance(body, Mapping):
            raise InvalidConfiguration(f"{section}: expected a table")
        for key, value in body.items():
            flat[f"{section}.{key}"] = value
    return flat


def parse_config(text: str | bytes | None = None, overrides: Mapping[str, Any] | None = None) -> RunConfig:
    """Parse TOML ``text`` (may be empty) and apply dotted-key ``overrides`` on top."""
    if isinstance(text, bytes):
        text = text.decode("utf-8")
    try:
        data = tomli.loads(text or "")
    except tomli.TOMLDecodeError as exc:
        raise InvalidConfiguration(f"config parse error: {exc}") from None
    flat = _flatten(data)
    flat.update(overrides or {})
    return apply_overrides(RunConfig(), flat)
