"""Run configuration: nested dataclasses loaded from YAML with env overrides.

Unknown keys are rejected at every level. Environment variables named
``LIPSPLAT_<KEY>`` override config keys; ``__`` separates nesting levels,
e.g. ``LIPSPLAT_STAGES__3__LAMBDA_READ=1e-6``. Values are parsed as YAML
scalars.
"""
from __future__ import annotations

import dataclasses
import os
import types
import typing
from dataclasses import dataclass, field, fields
from pathlib import Path

import yaml

from .avatar import AvatarSpec
from .decoder import DecoderConfig
from .encoder import EncoderConfig
from .face_model import ModelSpec
from .lipreader import LipReaderConfig
from .trainer import PRESETS, StageConfig

ENV_PREFIX = "LIPSPLAT_"


class ConfigError(ValueError):
    """Invalid configuration (exit code 2 in the CLI)."""


@dataclass
class SourceConfig:
    """One training source: synthetic (``path`` unset) or a dataset dir from ``synthesize``."""
    style: str = "voca"
    seed: int = 1
    n_subjects: int = 4
    n_sentences: int = 12
    duration: float = 1.5
    path: str | None = None
    split: str = "desk"  # split policy name (used for synthetic data)


@dataclass
class DataConfig:
    pretrain: SourceConfig = field(default_factory=lambda: SourceConfig("voca", 1, split="all-train"))
    finetune: SourceConfig = field(default_factory=lambda: SourceConfig("mead", 2))


@dataclass
class TTSConfig:
    kind: str = "stub"  # stub | subprocess | http
    options: dict = field(default_factory=dict)


@dataclass
class RunConfig:
    seed: int = 0
    out: str = "runs/desk"
    preset: str = "desk"  # desk | full
    deterministic: bool = True
    model: ModelSpec = field(default_factory=ModelSpec)
    avatar: AvatarSpec = field(default_factory=AvatarSpec)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    lipreader: LipReaderConfig = field(default_factory=LipReaderConfig)
    data: DataConfig = field(default_factory=DataConfig)
    stages: dict = field(default_factory=dict)  # {stage: {StageConfig field: value}} overrides
    tts: TTSConfig = field(default_factory=TTSConfig)
    lpips: bool = False

    def stage(self, k: int) -> StageConfig:
        if self.preset not in PRESETS:
            raise ConfigError(f"unknown preset {self.preset!r}; choose from {sorted(PRESETS)}")
        over = dict(self.stages.get(k, {}))
        try:
            cfg = _build(StageConfig, over, f"stages.{k}", PRESETS[self.preset][k])
            cfg.validate()
        except ValueError as e:
            raise ConfigError(str(e)) from e
        return cfg


def _plain(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _plain(getattr(obj, f.name)) for f in fields(obj)}
    if isinstance(obj, tuple):
        return [_plain(v) for v in obj]
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    return obj


def _coerce(tp, value, where, default=None):
    origin = typing.get_origin(tp)
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            raise ConfigError(f"{where}: expected a mapping")
        return _build(tp, value, where, default)
    if origin in (typing.Union, types.UnionType):
        if value is None:
            return None
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        return _coerce(args[0], value, where)
    if tp is tuple or origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where}: expected a list")
        return tuple(value)
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, str):
            # YAML 1.1 reads exponents without a dot (1e-5) as strings
            try:
                return float(value)
            except ValueError:
                pass
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return value
    if tp is dict or origin is dict:
        if not isinstance(value, dict):
            raise ConfigError(f"{where}: expected a mapping")
        return dict(value)
    return value


def _build(cls, data: dict, where: str = "", default=None):
    """``cls`` from a mapping; missing keys keep the values of ``default``
    (or the class defaults), nested sections merge the same way."""
    hints = typing.get_type_hints(cls)
    names = {f.name for f in fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"unknown key(s) {sorted(unknown)} in {where or 'config'}; "
                          f"allowed: {sorted(names)}")
    base = default if default is not None else cls()
    kw = {k: _coerce(hints[k], v, f"{where}.{k}" if where else k, getattr(base, k)) for k, v in data.items()}
    try:
        return dataclasses.replace(base, **kw)
    except TypeError as e:
        raise ConfigError(f"{where or 'config'}: {e}") from e


def _stage_overrides(raw) -> dict:
    if not isinstance(raw, dict):
        raise ConfigError("stages: expected a mapping of stage number to overrides")
    out = {}
    names = {f.name for f in fields(StageConfig)}
    for k, v in raw.items():
        try:
            stage = int(k)
        except (TypeError, ValueError):
            raise ConfigError(f"stages: key {k!r} is not a stage number") from None
        if stage not in (1, 2, 3):
            raise ConfigError(f"stages: stage must be 1, 2 or 3, got {stage}")
        if not isinstance(v, dict):
            raise ConfigError(f"stages.{stage}: expected a mapping")
        unknown = set(v) - names
        if unknown:
            raise ConfigError(f"unknown key(s) {sorted(unknown)} in stages.{stage}")
        out[stage] = dict(v)
    return out


def from_dict(data: dict | None) -> RunConfig:
    data = dict(data or {})
    stages = _stage_overrides(data.pop("stages", {}) or {})
    cfg = _build(RunConfig, data)
    cfg.stages = stages
    for k in (1, 2, 3):
        cfg.stage(k)  # validate overrides early
    return cfg


def to_dict(cfg: RunConfig) -> dict:
    d = _plain(cfg)
    d["stages"] = {int(k): dict(v) for k, v in cfg.stages.items()}
    return d


def _set_path(d: dict, keys: list, value):
    for k in keys[:-1]:
        if k not in d or d[k] is None:
            d[k] = {}
        if not isinstance(d[k], dict):
            raise ConfigError(f"cannot override below scalar key {k!r}")
        d = d[k]
    d[keys[-1]] = value


def apply_env(data: dict, environ=None) -> dict:
    """Fold ``LIPSPLAT_*`` variables into a raw config mapping."""
    environ = os.environ if environ is None else environ
    data = dict(data)
    for name in sorted(environ):
        if not name.startswith(ENV_PREFIX):
            continue
        keys = [k.lower() for k in name[len(ENV_PREFIX):].split("__")]
        if not all(keys):
            raise ConfigError(f"malformed override variable {name}")
        if keys[0] == "stages" and len(keys) > 1:
            keys[1] = int(keys[1]) if keys[1].isdigit() else keys[1]
        try:
            value = yaml.safe_load(environ[name])
        except yaml.YAMLError as e:
            raise ConfigError(f"{name}: cannot parse value: {e}") from e
        _set_path(data, keys, value)
    return data


def load_config(path=None, environ=None, **overrides) -> RunConfig:
    """YAML file (optional) -> env overrides -> keyword overrides -> RunConfig."""
    data = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file {p} does not exist")
        try:
            data = yaml.safe_load(p.read_text()) or {}
        except yaml.YAMLError as e:
            raise ConfigError(f"{p}: invalid YAML: {e}") from e
        if not isinstance(data, dict):
            raise ConfigError(f"{p}: top level must be a mapping")
    data = apply_env(data, environ)
    data.update({k: v for k, v in overrides.items() if v is not None})
    return from_dict(data)


def save_config(cfg: RunConfig, path):
    Path(path).write_text(yaml.safe_dump(to_dict(cfg), sort_keys=True))
