"""Flat ``key = value`` run configuration.

Every key maps to one field of :class:`GenConfig`, :class:`TrainConfig`
or the evaluation/path options below.  ``seed`` is shared: it seeds data
generation and training alike.  Unknown keys are rejected.
"""
from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .syndata import GenConfig
from .trainer import TrainConfig


class ConfigError(ValueError):
    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


@dataclass(frozen=True)
class EvalOptions:
    p_target: float = 0.01
    c_fa: float = 1.0
    c_miss: float = 1.0
    mi_samples: int = 50000
    mi_fit_steps: int = 3000
    mi_fit_lr: float = 1e-3
    probe_steps: int = 300
    probe_lr: float = 3e-3


@dataclass(frozen=True)
class RunConfig:
    gen: GenConfig = field(default_factory=GenConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalOptions = field(default_factory=EvalOptions)
    data_dir: str = ""
    out_dir: str = ""
    seed: int = 0

    def with_seed(self, seed: int) -> "RunConfig":
        return replace(self, seed=seed, gen=replace(self.gen, seed=seed),
                       train=replace(self.train, seed=seed))


_SECTIONS = ("gen", "train", "eval")


def _key_table() -> dict[str, tuple[str | None, dataclasses.Field]]:
    table: dict[str, tuple[str | None, dataclasses.Field]] = {}
    for f in fields(RunConfig):
        if f.name in _SECTIONS:
            for sub in fields(f.type if not isinstance(f.type, str) else _section_type(f.name)):
                if sub.name == "seed":
                    continue
                table[sub.name] = (f.name, sub)
        else:
            table[f.name] = (None, f)
    return table


def _section_type(name: str):
    return {"gen": GenConfig, "train": TrainConfig, "eval": EvalOptions}[name]


def _default(section: str | None, f: dataclasses.Field):
    if section is None:
        return getattr(RunConfig(), f.name)
    return getattr(_section_type(section)(), f.name)


def _parse_value(key: str, text: str, default):
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low not in ("true", "false"):
                raise ValueError("expected true or false")
            return low == "true"
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            elem = type(default[0]) if default else float
            return tuple(elem(x) for x in text.replace(",", " ").split())
        return text
    except ValueError as err:
        raise ConfigError(key, f"cannot parse {text!r}: {err}") from None


def _emit_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return " ".join(_emit_value(v) for v in value)
    return str(value)


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    table = _key_table()
    values: dict[str, object] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}", "expected 'key = value'")
        key, _, val = (part.strip() for part in line.partition("="))
        if key not in table:
            raise ConfigError(key, "unknown key")
        section, f = table[key]
        values[key] = _parse_value(key, val, _default(section, f))
    cfg = base or RunConfig()
    per_section: dict[str, dict] = {s: {} for s in _SECTIONS}
    top: dict[str, object] = {}
    for key, val in values.items():
        section, _ = table[key]
        (per_section[section] if section else top)[key] = val
    cfg = replace(cfg, **top, **{s: replace(getattr(cfg, s), **kv) for s, kv in per_section.items()})
    cfg = cfg.with_seed(cfg.seed)
    validate(cfg)
    return cfg


def validate(cfg: RunConfig) -> None:
    for section, check in (("gen", cfg.gen.validate), ("train", cfg.train.validate)):
        try:
            check()
        except ValueError as err:
            raise ConfigError(section, str(err)) from None
    if not 0 < cfg.eval.p_target < 1:
        raise ConfigError("p_target", "must lie in (0, 1)")


def emit_config(cfg: RunConfig) -> str:
    lines = [f"# seed = {cfg.seed}"]
    for key, (section, f) in _key_table().items():
        owner = cfg if section is None else getattr(cfg, section)
        lines.append(f"{key} = {_emit_value(getattr(owner, f.name))}")
    return "\n".join(lines) + "\n"


def load_config(path: str | os.PathLike | None) -> RunConfig:
    if path is None:
        return RunConfig()
    return parse_config(Path(path).read_text(encoding="utf-8"))
