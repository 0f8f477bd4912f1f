"""Pipeline configuration: one JSON file, env-var overrides, validation.

Overrides use STARE_<SECTION>_<KEY> (e.g. STARE_BUCKETING_TAU=0.4);
values are parsed as JSON when possible, else taken as strings.
Relative paths resolve against the config file's directory.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

from .mli import DEFAULT_LAMBDAS, PROPERTIES


class ConfigError(ValueError):
    pass


_SECTIONS = ("corpus", "bucketing", "mining", "encoder", "training", "mli",
             "retrieval", "prompt")


@dataclass
class PipelineConfig:
    base_dir: Path
    corpus: dict = field(default_factory=dict)
    bucketing: dict = field(default_factory=dict)
    mining: dict = field(default_factory=dict)
    encoder: dict = field(default_factory=dict)
    training: dict = field(default_factory=dict)
    mli: dict = field(default_factory=dict)
    retrieval: dict = field(default_factory=dict)
    prompt: dict = field(default_factory=dict)

    def path(self, value: str) -> Path:
        p = Path(value)
        return p if p.is_absolute() else self.base_dir / p

    def to_dict(self) -> dict:
        return {name: getattr(self, name) for name in _SECTIONS}


_DEFAULTS: dict[str, dict] = {
    "corpus": {"train": None, "dev": None, "dialect": "bracketed"},
    "bucketing": {"num_hashes": 128, "tau": 0.5, "seed": 7},
    "mining": {"n_hard": 3, "n_rand": 2, "seed": 13, "anonymize": False},
    "encoder": {"d": 64, "layers": 4, "heads": 4, "max_len": 64, "seed": 1},
    "training": {"epochs": 3, "lr": 1e-3, "weight_decay": 0.01, "batch": 1,
                 "temperature": 0.07, "seed": 2},
    "mli": {"layers": None, "properties": list(PROPERTIES),
            "lambdas": list(DEFAULT_LAMBDAS), "label_corpora": {},
            "probe": {"epochs": 300, "lr": 0.5, "l2": 1e-4}, "k": 5},
    "retrieval": {"k": 5},
    "prompt": {"task_name": "Task", "k": 1, "template": "conversational",
               "schema_text": None},
}


def _parse_env_value(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def apply_env_overrides(sections: dict, env: dict[str, str]) -> dict:
    for name, raw in env.items():
        if not name.startswith("STARE_"):
            continue
        parts = name[len("STARE_"):].split("_", 1)
        if len(parts) != 2:
            continue
        section, key = parts[0].lower(), parts[1].lower()
        if section not in _SECTIONS:
            continue
        sections.setdefault(section, {})[key] = _parse_env_value(raw)
    return sections


def _require(cond: bool, field_name: str, message: str) -> None:
    if not cond:
        raise ConfigError(f"{field_name}: {message}")


def _num(sections: dict, section: str, key: str):
    value = sections[section][key]
    _require(isinstance(value, (int, float)) and not isinstance(value, bool),
             f"{section}.{key}", f"expected a number, got {value!r}")
    return value


def validate(config: PipelineConfig) -> PipelineConfig:
    sections = config.to_dict()

    for key in ("train", "dev"):
        value = sections["corpus"].get(key)
        _require(isinstance(value, str) and bool(value), f"corpus.{key}",
                 "a corpus path is required")
        _require(config.path(value).exists(), f"corpus.{key}",
                 f"file not found: {config.path(value)}")
    _require(sections["corpus"]["dialect"] in ("bracketed", "sexpr", "sql_skeleton"),
             "corpus.dialect", f"unknown dialect {sections['corpus']['dialect']!r}")

    _require(0.0 < _num(sections, "bucketing", "tau") < 1.0, "bucketing.tau",
             "must be in (0, 1)")
    _require(_num(sections, "bucketing", "num_hashes") >= 2, "bucketing.num_hashes",
             "must be >= 2")

    _require(_num(sections, "mining", "n_hard") >= 0, "mining.n_hard", "must be >= 0")
    _require(_num(sections, "mining", "n_rand") >= 0, "mining.n_rand", "must be >= 0")

    d = _num(sections, "encoder", "d")
    heads = _num(sections, "encoder", "heads")
    layers = _num(sections, "encoder", "layers")
    _require(d >= 1, "encoder.d", "must be >= 1")
    _require(heads >= 1 and d % heads == 0, "encoder.heads", "must divide d")
    _require(layers >= 2, "encoder.layers", "must be >= 2")
    _require(_num(sections, "encoder", "max_len") >= 1, "encoder.max_len", "must be >= 1")

    _require(0 <= _num(sections, "training", "epochs") <= 3, "training.epochs",
             "must be in [0, 3]")
    _require(_num(sections, "training", "lr") > 0, "training.lr", "must be positive")
    _require(_num(sections, "training", "temperature") > 0, "training.temperature",
             "must be positive")
    _require(_num(sections, "training", "batch") >= 1, "training.batch", "must be >= 1")
    _require(_num(sections, "training", "weight_decay") >= 0, "training.weight_decay",
             "must be >= 0")

    mli = sections["mli"]
    if mli.get("layers") is not None:
        for n in mli["layers"]:
            _require(isinstance(n, int) and 1 <= n <= layers, "mli.layers",
                     f"layer {n!r} outside [1, {layers}]")
    for prop in mli.get("properties", ()):
        _require(prop in PROPERTIES, "mli.properties", f"unknown property {prop!r}")
    for lam in mli.get("lambdas", ()):
        _require(isinstance(lam, (int, float)) and not isinstance(lam, bool),
                 "mli.lambdas", f"expected a number, got {lam!r}")
    _require(_num(sections, "mli", "k") >= 1, "mli.k", "must be >= 1")
    for prop, path in mli.get("label_corpora", {}).items():
        _require(prop in PROPERTIES, "mli.label_corpora", f"unknown property {prop!r}")
        _require(config.path(path).exists(), "mli.label_corpora",
                 f"file not found: {config.path(path)}")

    _require(_num(sections, "retrieval", "k") >= 1, "retrieval.k", "must be >= 1")
    _require(_num(sections, "prompt", "k") >= 1, "prompt.k", "must be >= 1")
    _require(sections["prompt"]["template"] in ("conversational", "sql_schema"),
             "prompt.template", f"unknown template {sections['prompt']['template']!r}")
    if sections["prompt"]["template"] == "sql_schema":
        _require(bool(sections["prompt"].get("schema_text")), "prompt.schema_text",
                 "required for the sql_schema template")
    return config


def load_config(path: str | Path, env: dict[str, str] | None = None) -> PipelineConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be an object")
    unknown = set(raw) - set(_SECTIONS)
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")

    sections = {name: dict(_DEFAULTS[name]) for name in _SECTIONS}
    for name, overrides in raw.items():
        if not isinstance(overrides, dict):
            raise ConfigError(f"{name}: section must be an object")
        sections[name].update(overrides)
    apply_env_overrides(sections, env if env is not None else dict(os.environ))
    config = PipelineConfig(base_dir=path.parent.resolve(), **sections)
    return validate(config)
