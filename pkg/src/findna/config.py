"""Run configuration: built-in presets, INI files, and flag overrides.

Resolution order is preset (``--config NAME``) or file (``--config PATH``),
then command-line flags. Every section maps onto one dataclass.
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
import os
import typing
from pathlib import Path

from .distill import DistillConfig
from .evalkit import ProbeConfig
from .mixer import MixerConfig


class ConfigError(ValueError):
    pass


SECTIONS = {"mixer": MixerConfig, "distill": DistillConfig, "probe": ProbeConfig}

PRESETS: dict[str, dict[str, dict]] = {
    # full-size pretraining setup
    "paper_defaults": {
        "mixer": dict(channels=308, hidden=512, num_layers=4, max_length=1010, dropout_rate=0.1),
        "distill": dict(alpha=0.5, tau_s=0.1, tau_t=0.04, num_cls=10, beta=0.996, lambda_start=0.996,
                        lambda_end=1.0, epochs=50, warmup_fraction=0.3),
        "probe": dict(batch=1024, lr=0.01, weight_decay=0.1, epochs=50),
    },
    # small model that trains in minutes on one CPU core
    "desk": {
        "mixer": dict(channels=64, hidden=128, num_layers=2, max_length=132, dropout_rate=0.0),
        "distill": dict(num_cls=4, epochs=10, batch_size=32),
        "probe": dict(batch=256, lr=0.01, weight_decay=0.01, epochs=100, head_init_epochs=100),
    },
    "micro": {
        "mixer": dict(channels=8, hidden=16, num_layers=1, max_length=18, dropout_rate=0.0),
        "distill": dict(num_cls=2, batch_size=2),
        "probe": dict(batch=32, epochs=20),
    },
}


def _coerce(value: str, typ, key: str):
    origin = typing.get_origin(typ)
    try:
        if typ is bool:
            low = value.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if typ is int:
            return int(value)
        if typ is float:
            return float(value)
        if origin is tuple:
            return tuple(float(v) for v in value.replace(",", " ").split())
        return value.strip()
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {value!r} as {getattr(typ, '__name__', typ)}") from None


def _field_types(cls) -> dict[str, typing.Any]:
    hints = typing.get_type_hints(cls)
    return {f.name: hints[f.name] for f in dataclasses.fields(cls)}


def parse_ini(text: str, source: str = "<config>") -> dict[str, dict]:
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from None
    out: dict[str, dict] = {}
    for section in cp.sections():
        if section == "run":
            out["run"] = dict(cp[section])
            continue
        if section not in SECTIONS:
            raise ConfigError(f"{source}: unknown section [{section}]")
        types = _field_types(SECTIONS[section])
        values = {}
        for key, raw in cp[section].items():
            if key not in types:
                raise ConfigError(f"{source}: unknown key {section}.{key}")
            values[key] = _coerce(raw, types[key], f"{section}.{key}")
        out[section] = values
    return out


def load_source(name: str | None) -> dict[str, dict]:
    """A preset name or an INI file path."""
    if name is None:
        return {}
    if name in PRESETS:
        return {k: dict(v) for k, v in PRESETS[name].items()}
    path = Path(name)
    if not path.is_file():
        raise ConfigError(f"config {name!r} is neither a preset ({', '.join(PRESETS)}) nor a file")
    return parse_ini(path.read_text(), str(path))


def apply_overrides(base: dict[str, dict], overrides: list[str]) -> dict[str, dict]:
    """``section.key=value`` strings, as given to ``--set``."""
    out = {k: dict(v) for k, v in base.items()}
    for item in overrides:
        lhs, sep, value = item.partition("=")
        section, dot, key = lhs.partition(".")
        if not sep or not dot:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        if section not in SECTIONS:
            raise ConfigError(f"unknown section {section!r}")
        types = _field_types(SECTIONS[section])
        if key not in types:
            raise ConfigError(f"unknown key {section}.{key}")
        out.setdefault(section, {})[key] = _coerce(value, types[key], lhs)
    return out


def build(values: dict[str, dict]) -> dict[str, typing.Any]:
    """Instantiate (and thereby range-check) every section."""
    built = {}
    for section, cls in SECTIONS.items():
        try:
            built[section] = cls(**values.get(section, {}))
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"[{section}] {exc}") from None
    return built


def resolve_seed(flag: int | None, fallback: int = 0) -> int:
    if flag is not None:
        return flag
    env = os.environ.get("FINDNA_SEED")
    if env is None:
        return fallback
    try:
        return int(env)
    except ValueError:
        raise ConfigError(f"FINDNA_SEED={env!r} is not an integer") from None


def to_ini(values: dict[str, typing.Any]) -> str:
    cp = configparser.ConfigParser(interpolation=None)
    for section, obj in values.items():
        data = obj.to_dict() if hasattr(obj, "to_dict") else dict(obj)
        cp[section] = {k: " ".join(map(str, v)) if isinstance(v, (tuple, list)) else str(v) for k, v in data.items()}
    lines = []
    for section in cp.sections():
        lines.append(f"[{section}]")
        lines += [f"{k} = {v}" for k, v in cp[section].items()]
        lines.append("")
    return "\n".join(lines)


def config_hash(payload: dict) -> str:
    blob = json.dumps(payload, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:8]
