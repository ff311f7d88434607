"""Flat ``key = value`` experiment configuration files.

Lists are comma separated, booleans are ``true``/``false``, ``#`` starts a
comment.  Unknown keys are rejected.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import fields
from pathlib import Path

from .harness import ExperimentConfig

_BOOL = {"true": True, "false": False, "1": True, "0": False, "on": True, "off": False}


def _convert(kind: str, raw: str, key: str):
    raw = raw.strip()
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "bool":
            return _BOOL[raw.lower()]
        if kind.startswith("list[int]"):
            return [int(x) for x in raw.split(",") if x.strip()]
        return raw
    except (ValueError, KeyError):
        raise ValueError(f"config key {key!r}: cannot parse {raw!r} as {kind}") from None


def parse_config(text: str) -> ExperimentConfig:
    kinds = {f.name: str(f.type) for f in fields(ExperimentConfig)}
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key = value, got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in kinds:
            raise ValueError(f"line {lineno}: unknown config key {key!r}")
        if key in values:
            raise ValueError(f"line {lineno}: duplicate config key {key!r}")
        values[key] = _convert(kinds[key], raw, key)
    return ExperimentConfig(**values)


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists() or path.is_dir():
        raise FileNotFoundError(f"config file not found: {path}")
    return parse_config(path.read_text())


def format_config(config: ExperimentConfig) -> str:
    lines = []
    for f in fields(config):
        v = getattr(config, f.name)
        if isinstance(v, bool):
            v = str(v).lower()
        elif isinstance(v, list):
            v = ",".join(str(x) for x in v)
        elif isinstance(v, float):
            v = repr(v)
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"


def config_hash(config: ExperimentConfig) -> str:
    blob = json.dumps(config.as_dict(), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()
