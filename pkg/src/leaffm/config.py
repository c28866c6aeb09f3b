"""Flat ``key = value`` configuration files."""
from __future__ import annotations

import json

from .errors import ConfigError


def parse_value(text):
    """Interpret a config value: JSON scalars/lists first, else a comma list or bare string."""
    text = text.strip()
    try:
        return json.loads(text)
    except ValueError:
        pass
    if "," in text:
        return [parse_value(part) for part in text.split(",") if part.strip()]
    return text


def read_kv_file(path, raw=False):
    """Yield ``(key, value)`` pairs in file order. ``#`` starts a comment."""
    pairs = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{line_no}: expected 'key = value'")
            key, value = line.split("=", 1)
            key = key.strip()
            pairs.append((key, value.strip() if raw else parse_value(value)))
    return pairs


def format_value(value):
    if isinstance(value, str):
        return value
    if isinstance(value, (list, tuple)):
        return json.dumps(list(value))
    return json.dumps(value)


def write_kv_file(path, items):
    with open(path, "w", encoding="utf-8") as fh:
        for key, value in items:
            fh.write(f"{key} = {format_value(value)}\n")
