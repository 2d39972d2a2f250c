"""Flat ``dotted.key = value`` text format for configs.

Values are JSON literals, nested lists of records become numbered path
segments::

    model.stages.0.blocks.1.kernel = 3
    model.input_size = [224, 224]
    train.optimizer = "adamw"

Dumping is canonical (field order, ``repr``-exact floats), so the text can
be embedded in checkpoints and diffed.
"""
from __future__ import annotations

import dataclasses
import json
from typing import Any

from .errors import ConfigError


def flatten(obj: Any, prefix: str) -> dict[str, Any]:
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        obj = {f.name: getattr(obj, f.name) for f in dataclasses.fields(obj)}
    out: dict[str, Any] = {}
    if isinstance(obj, dict):
        for k, v in obj.items():
            out.update(flatten(v, f"{prefix}.{k}"))
    elif isinstance(obj, (list, tuple)) and obj and (
            isinstance(obj[0], dict) or dataclasses.is_dataclass(obj[0])):
        for i, v in enumerate(obj):
            out.update(flatten(v, f"{prefix}.{i}"))
    else:
        out[prefix] = list(obj) if isinstance(obj, tuple) else obj
    return out


def unflatten(flat: dict[str, Any], prefix: str) -> dict:
    root: dict = {}
    for key, value in flat.items():
        if not key.startswith(prefix + "."):
            continue
        parts = key[len(prefix) + 1:].split(".")
        node = root
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = value
    return _listify(root)


def _listify(node):
    if not isinstance(node, dict):
        return node
    if node and all(k.isdigit() for k in node):
        idx = sorted(int(k) for k in node)
        if idx != list(range(len(idx))):
            raise ConfigError(f"non-contiguous list indices {idx}")
        return [_listify(node[str(i)]) for i in idx]
    return {k: _listify(v) for k, v in node.items()}


def dumps(flat: dict[str, Any]) -> str:
    return "".join(f"{k} = {json.dumps(v)}\n" for k, v in flat.items())


def loads(text: str) -> dict[str, Any]:
    flat: dict[str, Any] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        try:
            flat[key.strip()] = json.loads(value.strip())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"line {lineno}: bad value {value.strip()!r}: {exc.msg}") from None
    return flat
