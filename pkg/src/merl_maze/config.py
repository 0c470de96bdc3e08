"""Flat ``key = value`` config files.

One setting per line, ``#`` starts a comment.  Values are read as JSON
when possible (numbers, booleans, lists, null) and as bare strings
otherwise.  Dotted keys address nested sections, e.g. ``merl.meta_lr``.
"""
from __future__ import annotations

import json
import os
from pathlib import Path

OUTPUT_ROOT_ENV = "MERL_MAZE_OUT"


def output_root(default: str = "runs") -> Path:
    return Path(os.environ.get(OUTPUT_ROOT_ENV, default))


def parse_value(text: str):
    text = text.strip()
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def parse_config(text: str) -> dict:
    out: dict = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        node = out
        *parents, leaf = key.split(".")
        for p in parents:
            node = node.setdefault(p, {})
        node[leaf] = parse_value(value)
    return out


def load_config(path) -> dict:
    return parse_config(Path(path).read_text()) if path else {}


def dump_config(cfg: dict, prefix: str = "") -> str:
    lines = []
    for k in sorted(cfg):
        v = cfg[k]
        if isinstance(v, dict):
            lines.append(dump_config(v, f"{prefix}{k}."))
        else:
            lines.append(f"{prefix}{k} = {json.dumps(v)}")
    return "\n".join(l for l in lines if l)
