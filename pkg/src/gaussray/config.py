"""Flat ``key = value`` config files.

Blank lines and ``#`` comments are ignored. Values are read as Python
literals where possible (``1e-3``, ``true``, ``[1, 2]``) and kept as strings
otherwise. Units live in the key names, e.g. ``ring_radius_mm``.
"""

from __future__ import annotations

import ast
import configparser
import hashlib
from pathlib import Path

from .errors import ConfigError

_SECTION = "config"
_BOOLS = {"true": True, "false": False, "yes": True, "no": False, "on": True, "off": False}


def _value(raw: str):
    s = raw.strip()
    if s.lower() in _BOOLS:
        return _BOOLS[s.lower()]
    try:
        return ast.literal_eval(s)
    except (ValueError, SyntaxError):
        return s


def parse_config(text: str) -> dict:
    cp = configparser.ConfigParser(delimiters=("=",), comment_prefixes=("#",),
                                   inline_comment_prefixes=("#",), interpolation=None)
    cp.optionxform = str
    try:
        cp.read_string(f"[{_SECTION}]\n" + text)
    except configparser.Error as e:
        raise ConfigError(f"cannot parse config: {e}") from None
    return {k: _value(v) for k, v in cp[_SECTION].items()}


def read_config(path) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e.strerror}") from None
    return parse_config(text)


def format_config(values: dict) -> str:
    lines = []
    for k, v in values.items():
        if isinstance(v, bool):
            v = "true" if v else "false"
        lines.append(f"{k} = {v}")
    return "\n".join(lines) + "\n"


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
