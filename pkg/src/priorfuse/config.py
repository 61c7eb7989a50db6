"""Three-layer settings for CLI subcommands: flag > config file > built-in default.

Config files are either a JSON object or plain ``key = value`` lines
(``#`` starts a comment). Keys use the long flag name with dashes or
underscores interchangeably.
"""

from __future__ import annotations

import argparse
import json
from pathlib import Path
from typing import Optional, Sequence


class UsageError(Exception):
    """Bad flags or config values; reported before any computation."""


def read_config_file(path) -> dict:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise UsageError(f"cannot read config {path}: {e}") from None
    stripped = text.lstrip()
    if stripped.startswith("{"):
        try:
            d = json.loads(text)
        except json.JSONDecodeError as e:
            raise UsageError(f"config {path} is not valid JSON: {e}") from None
        if not isinstance(d, dict):
            raise UsageError(f"config {path} must hold a JSON object")
        return {k.replace("-", "_"): v for k, v in d.items()}
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected 'key = value'")
        k, v = (s.strip() for s in line.split("=", 1))
        out[k.replace("-", "_")] = v
    return out


_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _coerce(action: argparse.Action, value):
    if isinstance(action, (argparse._StoreTrueAction, argparse._StoreFalseAction)):
        if isinstance(value, bool):
            return value
        s = str(value).strip().lower()
        if s in _TRUE:
            return True
        if s in _FALSE:
            return False
        raise UsageError(f"{action.dest}: expected a boolean, got {value!r}")
    if action.type is not None and not isinstance(value, bool):
        try:
            value = action.type(value)
        except (TypeError, ValueError, argparse.ArgumentTypeError) as e:
            raise UsageError(f"{action.dest}: invalid value {value!r} ({e})") from None
    if action.choices is not None and value not in action.choices:
        raise UsageError(f"{action.dest}: {value!r} is not one of {sorted(action.choices)}")
    return value


def resolve(parser: argparse.ArgumentParser, argv: Optional[Sequence[str]] = None,
            config_dest: str = "config") -> argparse.Namespace:
    """Parse ``argv`` and layer explicit flags over the config file over defaults.

    Every option of ``parser`` must have been added with its real default;
    the parser is modified in place so that unspecified flags are detectable.
    """
    actions = {a.dest: a for a in parser._actions
               if a.dest not in ("help", argparse.SUPPRESS) and a.option_strings}
    defaults = {}
    for dest, a in actions.items():
        defaults[dest] = a.default
        a.default = argparse.SUPPRESS
    try:
        ns = parser.parse_args(argv)
    except SystemExit as e:
        if e.code == 0:
            raise
        raise UsageError("invalid command line") from None
    given = vars(ns)
    merged = dict(defaults)
    cfg_path = given.get(config_dest)
    if cfg_path:
        for k, v in read_config_file(cfg_path).items():
            if k not in actions or k == config_dest:
                raise UsageError(f"unknown config key {k!r}")
            merged[k] = _coerce(actions[k], v)
    merged.update(given)
    return argparse.Namespace(**merged)


__all__ = ["UsageError", "read_config_file", "resolve"]
