"""Option resolution for the CLI: defaults < config file < explicit flags.

The config file is one flat JSON object whose keys are exactly the flag
destinations (``--endpoint-url`` <-> ``endpoint_url``); keys that only
apply to other subcommands are accepted and ignored, unknown keys are
rejected in one error naming all of them.  ``config`` itself is the only
flag without a file key.
"""

from __future__ import annotations

import argparse
import json
from pathlib import Path

from .errors import ConfigError

_DEFAULTS_ATTR = "_corpoint_defaults"


def add_option(parser: argparse.ArgumentParser, *names: str, default=None,
               dtype=None, choices=None, flag: bool = False, help: str = ""):
    """add_argument wrapper that records the real default separately.

    argparse gets SUPPRESS so the parsed namespace contains only what the
    user actually typed; merge order is then unambiguous.
    """
    defaults = getattr(parser, _DEFAULTS_ATTR, None)
    if defaults is None:
        defaults = {}
        setattr(parser, _DEFAULTS_ATTR, defaults)
    if flag:
        action = parser.add_argument(
            *names, action="store_true", default=argparse.SUPPRESS, help=help
        )
    else:
        shown = help if default is None else f"{help} (default: {default})"
        action = parser.add_argument(
            *names, type=dtype, choices=choices,
            default=argparse.SUPPRESS, help=shown,
        )
    defaults[action.dest] = False if flag else default
    return action


def parser_defaults(parser: argparse.ArgumentParser) -> dict:
    return dict(getattr(parser, _DEFAULTS_ATTR, {}))


def load_config(path, valid_keys) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError("config file must hold a JSON object")
    unknown = sorted(set(data) - set(valid_keys))
    if unknown:
        raise ConfigError(
            "unknown config keys: " + ", ".join(unknown), keys=unknown
        )
    return data


def resolve(defaults: dict, config: dict, provided: dict) -> argparse.Namespace:
    """Merge one subcommand's options; config keys outside it are ignored."""
    merged = dict(defaults)
    for key, value in config.items():
        if key in merged:
            merged[key] = value
    merged.update(provided)
    return argparse.Namespace(**merged)


def require(options: argparse.Namespace, *keys: str) -> None:
    missing = [k for k in keys if getattr(options, k, None) in (None, "")]
    if missing:
        raise ConfigError(
            "missing required option(s): " + ", ".join(missing), keys=missing
        )


def parse_fractions(value) -> list[float]:
    if isinstance(value, str):
        parts = [p.strip() for p in value.split(",") if p.strip()]
    else:
        parts = list(value)
    try:
        out = [float(p) for p in parts]
    except (TypeError, ValueError):
        raise ConfigError(f"fractions must be numbers, got {value!r}")
    if not out:
        raise ConfigError("fractions must not be empty")
    bad = [f for f in out if not 0.0 <= f <= 1.0]
    if bad:
        raise ConfigError(f"fractions outside [0, 1]: {bad}")
    return out


def parse_relation_names(value) -> list[str]:
    from .scenes import Relation

    if isinstance(value, str):
        parts = [p.strip() for p in value.split(",") if p.strip()]
    else:
        parts = [str(p) for p in value]
    valid = {r.value for r in Relation}
    bad = sorted(set(parts) - valid)
    if bad:
        raise ConfigError(
            "unknown relation name(s): " + ", ".join(bad)
            + " (valid: " + ", ".join(sorted(valid)) + ")",
            keys=bad,
        )
    return parts


__all__ = [
    "add_option", "parser_defaults", "load_config", "resolve", "require",
    "parse_fractions", "parse_relation_names",
]
