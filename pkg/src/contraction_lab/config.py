"""Scenario files: loading, dotted overrides, strict validation and canonical hashing."""

from __future__ import annotations

import copy
import hashlib
import json
import math
import os
from importlib import resources
from pathlib import Path
from typing import Any, Mapping, Sequence

import jsonschema
from jsonschema.exceptions import best_match

from .errors import ConfigError

SEED_ENV = "CONTRACTION_LAB_SEED"
SCHEMA_NAME = "config-v1.json"


def load_schema() -> dict:
    return json.loads(resources.files("contraction_lab").joinpath("schema", SCHEMA_NAME).read_text("utf-8"))


def _escape(token: str) -> str:
    return token.replace("~", "~0").replace("/", "~1")


def _pointer(path: Sequence) -> str:
    return "".join(f"/{_escape(str(p))}" for p in path)


def _error_pointer(err: jsonschema.ValidationError) -> str:
    path = list(err.absolute_path)
    if err.validator == "required":
        missing = [k for k in err.validator_value if k not in err.instance]
        if missing:
            path.append(missing[0])
    elif err.validator == "additionalProperties" and isinstance(err.instance, dict):
        allowed = set(err.schema.get("properties", {}))
        extra = sorted(k for k in err.instance if k not in allowed)
        if extra:
            path.append(extra[0])
    return _pointer(path)


def validate_config(cfg: Any) -> None:
    """Raise ConfigError pointing at the most relevant schema violation."""
    validator = jsonschema.Draft202012Validator(load_schema())
    err = best_match(validator.iter_errors(cfg))
    if err is not None:
        raise ConfigError(err.message, _error_pointer(err))
    model = cfg["model"]
    if "initial" in cfg and "builtin" not in model:
        for key in ("x", "y"):
            if len(cfg["initial"][key]) != model["d"]:
                raise ConfigError(f"expected {model['d']} coordinates", f"/initial/{key}")


def parse_value(text: str) -> Any:
    """Override values are JSON when they parse as JSON, plain strings otherwise."""
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(cfg: dict, overrides: Mapping[str, Any]) -> dict:
    """Set dotted keys (``model.params.K``) in a copy of ``cfg``; list indices are integers."""
    out = copy.deepcopy(cfg)
    for dotted, value in overrides.items():
        keys = dotted.split(".")
        node = out
        for i, key in enumerate(keys):
            last = i == len(keys) - 1
            if isinstance(node, list):
                try:
                    idx = int(key)
                    node[idx]
                except (ValueError, IndexError):
                    raise ConfigError(f"bad list index {key!r}", _pointer(keys[: i + 1])) from None
                if last:
                    node[idx] = value
                else:
                    node = node[idx]
            elif isinstance(node, dict):
                if last:
                    node[key] = value
                else:
                    node = node.setdefault(key, {})
            else:
                raise ConfigError("cannot descend into a scalar", _pointer(keys[:i]))
    return out


def load_config(path=None, overrides: Mapping[str, Any] | None = None, env: Mapping[str, str] | None = None,
                data: dict | None = None) -> dict:
    """Read, override, apply the seed environment variable, then validate."""
    if data is None:
        if path is None:
            raise ConfigError("no configuration given")
        try:
            data = json.loads(Path(path).read_text("utf-8"))
        except FileNotFoundError:
            raise ConfigError(f"config file {path} not found") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON: {exc.msg} (line {exc.lineno}, column {exc.colno})") from None
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    cfg = apply_overrides(data, overrides or {})
    env = os.environ if env is None else env
    if env.get(SEED_ENV):
        try:
            cfg["seed"] = int(env[SEED_ENV])
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer", "/seed") from None
    validate_config(cfg)
    return cfg


def _normalise(obj):
    if isinstance(obj, dict):
        return {k: _normalise(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_normalise(v) for v in obj]
    if isinstance(obj, float) and math.isfinite(obj) and obj.is_integer():
        return int(obj)
    return obj


def canonical_json(obj) -> str:
    """Sorted keys, no whitespace, integral floats written as integers."""
    return json.dumps(_normalise(obj), sort_keys=True, separators=(",", ":"), ensure_ascii=True)


def config_hash(cfg) -> str:
    return hashlib.sha256(canonical_json(cfg).encode("ascii")).hexdigest()
