"""Experiment configuration files.

Configs are YAML documents. Validation errors carry the dotted field path
and, when the field is present in the file, its line number.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import replace
from pathlib import Path
from typing import Any

import yaml

from .dgp import DesignSpec
from .estimators import EstimatorSpec
from .validation import BetaSpec, ExperimentConfig

TOP_LEVEL = {"seed", "alpha", "replications", "prediction_draws", "sigma", "delta", "side",
             "diagnostics", "failure_budget", "design", "beta", "estimators"}


class ConfigError(ValueError):
    def __init__(self, message: str, field: str | None = None, line: int | None = None):
        self.field = field
        self.line = line
        where = ""
        if field is not None:
            where = f"field '{field}'"
            if line is not None:
                where += f" (line {line})"
            where += ": "
        super().__init__(where + message)


def _line_index(node, prefix: str = "", out: dict[str, int] | None = None) -> dict[str, int]:
    """Map dotted paths to 1-based line numbers in the YAML source."""
    out = {} if out is None else out
    if isinstance(node, yaml.MappingNode):
        for key, value in node.value:
            path = f"{prefix}.{key.value}" if prefix else str(key.value)
            out[path] = key.start_mark.line + 1
            _line_index(value, path, out)
    elif isinstance(node, yaml.SequenceNode):
        for i, item in enumerate(node.value):
            path = f"{prefix}[{i}]"
            out[path] = item.start_mark.line + 1
            _line_index(item, path, out)
    return out


def _check(raw: dict, name: str, typ, ok, what: str, lines: dict[str, int]):
    if name not in raw:
        return
    value = raw[name]
    if typ is int:
        valid_type = isinstance(value, int) and not isinstance(value, bool)
    elif typ is float:
        valid_type = isinstance(value, (int, float)) and not isinstance(value, bool)
    else:
        valid_type = isinstance(value, typ)
    if not valid_type or not ok(value):
        raise ConfigError(f"{what}, got {value!r}", name, lines.get(name))


_SCALARS = [
    ("seed", int, lambda v: v >= 0, "must be a non-negative integer"),
    ("alpha", float, lambda v: 0 < v < 1, "must lie in (0, 1)"),
    ("replications", int, lambda v: v >= 1, "must be an integer >= 1"),
    ("prediction_draws", int, lambda v: v >= 1, "must be an integer >= 1"),
    ("sigma", float, lambda v: v > 0, "must be positive"),
    ("delta", float, lambda v: 0 < v <= 2, "must lie in (0, 2]"),
    ("side", str, lambda v: v in ("two-sided", "lower-only", "upper-only"),
     "must be two-sided, lower-only or upper-only"),
    ("diagnostics", bool, lambda v: True, "must be true or false"),
    ("failure_budget", float, lambda v: 0 <= v <= 1, "must lie in [0, 1]"),
]


def config_from_dict(raw: Any, lines: dict[str, int] | None = None) -> ExperimentConfig:
    lines = lines or {}
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping at the top level")
    unknown = sorted(set(raw) - TOP_LEVEL)
    if unknown:
        raise ConfigError("unknown field", unknown[0], lines.get(unknown[0]))
    for name, typ, ok, what in _SCALARS:
        _check(raw, name, typ, ok, what, lines)
    if "design" not in raw:
        raise ConfigError("missing required section", "design")
    try:
        design = DesignSpec.from_dict(raw["design"])
    except (ValueError, TypeError, KeyError) as exc:
        raise ConfigError(str(exc), "design", lines.get("design")) from None
    kwargs: dict[str, Any] = {k: raw[k] for k, *_ in _SCALARS if k in raw}
    for k in ("alpha", "sigma", "delta", "failure_budget"):
        if k in kwargs:
            kwargs[k] = float(kwargs[k])
    if "beta" in raw:
        try:
            kwargs["beta"] = BetaSpec.from_dict(raw["beta"])
        except (ValueError, TypeError) as exc:
            raise ConfigError(str(exc), "beta", lines.get("beta")) from None
    if "estimators" in raw:
        if not isinstance(raw["estimators"], list) or not raw["estimators"]:
            raise ConfigError("must be a non-empty list", "estimators", lines.get("estimators"))
        specs = []
        for i, item in enumerate(raw["estimators"]):
            path = f"estimators[{i}]"
            try:
                specs.append(EstimatorSpec.from_dict(item))
            except (ValueError, TypeError) as exc:
                raise ConfigError(str(exc), path, lines.get(path)) from None
        labels = [s.label for s in specs]
        if len(set(labels)) != len(labels):
            raise ConfigError("duplicate estimator entries", "estimators", lines.get("estimators"))
        kwargs["estimators"] = tuple(specs)
    try:
        return ExperimentConfig(design=design, **kwargs)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _apply_override(raw: dict, assignment: str):
    if "=" not in assignment:
        raise ConfigError(f"override {assignment!r} is not of the form key=value")
    key, text = assignment.split("=", 1)
    value = yaml.safe_load(text)
    target = raw
    parts = key.strip().split(".")
    for part in parts[:-1]:
        target = target.setdefault(part, {})
        if not isinstance(target, dict):
            raise ConfigError("cannot override inside a non-mapping", key)
    target[parts[-1]] = value


def load_config(path: str | Path, overrides: list[str] = ()) -> ExperimentConfig:
    """Read and validate a YAML experiment config.

    ``overrides`` are ``dotted.key=value`` strings applied before validation;
    values are parsed as YAML scalars.
    """
    text = Path(path).read_text()
    try:
        node = yaml.compose(text)
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        line = mark.line + 1 if mark is not None else None
        raise ConfigError(f"YAML syntax error: {getattr(exc, 'problem', exc)}", "<file>", line) from None
    lines = _line_index(node) if node is not None else {}
    raw = {} if raw is None else raw
    for assignment in overrides:
        _apply_override(raw, assignment)
    return config_from_dict(raw, lines)


def config_to_dict(config: ExperimentConfig) -> dict[str, Any]:
    return {
        "seed": config.seed,
        "alpha": config.alpha,
        "replications": config.replications,
        "prediction_draws": config.prediction_draws,
        "sigma": config.sigma,
        "delta": config.delta,
        "side": config.side,
        "diagnostics": config.diagnostics,
        "failure_budget": config.failure_budget,
        "design": config.design.to_dict(),
        "beta": config.beta.to_dict(),
        "estimators": [s.to_dict() for s in config.estimators],
    }


def config_hash(config: ExperimentConfig) -> str:
    payload = json.dumps(config_to_dict(config), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def with_seed(config: ExperimentConfig, seed: int) -> ExperimentConfig:
    if seed < 0:
        raise ConfigError(f"must be a non-negative integer, got {seed}", "seed")
    return replace(config, seed=seed)
