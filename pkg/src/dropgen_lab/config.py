"""Experiment configuration: JSON documents validated against a schema before
any compute. Precedence is command-line flag > config file > default."""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, fields
from importlib import resources
from pathlib import Path

import jsonschema

from .envs import EnvironmentSpec, shortcut_bench
from .experiments import DataConfig, DiagnosticsConfig, ExtractorConfig, ModelConfig
from .training import TrainConfig

SCHEMA_VERSION = 1
NAMED_SPECS = ("shortcut-bench", "shortcut-bench-discrete")

_num = {"type": "number"}
_count = {"type": "integer", "minimum": 1}
_levels = {"type": "array", "items": {"type": "number", "minimum": 0}, "minItems": 1}

SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["schema_version"],
    "properties": {
        "schema_version": {"const": SCHEMA_VERSION},
        "name": {"type": "string"},
        "spec": {"oneOf": [{"enum": list(NAMED_SPECS)}, {"type": "object"}]},
        "data": {
            "type": "object", "additionalProperties": False,
            "properties": {"n_train": _count, "n_val": _count,
                           "n_test": {"type": "integer", "minimum": 0},
                           "seed": {"type": "integer"}},
        },
        "model": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "hidden": {"type": "array", "items": _count},
                "activation": {"enum": ["relu", "tanh", "identity"]},
                "kernel_size": {"type": "integer", "minimum": 1},
            },
        },
        "extractor": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "kind": {"enum": ["identity", "frozen-random", "learned"]},
                "d": _count, "hidden": _count, "seed": {"type": "integer"},
                "noise_std": {"type": "number", "minimum": 0}, "steps": _count,
            },
        },
        "train": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "steps": {"type": "integer", "minimum": 0},
                "batch_size": _count,
                "lr0": {"type": "number", "exclusiveMinimum": 0},
                "weight_decay": {"type": "number", "minimum": 0},
                "loss": {"enum": ["cross_entropy", "dice_ce"]},
                "p": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
                "mask_mode": {"enum": ["two-block", "per-channel", "structured-block"]},
                "rescale": {"type": "boolean"},
                "guarantee_nonzero": {"type": "boolean"},
                "dropout_location": {"enum": ["inputs", "all-layers"]},
                "train_input_mode": {"enum": ["full", "image-only", "reps-only"]},
                "seed": {"type": "integer"},
                "eval_every": _count,
            },
        },
        "diagnostics": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "risk": {"type": "boolean"}, "usage": {"type": "boolean"},
                "sensitivity": {"type": "boolean"}, "alignment": {"type": "boolean"},
                "alignment_every": _count, "robustness": {"type": "boolean"},
                # weight-noise magnitudes relative to each tensor's std
                "alphas": _levels,
                # gamma: log-exponent level; bias: log-amplitude of the field
                "levels": _levels,
                "trials": _count,
            },
        },
        "sweep": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "grid": {"type": "object",
                         "additionalProperties": {"type": "array", "minItems": 1}},
                "seeds": {"type": "array", "items": {"type": "integer"}, "minItems": 1},
            },
        },
        "output": {"type": "string"},
    },
}


class ConfigError(ValueError):
    """Invalid configuration; the message names the field and, when known, the line."""


def _line_of(text, path):
    """Best-effort line number of the last key in ``path`` within ``text``."""
    if not text or not path:
        return None
    pos = 0
    for key in path:
        if isinstance(key, int):
            continue
        found = text.find(f'"{key}"', pos)
        if found < 0:
            return None
        pos = found
    return text.count("\n", 0, pos) + 1


def validate(doc, source="<config>", text=None):
    validator = jsonschema.Draft202012Validator(SCHEMA)
    errors = sorted(validator.iter_errors(doc), key=lambda e: list(e.absolute_path))
    if not errors:
        return
    lines = []
    for err in errors:
        path = list(err.absolute_path)
        where = ".".join(str(p) for p in path) or "<root>"
        line = _line_of(text, path)
        loc = f"{source}:{line}" if line else source
        msg = err.message
        if path[-1:] == ["p"] and path[:1] == ["train"]:
            msg = f"p in [0,1) required; {msg}"
        lines.append(f"{loc}: field {where}: {msg}")
    raise ConfigError("\n".join(lines))


def bundled_config_path(name="shortcut_bench.json"):
    return Path(str(resources.files("dropgen_lab") / "configs" / name))


def read_config(path):
    path = Path(path)
    text = path.read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}: invalid JSON: {exc.msg}")
    validate(doc, str(path), text)
    return doc


def parse_value(raw):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def apply_override(doc, key, value):
    """Set dotted ``key`` (e.g. ``train.p``) in a copy of ``doc``."""
    out = copy.deepcopy(doc)
    parts = key.split(".")
    node = out
    for part in parts[:-1]:
        child = node.setdefault(part, {})
        if not isinstance(child, dict):
            raise ConfigError(f"--set {key}: {part} is not a section")
        node = child
    node[parts[-1]] = value
    return out


def apply_overrides(doc, pairs, source="--set"):
    for item in pairs or ():
        if "=" not in item:
            raise ConfigError(f"{source} expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        doc = apply_override(doc, key.strip(), parse_value(raw))
    validate(doc, source)
    return doc


def config_hash(doc):
    blob = json.dumps(doc, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


@dataclass
class ExperimentConfig:
    name: str
    spec: EnvironmentSpec
    data: DataConfig
    model: ModelConfig
    extractor: ExtractorConfig
    train: TrainConfig
    diagnostics: DiagnosticsConfig
    grid: dict
    seeds: list
    output: str | None
    raw: dict

    @property
    def hash(self):
        return config_hash(self.raw)


def _build(cls, section):
    names = {f.name for f in fields(cls)}
    kwargs = {k: (tuple(v) if isinstance(v, list) else v) for k, v in section.items()
              if k in names}
    return cls(**kwargs)


def resolve_spec(value):
    if value is None or value == "shortcut-bench":
        return shortcut_bench()
    if value == "shortcut-bench-discrete":
        return shortcut_bench("discrete")
    try:
        return EnvironmentSpec.from_dict(value)
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"field spec: {exc}")


def build(doc):
    """Turn a validated document into typed configuration objects."""
    validate(doc)
    ext = _build(ExtractorConfig, doc.get("extractor", {}))
    train = dict(doc.get("train", {}))
    train["extractor"] = ext.kind
    sweep = doc.get("sweep", {})
    tcfg = TrainConfig.from_dict(train)
    return ExperimentConfig(
        name=doc.get("name", "experiment"),
        spec=resolve_spec(doc.get("spec")),
        data=_build(DataConfig, doc.get("data", {})),
        model=_build(ModelConfig, doc.get("model", {})),
        extractor=ext,
        train=tcfg,
        diagnostics=_build(DiagnosticsConfig, doc.get("diagnostics", {})),
        grid=dict(sweep.get("grid", {})),
        seeds=list(sweep.get("seeds", [tcfg.seed])),
        output=doc.get("output"),
        raw=doc,
    )
