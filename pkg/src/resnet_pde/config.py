"""Run configurations: per-command schemas with defaults and strict validation.

A config is a nested JSON object. :func:`validate` fills defaults,
rejects unknown keys and reports missing or ill-typed ones by their
dotted path (``train.lr``). Command-line overrides use the same paths.
"""
from __future__ import annotations

import copy
import json

from .experiments import PROBLEMS, VARIANTS
from .point_cloud import DATASET_KINDS

REQUIRED = object()


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending key."""


def _num(x):
    return isinstance(x, (int, float)) and not isinstance(x, bool)


def _int(x):
    return isinstance(x, int) and not isinstance(x, bool)


def _opt(check):
    return lambda x: x is None or check(x)


def _choice(*options):
    f = lambda x: x in options
    f.options = options
    return f


def _list_of(*options):
    f = lambda x: isinstance(x, list) and len(x) > 0 and all(v in options for v in x)
    f.options = options
    return f


_pos = lambda x: _num(x) and x > 0
_nonneg = lambda x: _num(x) and x >= 0
_posint = lambda x: _int(x) and x >= 1
_frac = lambda x: _num(x) and 0 < x <= 1
_bool = lambda x: isinstance(x, bool)
_str = lambda x: isinstance(x, str)

# name -> (default, check)
DATASET = {
    "kind": ("two_moons", _choice(*DATASET_KINDS)),
    "n": (500, lambda x: _int(x) and x >= 4),
    "path": (None, _opt(_str)),
    "noise": (0.1, _nonneg),
    "separation": (6.0, _num),
    "radius": (1.0, _pos),
    "side": (1.0, _pos),
    "delta": (None, _opt(_pos)),
    "cutoff": (4.0, _pos),
    "volume_mode": ("uniform", _choice("uniform", "knn_density")),
    "train_fraction": (1.0, _frac),
    "constraint_ratio": (0.5, _frac),
}

VELOCITY = {
    "variant": (REQUIRED, _choice(*VARIANTS)),
    "steps": (4, _posint),
    "hidden": (16, _posint),
    "checkpoint": (None, _opt(_str)),
    "zero": (False, _bool),
}

PDE = {
    "dissipation": (1.0, _nonneg),
    "initial": ("linear_fit", _choice("linear_fit", "coordinate")),
    "normalization": ("calibrated", _choice("calibrated", "moment")),
    "auto_steps": (True, _bool),
}

TRAIN = {
    "optimizer": ("momentum", _choice("gd", "momentum")),
    "momentum": (0.9, _nonneg),
    "lr": (0.01, _nonneg),
    "lr_decay": (1.0, _pos),
    "decay_every": (0, lambda x: _int(x) and x >= 0),
    "epochs": (500, _posint),
    "batch_size": (None, _opt(_posint)),
    "gradcheck": (False, _bool),
    "gradcheck_tol": (1e-4, _pos),
    "gradcheck_coords": (32, _posint),
    "divergence_threshold": (1e6, _pos),
}

SCHEMAS = {
    "gen": {
        "seed": (0, _int), "output": ("dataset.csv", _str), "dataset": DATASET,
    },
    "train": {
        "seed": (0, _int), "output_dir": ("run", _str),
        "problem": (REQUIRED, _choice(*PROBLEMS)),
        "dataset": DATASET, "velocity": VELOCITY, "pde": PDE, "train": TRAIN,
    },
    "solve": {
        "seed": (0, _int), "output_dir": ("run", _str),
        "problem": (REQUIRED, _choice("transport_manifold", "hj", "viscous_hj", "wnll")),
        "snapshots": (False, _bool),
        "dataset": DATASET,
        "velocity": {**VELOCITY, "variant": ("rbf", _choice(*VARIANTS))},
        "pde": PDE,
    },
    "convergence": {
        "seed": (0, _int), "output": ("convergence.csv", _str),
        "manifold": (REQUIRED, _choice("circle", "sphere", "flat_plane")),
        "sizes": ([100, 400, 1600], lambda x: isinstance(x, list) and len(x) > 0
                  and all(_int(v) and v >= 4 for v in x)),
        "delta_rule": ("sqrt", _choice("sqrt", "linear", "fixed")),
        "delta_constant": (3.0, _pos),
        "field": ("linear", _choice("linear", "constant")),
        "normalization": ("moment", _choice("calibrated", "moment")),
        "radius": (1.0, _pos),
    },
    "gradcheck": {
        "seed": (0, _int), "output": ("gradcheck.json", _str),
        "variants": (list(VARIANTS), _list_of(*VARIANTS)),
        "problems": (list(PROBLEMS), _list_of(*PROBLEMS)),
        "instances": (50, _posint),
        "h": (1e-5, _pos),
        "tol": (1e-4, _pos),
        "corrupt_gradient": (False, _bool),
    },
}


def _describe(check):
    opts = getattr(check, "options", None)
    return f"one of {list(opts)}" if opts else "a valid value"


def _fill(schema, given, prefix):
    if not isinstance(given, dict):
        raise ConfigError(f"{prefix.rstrip('.') or 'config'}: expected an object")
    unknown = sorted(set(given) - set(schema))
    if unknown:
        raise ConfigError(f"unknown config key '{prefix}{unknown[0]}'")
    out = {}
    for key, spec in schema.items():
        path = prefix + key
        if isinstance(spec, dict):
            out[key] = _fill(spec, given.get(key, {}), path + ".")
            continue
        default, check = spec
        if key not in given:
            if default is REQUIRED:
                raise ConfigError(f"missing required config key '{path}'")
            out[key] = copy.deepcopy(default)
            continue
        value = given[key]
        if not check(value):
            raise ConfigError(f"config key '{path}' = {value!r} is invalid; expected {_describe(check)}")
        out[key] = value
    return out


def validate(command: str, config: dict) -> dict:
    """Return the fully populated config for ``command``."""
    if command not in SCHEMAS:
        raise ConfigError(f"unknown command {command!r}")
    return _fill(SCHEMAS[command], config, "")


def parse_override(item: str):
    """``a.b=value`` -> (["a", "b"], value); values parse as JSON when possible."""
    if "=" not in item:
        raise ConfigError(f"override {item!r} must look like key=value")
    key, raw = item.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip().split("."), value


def apply_overrides(config: dict, items) -> dict:
    out = copy.deepcopy(config)
    for item in items:
        path, value = item if isinstance(item, tuple) else parse_override(item)
        node = out
        for part in path[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"cannot override inside non-object key '{part}'")
        node[path[-1]] = value
    return out


def load(path) -> dict:
    """Read a JSON config; a run manifest yields the config it echoes."""
    try:
        with open(path) as fh:
            data = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc.msg} at line {exc.lineno})") from exc
    if isinstance(data, dict) and "command" in data and "config" in data:
        return data["config"]
    return data
