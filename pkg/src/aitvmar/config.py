"""Experiment configuration: JSON schema, defaults and ``--key=value`` overrides.

Relative paths are resolved against the directory of the config file. The
string ``"builtin"`` selects the data shipped with the package.
"""

import copy
import json
from pathlib import Path

import jsonschema

from .simulate import DATA_DIR

_num = {"type": "number"}
_pos = {"type": "number", "exclusiveMinimum": 0}
_pos_or_null = {"anyOf": [_pos, {"type": "null"}]}


def _obj(props, required=()):
    return {"type": "object", "properties": props, "required": list(required),
            "additionalProperties": False}


SCHEMA = _obj({
    "phantom": {"type": "string"},
    "materials": {"type": "string"},
    "spectrum": {"type": "string"},
    "image_size": {"type": "integer", "minimum": 11},
    "reference_energy_kev": _pos,
    "output_dir": {"type": "string"},
    "geometry": _obj({
        "source_to_detector": _pos,
        "source_to_iso": _pos,
        "bin_width": {"anyOf": [_pos, {"const": "fit"}]},
        "num_views": {"type": "integer", "minimum": 2},
        "num_bins": {"type": "integer", "minimum": 1},
        "angular_range": _pos,
        "start_angle": _num,
    }),
    "noise": _obj({
        "S0": _pos_or_null,
        "seed": {"type": "integer", "minimum": 0},
    }),
    "weight": _obj({
        "t": _pos,
        "eps": _pos,
        "metal_threshold": _pos_or_null,
        "cap": _pos_or_null,
        "trace_tol": {"type": "number", "minimum": 0},
        "initial_recon": {"enum": ["fbp", "cgls"]},
        "cgls_iters": {"type": "integer", "minimum": 1},
    }),
    "solver": _obj({
        "algorithm": {"enum": ["pre", "fs"]},
        "preset": {"enum": ["proposed", "tv_mar", "aitv_binary"]},
        "init": {"enum": ["zero", "fbp"]},
        "lam": _pos,
        "alpha": {"type": "number", "minimum": 0, "maximum": 1},
        "eta": {"type": "number", "minimum": 0},
        "c": _pos,
        "gamma": _pos_or_null,
        "tau": _pos,
        "beta": _pos_or_null,
        "rho": _pos,
        "sigma1": _pos,
        "sigma2": _pos,
        "max_iters": {"type": "integer", "minimum": 1},
        "tol": _pos,
        "projection": {"enum": ["paper", "euclidean"]},
    }),
})

DEFAULTS = {
    "phantom": "builtin:phantom_two_metals.json",
    "materials": "builtin:materials.csv",
    "spectrum": "builtin:spectrum.csv",
    "image_size": 128,
    "reference_energy_kev": 70.0,
    "output_dir": "mar_out",
    "geometry": {
        "source_to_detector": 949.075,
        "source_to_iso": 541.0,
        "bin_width": 1.024,
        "num_views": 984,
        "num_bins": 888,
        "angular_range": 6.283185307179586,
        "start_angle": 0.0,
    },
    "noise": {"S0": 1e5, "seed": 0},
    "weight": {
        "t": 0.94,
        "eps": 1e-16,
        "metal_threshold": None,
        "cap": None,
        "trace_tol": 0.0,
        "initial_recon": "fbp",
        "cgls_iters": 20,
    },
    "solver": {
        "algorithm": "fs",
        "preset": "proposed",
        "init": "zero",
        "lam": 1.0,
        "alpha": 0.75,
        "eta": 1e-4,
        "c": 1.0,
        "gamma": None,
        "tau": 0.01,
        "beta": None,
        "rho": 0.003,
        "sigma1": 0.001,
        "sigma2": 300.0,
        "max_iters": 3000,
        "tol": 9e-5,
        "projection": "paper",
    },
}

# beta differs between the two schemes when left unset
BETA_DEFAULT = {"pre": 5.0, "fs": 50.0}


class ConfigError(ValueError):
    pass


def _merge(base, over):
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def validate(doc):
    try:
        jsonschema.validate(doc, SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"config error at {where}: {exc.message}") from None


def _parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(doc, overrides):
    """Apply ``key.sub=value`` strings (values parsed as JSON when possible)."""
    doc = copy.deepcopy(doc)
    for item in overrides:
        item = item[2:] if item.startswith("--") else item
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        parts = key.replace("-", "_").split(".")
        node = doc
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {key!r} descends into a scalar")
        node[parts[-1]] = _parse_value(raw)
    return doc


def materialize(doc):
    """Validate ``doc`` and fill in every default; returns a new dict."""
    validate(doc)
    full = _merge(DEFAULTS, doc)
    s = full["solver"]
    if s["beta"] is None:
        s["beta"] = BETA_DEFAULT[s["algorithm"]]
    validate(full)
    return full


def resolve_path(value, base_dir):
    if value.startswith("builtin:"):
        return DATA_DIR / value.split(":", 1)[1]
    p = Path(value)
    return p if p.is_absolute() else Path(base_dir) / p


def load_config(path=None, overrides=()):
    """Read, override, validate and materialize a config file.

    Returns ``(config, base_dir)``. ``path=None`` starts from the defaults.
    """
    if path is None:
        doc, base = {}, Path.cwd()
    else:
        path = Path(path)
        try:
            doc = json.loads(path.read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file {path} not found") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
        base = path.parent
    if not isinstance(doc, dict):
        raise ConfigError("config root must be a JSON object")
    return materialize(apply_overrides(doc, overrides)), base
