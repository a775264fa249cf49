"""Run configuration: schema validation, object construction, digests.

Configs are JSON objects validated against per-subcommand schemas.  Unknown
keys are rejected; problems are reported with dotted paths.  The digest of the
validated config (defaults filled, keys sorted) ties every output file to the
exact run parameters.
"""

import hashlib
import json

import numpy as np

from .errors import ConfigError
from .moment_kernel import SpaceTimeGrid
from .noise_initial import Combination, DiracAtoms, density_from_samples, named_density
from .spde_solver import (
    DiffusionCoefficient,
    abs_sin_coefficient,
    constant_coefficient,
    custom_coefficient,
    pam_coefficient,
    sin_coefficient,
)
from .stable_kernel import StableParams

__all__ = ["validate_config", "config_digest", "build_measure", "build_rho",
           "build_params", "build_grid", "SCHEMAS"]

_MISSING = object()


class _Field:
    def __init__(self, kind, default=_MISSING, required=False, check=None, doc=""):
        self.kind = kind
        self.default = default
        self.required = required
        self.check = check
        self.doc = doc


def _is_number(v):
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def _validate_value(value, field, path, problems):
    kind = field.kind
    if kind == "number":
        if not _is_number(value):
            problems.append(f"{path}: expected a number")
            return None
        value = float(value)
    elif kind == "int":
        if not (isinstance(value, int) and not isinstance(value, bool)):
            problems.append(f"{path}: expected an integer")
            return None
    elif kind == "bool":
        if not isinstance(value, bool):
            problems.append(f"{path}: expected a boolean")
            return None
    elif kind == "string":
        if not isinstance(value, str):
            problems.append(f"{path}: expected a string")
            return None
    elif kind == "number_list":
        if not (isinstance(value, list) and all(_is_number(v) for v in value)):
            problems.append(f"{path}: expected a list of numbers")
            return None
        value = [float(v) for v in value]
    elif kind == "pair_list":
        ok = isinstance(value, list) and all(
            isinstance(v, list) and len(v) == 2 and all(_is_number(u) for u in v)
            for v in value
        )
        if not ok:
            problems.append(f"{path}: expected a list of [a, b] pairs")
            return None
        value = [[float(a), float(b)] for a, b in value]
    elif isinstance(kind, dict):  # nested schema
        value = _validate_obj(value, kind, path, problems)
    elif callable(kind):  # custom validator returning (value, None) or (None, msg)
        value, msg = kind(value, path)
        if msg:
            problems.append(msg)
            return None
    if field.check is not None and value is not None:
        msg = field.check(value)
        if msg:
            problems.append(f"{path}: {msg}")
            return None
    return value


def _validate_obj(obj, schema, path, problems):
    if not isinstance(obj, dict):
        problems.append(f"{path or '<root>'}: expected an object")
        return None
    out = {}
    for key in obj:
        if key not in schema:
            problems.append(f"{path + '.' if path else ''}{key}: unknown key")
    for key, field in schema.items():
        sub = f"{path + '.' if path else ''}{key}"
        if key in obj:
            val = _validate_value(obj[key], field, sub, problems)
            if val is not None or obj[key] is None:
                out[key] = val
        elif field.required:
            problems.append(f"{sub}: missing required key")
        elif field.default is not _MISSING:
            out[key] = field.default
    return out


def _alpha_check(v):
    if not (1.0 < v <= 2.0):
        return "alpha must lie in (1, 2]"
    return None


def _positive(v):
    return None if v > 0 else "must be positive"


def _nonneg_int(v):
    return None if v >= 0 else "must be nonnegative"


def _mu_schema_check(value, path):
    if not isinstance(value, dict):
        return None, f"{path}: expected an object"
    kind = value.get("kind")
    problems = []
    if kind == "dirac":
        out = _validate_obj(value, {
            "kind": _Field("string", required=True),
            "atoms": _Field("pair_list", required=True),
        }, path, problems)
    elif kind == "density":
        out = _validate_obj(value, {
            "kind": _Field("string", required=True),
            "expr_id": _Field("string"),
            "samples": _Field("string"),
            "params": _Field(lambda v, p: (v, None if isinstance(v, dict) else f"{p}: expected an object"), default={}),
        }, path, problems)
        if out is not None and not problems:
            if ("expr_id" in out) == ("samples" in out):
                problems.append(f"{path}: density needs exactly one of expr_id or samples")
    elif kind == "combination":
        parts = value.get("parts")
        if not isinstance(parts, list) or not parts:
            problems.append(f"{path}.parts: expected a nonempty list")
            out = None
        else:
            out = {"kind": "combination", "parts": []}
            extra = set(value) - {"kind", "parts"}
            for k in sorted(extra):
                problems.append(f"{path}.{k}: unknown key")
            for i, part in enumerate(parts):
                sub, msg = _mu_schema_check(part, f"{path}.parts[{i}]")
                if msg:
                    problems.append(msg)
                else:
                    out["parts"].append(sub)
    else:
        problems.append(f"{path}.kind: must be one of dirac|density|combination")
        out = None
    return out, problems[0] if problems else None


def _rho_schema_check(value, path):
    if not isinstance(value, dict):
        return None, f"{path}: expected an object"
    kind = value.get("kind")
    problems = []
    schemas = {
        "pam": {"kind": _Field("string", required=True),
                "lambda": _Field("number", default=1.0)},
        "const": {"kind": _Field("string", required=True),
                  "value": _Field("number", default=1.0)},
        "sin": {"kind": _Field("string", required=True),
                "scale": _Field("number", default=1.0)},
        "abs_sin": {"kind": _Field("string", required=True),
                    "scale": _Field("number", default=1.0)},
        "ramp_t": {"kind": _Field("string", required=True),
                   "offset": _Field("number", default=0.5)},
    }
    if kind not in schemas:
        return None, f"{path}.kind: must be one of {'|'.join(sorted(schemas))}"
    out = _validate_obj(value, schemas[kind], path, problems)
    return out, problems[0] if problems else None


_GRID_FIELDS = {
    "T": _Field("number", default=1.0, check=_positive),
    "dt": _Field("number", default=1.0 / 256, check=_positive),
    "dx": _Field("number", default=1.0 / 64, check=_positive),
    "L": _Field("number", default=8.0, check=_positive),
}

_PARAM_FIELDS = {
    "alpha": _Field("number", default=2.0, check=_alpha_check),
    "delta": _Field("number", default=0.0),
}

_RANGE = {
    "min": _Field("number", required=True),
    "max": _Field("number", required=True),
    "count": _Field("int", default=41, check=lambda v: None if v >= 2 else "need >= 2"),
}

SCHEMAS = {
    "kernel": {
        **_PARAM_FIELDS,
        "x_half_width": _Field("number", default=None),
        "n_points": _Field("int", default=None),
        "fft_size": _Field("int", default=None),
        "t_list": _Field("number_list", default=[0.1, 0.5, 1.0]),
        "x": _Field(_RANGE, default={"min": -5.0, "max": 5.0, "count": 201}),
        "cache": _Field("string", default=None),
    },
    "mittag": {
        "a": _Field("number", required=True, check=_positive),
        "b": _Field("number", required=True, check=_positive),
        "z": _Field("number", required=True),
    },
    "gronwall": {
        "alpha": _Field("number", default=2.0, check=_alpha_check),
        "lambda": _Field("number", default=1.0, check=_positive),
        "T": _Field("number", default=1.0, check=_positive),
        "n_steps": _Field("int", default=256, check=lambda v: None if v >= 2 else "need >= 2"),
        "beta": _Field(lambda v, p: _beta_schema_check(v, p), default={"kind": "const", "value": 1.0}),
        "mode": _Field("string", default="standard",
                       check=lambda v: None if v in ("standard", "window") else "must be standard|window"),
        "epsilon": _Field("number", default=None),
    },
    "moments": {
        **_PARAM_FIELDS,
        "lambda": _Field("number", default=1.0, check=_positive),
        "T": _Field("number", default=0.5, check=_positive),
        "dt": _Field("number", default=1.0 / 256, check=_positive),
        "dx": _Field("number", default=1.0 / 64, check=_positive),
        "L": _Field("number", default=3.0, check=_positive),
        "n_terms": _Field("int", default=12, check=lambda v: None if v >= 1 else "need >= 1"),
        "probes": _Field("pair_list", default=[[0.25, 0.0], [0.5, 0.0], [0.5, 0.5]]),
    },
    "simulate": {
        **_PARAM_FIELDS,
        **_GRID_FIELDS,
        "rho": _Field(_rho_schema_check, default={"kind": "pam", "lambda": 1.0}),
        "mu": _Field(_mu_schema_check, default={"kind": "dirac", "atoms": [[0.0, 1.0]]}),
        "paths": _Field("int", default=100, check=_positive),
        "seed": _Field("int", default=12345, check=_nonneg_int),
        "drift": _Field({
            "n": _Field("int", required=True, check=_positive),
            "points": _Field("number_list", required=True),
            "z": _Field("number_list", required=True),
        }, default=None),
        "positivity_clip": _Field("bool", default=False),
        "observable": _Field(lambda v, p: _observable_schema_check(v, p),
                             default={"kind": "point_values", "t": 0.5, "xs": [0.0]}),
        "malliavin": _Field({
            "points": _Field("number_list", required=True),
            "t": _Field("number", required=True, check=_positive),
            "window_t": _Field("number_list", required=True),
            "window_x": _Field("number_list", required=True),
            "stride": _Field("number_list", default=[4, 4]),
        }, default=None),
        "format": _Field("string", default="csv",
                         check=lambda v: None if v in ("csv", "binary") else "must be csv|binary"),
    },
    "psi": {
        **_PARAM_FIELDS,
        "T": _Field("number", default=1.0, check=_positive),
        "n_list": _Field("number_list", default=[1, 2, 3]),
        "points": _Field("number_list", default=[0.0]),
        "t": _Field(_RANGE, default={"min": 0.45, "max": 1.0, "count": 56}),
        "x": _Field(_RANGE, default={"min": -2.0, "max": 2.0, "count": 81}),
    },
    "t0": {
        **_PARAM_FIELDS,
        "rho": _Field(_rho_schema_check, default={"kind": "pam", "lambda": 1.0}),
        "mu": _Field(_mu_schema_check, default={"kind": "dirac", "atoms": [[0.0, 1.0]]}),
        "s_grid": _Field(_RANGE, default={"min": 1.0 / 64, "max": 1.0, "count": 64}),
        "y_grid": _Field(_RANGE, default={"min": -4.0, "max": 4.0, "count": 129}),
        "zero_tol": _Field("number", default=1e-12, check=_positive),
    },
}

# statistics subcommands share the simulate run keys
_RUN_KEYS = {k: v for k, v in SCHEMAS["simulate"].items()
             if k not in ("observable", "malliavin", "format")}

SCHEMAS["density"] = {
    **_RUN_KEYS,
    "observable": _Field(lambda v, p: _observable_schema_check(v, p),
                         default={"kind": "point_values", "t": 0.5, "xs": [0.0]}),
    "component": _Field("int", default=0, check=_nonneg_int),
    "bandwidth": _Field("string", default="silverman"),
}
SCHEMAS["smallball"] = {
    **_RUN_KEYS,
    "window": _Field("number_list", default=[-0.5, 0.5]),
    "t": _Field("number", default=0.5, check=_positive),
    "eps_list": _Field("number_list", default=[1e-1, 10 ** -1.5, 1e-2, 10 ** -2.5, 1e-3]),
}
SCHEMAS["holder"] = {
    **_RUN_KEYS,
    "x": _Field("number", default=0.0),
    "t_base": _Field("number", default=0.25, check=_positive),
    "lags": _Field("number_list", default=[2.0 ** -k for k in range(9, 4, -1)]),
}


def _beta_schema_check(value, path):
    if not isinstance(value, dict):
        return None, f"{path}: expected an object"
    kind = value.get("kind")
    problems = []
    if kind == "const":
        out = _validate_obj(value, {
            "kind": _Field("string", required=True),
            "value": _Field("number", default=1.0),
        }, path, problems)
    elif kind == "samples":
        out = _validate_obj(value, {
            "kind": _Field("string", required=True),
            "values": _Field("number_list", required=True),
        }, path, problems)
    else:
        return None, f"{path}.kind: must be const|samples"
    return out, problems[0] if problems else None


def _observable_schema_check(value, path):
    if not isinstance(value, dict):
        return None, f"{path}: expected an object"
    kind = value.get("kind")
    problems = []
    if kind == "point_values":
        out = _validate_obj(value, {
            "kind": _Field("string", required=True),
            "t": _Field("number", required=True, check=_positive),
            "xs": _Field("number_list", required=True),
        }, path, problems)
    elif kind == "infimum":
        out = _validate_obj(value, {
            "kind": _Field("string", required=True),
            "t": _Field("number", required=True, check=_positive),
            "window": _Field("number_list", required=True),
        }, path, problems)
    elif kind == "field_stats":
        out = _validate_obj(value, {"kind": _Field("string", required=True)}, path, problems)
    else:
        return None, f"{path}.kind: must be point_values|infimum|field_stats"
    return out, problems[0] if problems else None


def validate_config(subcommand, obj):
    """Validate and normalize a config dict; raises ConfigError on problems."""
    if subcommand not in SCHEMAS:
        raise ConfigError([f"unknown subcommand {subcommand!r}"])
    problems = []
    out = _validate_obj(obj, SCHEMAS[subcommand], "", problems)
    if out is not None and subcommand in ("simulate", "density", "smallball", "holder", "t0", "kernel", "moments", "psi"):
        alpha = out.get("alpha", 2.0)
        delta = out.get("delta", 0.0)
        if _is_number(alpha) and _is_number(delta) and 1.0 < alpha <= 2.0:
            if abs(delta) > 2.0 - alpha + 1e-15:
                problems.append("delta: |delta| must not exceed 2 - alpha")
    if problems:
        raise ConfigError(problems)
    return out


def config_digest(cfg):
    """Stable short digest of a normalized config."""
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def build_params(cfg):
    return StableParams(cfg["alpha"], cfg.get("delta", 0.0))


def build_grid(cfg):
    return SpaceTimeGrid.from_extents(T=cfg["T"], L=cfg["L"], dt=cfg["dt"], dx=cfg["dx"])


def build_measure(cfg):
    kind = cfg["kind"]
    if kind == "dirac":
        return DiracAtoms(tuple((a, m) for a, m in cfg["atoms"]))
    if kind == "density":
        if "samples" in cfg and cfg.get("samples"):
            return density_from_samples(cfg["samples"])
        return named_density(cfg["expr_id"], **cfg.get("params", {}))
    if kind == "combination":
        return Combination(tuple(build_measure(p) for p in cfg["parts"]))
    raise ConfigError([f"mu.kind: unsupported {kind!r}"])


def build_rho(cfg):
    kind = cfg["kind"]
    if kind == "pam":
        return pam_coefficient(cfg["lambda"])
    if kind == "const":
        return constant_coefficient(cfg["value"])
    if kind == "sin":
        return sin_coefficient(cfg["scale"])
    if kind == "abs_sin":
        return abs_sin_coefficient(cfg["scale"])
    if kind == "ramp_t":
        off = cfg["offset"]
        return custom_coefficient(
            lambda t, x, z: np.maximum(t - off, 0.0) * np.ones_like(np.asarray(z, float)),
            lip=1.0,
            growth_vv=1.0,
            label=f"ramp_t({off})",
        )
    raise ConfigError([f"rho.kind: unsupported {kind!r}"])
