"""JSON run configuration: schema, defaults, validation and hashing."""

from __future__ import annotations

import copy
import hashlib
import json
import os
from dataclasses import dataclass
from pathlib import Path

import jsonschema
import numpy as np

from .ecf import load_csv
from .errors import ConfigError
from .pipeline import LikelihoodSettings
from .prior import InverseGamma, LKJLogNormal, PriorSpec, empirical_bayes
from .sampler import HMCConfig
from .simulate import ErrorSpec, ScenarioSpec

SCHEMA_VERSION = "1.0"
OUT_DIR_ENV = "QBLATENT_OUT_DIR"

_num = {"type": "number"}
_pos = {"type": "number", "exclusiveMinimum": 0}
_posint = {"type": "integer", "minimum": 1}
_matrix = {"type": "array", "items": {"type": "array", "items": _num}}
_vector_or_matrix = {"oneOf": [_num, {"type": "array", "items": _num}, _matrix]}

_latent = {
    "oneOf": [
        {"type": "string"},
        {
            "type": "object",
            "required": ["weights", "atoms", "covariance"],
            "properties": {"weights": {"type": "array"}, "atoms": {"type": "array"},
                           "covariance": {"oneOf": [_num, _matrix]}},
        },
    ]
}

SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["model"],
    "additionalProperties": False,
    "properties": {
        "schema_version": {"type": "string"},
        "model": {
            "type": "object",
            "required": ["kind"],
            "additionalProperties": False,
            "properties": {
                "kind": {"enum": ["deconv", "repmeas", "factor"]},
                "data": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {k: {"type": "string"} for k in ("y", "eps", "y1", "y2")},
                },
                "scenario": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {
                        "latent": {"oneOf": [_latent, {"type": "array", "items": _latent}]},
                        "errors": {
                            "type": "array",
                            "items": {
                                "type": "object",
                                "additionalProperties": False,
                                "properties": {"kind": {"enum": ["gaussian", "laplace"]}, "scale": _pos},
                            },
                        },
                        "n": {"type": "integer", "minimum": 10},
                        "seed": {"type": "integer", "minimum": 0},
                        "n_grid": {"type": "array", "items": {"type": "integer", "minimum": 10}, "minItems": 1},
                        "seeds": {"type": "array", "items": {"type": "integer", "minimum": 0}, "minItems": 1},
                        "aux_m": {"type": ["integer", "null"], "minimum": 1},
                        "d": _posint,
                    },
                },
                "header": {"type": "boolean"},
            },
            "oneOf": [{"required": ["data"]}, {"required": ["scenario"]}],
        },
        "prior": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "K": _posint,
                "beta": _pos,
                "base_mean": _vector_or_matrix,
                "base_cov": _vector_or_matrix,
                "empirical_bayes": {"type": "boolean"},
                "cov_prior": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {
                        "kind": {"enum": ["inverse_gamma", "lkj_lognormal"]},
                        "shape": _pos, "scale": _pos, "eta": _pos, "loc": _num,
                    },
                },
            },
        },
        "likelihood": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "T": _pos,
                "m": {"type": ["integer", "null"], "minimum": 2},
                "M": {"type": ["integer", "null"], "minimum": 8},
                "q": {"type": ["integer", "null"], "minimum": 4},
                "radial": {"type": ["integer", "null"], "minimum": 2},
                "boundary": {"type": ["boolean", "null"]},
                "symmetrized": {"type": "boolean"},
                "factor_target": {"oneOf": [_posint, {"const": "joint"}]},
                "loadings": _matrix,
                "loadings_path": {"type": "string"},
                "floor": _pos,
            },
        },
        "sampler": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "warmup": {"type": "integer", "minimum": 0},
                "draws": _posint,
                "target_accept": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                "max_depth": _posint,
                "max_energy_error": _pos,
                "adapt_mass": {"type": "boolean"},
                "seed": {"type": "integer", "minimum": 0},
                "chains": _posint,
                "init": {
                    "oneOf": [
                        {"type": "null"},
                        {"type": "string", "enum": ["prior", "map"]},
                        {"type": "array", "items": _num},
                    ]
                },
                "map_starts": _posint,
                "metric": {"type": "string", "enum": ["diag", "dense"]},
            },
        },
        "output": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "dir": {"type": "string"},
                "grid_points": {"type": "integer", "minimum": 2},
                "band_level": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                "rhat_threshold": _pos,
                "rhat_gate": {"type": "boolean"},
            },
        },
    },
}

DEFAULTS = {
    "schema_version": SCHEMA_VERSION,
    "prior": {"K": 30, "beta": 1.0, "empirical_bayes": False},
    "likelihood": {"T": 2.0, "m": None, "M": None, "q": None, "radial": None, "boundary": None,
                   "symmetrized": False, "factor_target": 1, "floor": 1e-12},
    "sampler": {"warmup": 1000, "draws": 1000, "target_accept": 0.8, "max_depth": 10,
                "max_energy_error": 1000.0, "adapt_mass": True, "seed": 0, "chains": 4, "init": None,
                "map_starts": 8, "metric": "diag"},
    "output": {"dir": "qblatent-out", "grid_points": 512, "band_level": 0.9,
               "rhat_threshold": 1.05, "rhat_gate": False},
}

_SCENARIO_DEFAULTS = {"latent": "bimodal", "errors": [{"kind": "gaussian", "scale": 1.0}],
                      "n": 1000, "seed": 0, "aux_m": None, "d": 1}

_REQUIRED_DATA = {"deconv": ("y", "eps"), "repmeas": ("y1", "y2"), "factor": ("y",)}


def _path_of(err) -> str:
    parts = [str(p) for p in err.absolute_path]
    return ".".join(parts) if parts else "<root>"


def _merge(base, extra):
    out = copy.deepcopy(base)
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def validate(raw: dict) -> None:
    """Raise :class:`ConfigError` naming the first offending field."""
    validator = jsonschema.Draft202012Validator(SCHEMA)
    errors = sorted(validator.iter_errors(raw), key=lambda e: (len(list(e.absolute_path)), e.message))
    if errors:
        e = max(errors, key=lambda e: len(list(e.absolute_path)))
        raise ConfigError(_path_of(e), e.message)


def _dim_default_cov(d):
    return (4.0 * np.eye(d)).tolist()


@dataclass
class RunConfig:
    """Validated configuration with every default filled in."""

    raw: dict
    base_dir: Path

    @property
    def kind(self) -> str:
        return self.raw["model"]["kind"]

    @property
    def model(self) -> dict:
        return self.raw["model"]

    @property
    def has_scenario(self) -> bool:
        return "scenario" in self.raw["model"]

    @property
    def out_dir(self) -> Path:
        return Path(self.raw["output"]["dir"])

    def materialized(self) -> dict:
        """The full configuration as written into reports, output location excluded."""
        body = copy.deepcopy(self.raw)
        body["output"].pop("dir", None)
        return body

    def hash(self) -> str:
        """First 12 hex digits of the SHA-256 of the canonical config, output dir excluded."""
        body = copy.deepcopy(self.raw)
        body["output"].pop("dir", None)
        text = json.dumps(body, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode("utf-8")).hexdigest()[:12]

    def _resolve(self, p) -> Path:
        p = Path(p)
        return p if p.is_absolute() else self.base_dir / p

    # -- parsed blocks -----------------------------------------------------

    def likelihood(self) -> LikelihoodSettings:
        lk = self.raw["likelihood"]
        return LikelihoodSettings(
            T=float(lk["T"]), m=lk["m"], M=lk["M"], q=lk["q"], radial=lk["radial"],
            boundary=lk["boundary"], symmetrized=lk["symmetrized"],
            factor_target=lk["factor_target"], floor=float(lk["floor"]),
        )

    def hmc(self) -> HMCConfig:
        s = self.raw["sampler"]
        return HMCConfig(
            warmup=s["warmup"], draws=s["draws"], target_accept=s["target_accept"],
            max_depth=s["max_depth"], max_energy_error=s["max_energy_error"],
            adapt_mass=s["adapt_mass"], seed=s["seed"], chains=s["chains"], metric=s["metric"],
        )

    def loadings(self):
        lk = self.raw["likelihood"]
        if "loadings" in lk:
            return np.asarray(lk["loadings"], dtype=float)
        if "loadings_path" in lk:
            return load_csv(self._resolve(lk["loadings_path"]), header=self.model.get("header", False))
        if self.has_scenario and self.kind == "factor":
            return self.scenario().loadings
        return None

    def scenario(self) -> ScenarioSpec:
        sc = _merge(_SCENARIO_DEFAULTS, self.model.get("scenario", {}))
        loadings = None
        lk = self.raw["likelihood"]
        if self.kind == "factor":
            if "loadings" in lk:
                loadings = lk["loadings"]
            elif "loadings_path" in lk:
                loadings = load_csv(self._resolve(lk["loadings_path"]))
            else:
                loadings = [[1.0, 1.0, 0.0], [1.0, 0.0, 1.0]]
            if isinstance(sc["latent"], str) and "latent" not in self.model.get("scenario", {}):
                sc["latent"] = ["bimodal"] + ["normal"] * (np.asarray(loadings).shape[1] - 1)
        try:
            return ScenarioSpec(
                kind=self.kind, latent=sc["latent"], errors=[ErrorSpec(**e) for e in sc["errors"]],
                n_grid=sc.get("n_grid", [sc["n"]]), loadings=loadings,
                seeds=sc.get("seeds", [sc["seed"]]), aux_m=sc["aux_m"], d=sc["d"],
            )
        except (ValueError, TypeError, KeyError) as exc:
            raise ConfigError("model.scenario", str(exc)) from None

    def data_paths(self) -> dict:
        return {k: self._resolve(v) for k, v in self.model.get("data", {}).items()}

    def load_data(self) -> dict:
        """Read every dataset named in ``model.data`` (I/O problems raise OSError/ValueError)."""
        header = self.model.get("header", False)
        return {k: load_csv(p, header=header) for k, p in self.data_paths().items()}

    def prior(self, data: dict | None = None, d: int = 1) -> PriorSpec:
        p = self.raw["prior"]
        base_mean = p.get("base_mean", [0.0] * d)
        base_cov = p.get("base_cov", _dim_default_cov(d))
        cp = p.get("cov_prior")
        cov_prior = None
        if cp is not None:
            kind = cp.get("kind", "inverse_gamma" if d == 1 else "lkj_lognormal")
            if kind == "inverse_gamma":
                cov_prior = InverseGamma(cp.get("shape", 2.0), cp.get("scale", 1.0))
            else:
                cov_prior = LKJLogNormal(cp.get("eta", 2.0), cp.get("loc", 0.0), cp.get("scale", 1.0))
        try:
            spec = PriorSpec(p["K"], p["beta"], np.atleast_1d(base_mean), np.asarray(base_cov, dtype=float),
                             cov_prior)
        except ValueError as exc:
            raise ConfigError("prior", str(exc)) from None
        if spec.d != d:
            raise ConfigError("prior.base_mean", f"dimension {spec.d} does not match data dimension {d}")
        if p["empirical_bayes"] and data is not None:
            spec = empirical_bayes(spec, data)
        return spec


def from_dict(raw: dict, base_dir=".", overrides: dict | None = None) -> RunConfig:
    validate(raw)
    full = _merge(DEFAULTS, raw)
    for dotted, value in (overrides or {}).items():
        if value is None:
            continue
        node = full
        keys = dotted.split(".")
        for k in keys[:-1]:
            node = node.setdefault(k, {})
        node[keys[-1]] = value
    validate(full)
    cfg = RunConfig(full, Path(base_dir))
    model = full["model"]
    if "data" in model:
        missing = [k for k in _REQUIRED_DATA[cfg.kind] if k not in model["data"]]
        if missing:
            raise ConfigError(f"model.data.{missing[0]}", f"required for kind {cfg.kind!r}")
        for k, p in cfg.data_paths().items():
            if not p.exists():
                raise ConfigError(f"model.data.{k}", f"file not found: {p}")
    lk = full["likelihood"]
    if cfg.kind == "factor" and "data" in model and "loadings" not in lk and "loadings_path" not in lk:
        raise ConfigError("likelihood.loadings", "factor models need loadings or loadings_path")
    if "loadings_path" in lk and not cfg._resolve(lk["loadings_path"]).exists():
        raise ConfigError("likelihood.loadings_path", f"file not found: {lk['loadings_path']}")
    return cfg


def load(path, overrides: dict | None = None) -> RunConfig:
    """Parse and validate a config file; the output directory honours ``QBLATENT_OUT_DIR``.

    Precedence for the output directory is the ``output.dir`` override
    (the ``--out`` flag), then the environment variable, then the file.
    """
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError("<file>", f"cannot read {p}: {exc.strerror or exc}") from None
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError("<file>", f"invalid JSON at line {exc.lineno}: {exc.msg}") from None
    if not isinstance(raw, dict):
        raise ConfigError("<root>", "config must be a JSON object")
    overrides = dict(overrides or {})
    env = os.environ.get(OUT_DIR_ENV)
    if env and overrides.get("output.dir") is None:
        overrides["output.dir"] = env
    return from_dict(raw, base_dir=p.parent, overrides=overrides)
