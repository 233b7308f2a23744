"""Seeded synthetic data with known latent densities, and sample-size sweeps."""

from __future__ import annotations

import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from .mixture import MixtureParams, demean, density, mixture_mean
from .mixture import sample as sample_mixture

NAMED_LATENTS = {
    "normal": MixtureParams([1.0], [0.0], 1.0),
    "bimodal": MixtureParams([0.5, 0.5], [-2.0, 2.0], 1.0),
}


@dataclass(frozen=True)
class ErrorSpec:
    """Independent coordinates with Gaussian (sd = scale) or Laplace (b = scale) law."""

    kind: str = "gaussian"
    scale: float = 1.0

    def __post_init__(self):
        if self.kind not in ("gaussian", "laplace"):
            raise ValueError(f"unknown error law {self.kind!r}")
        if not self.scale > 0:
            raise ValueError("error scale must be positive")

    def draw(self, rng, size):
        if self.kind == "gaussian":
            return rng.normal(0.0, self.scale, size)
        return rng.laplace(0.0, self.scale, size)

    def cf(self, t):
        t = np.asarray(t, dtype=float)
        t2 = np.sum(t * t, axis=-1) if t.ndim > 1 else t * t
        if self.kind == "gaussian":
            return np.exp(-0.5 * self.scale**2 * t2).astype(complex)
        if t.ndim > 1:
            return np.prod(1.0 / (1.0 + self.scale**2 * t**2), axis=-1).astype(complex)
        return (1.0 / (1.0 + self.scale**2 * t2)).astype(complex)

    @property
    def regime(self) -> tuple[str, float]:
        """Ill-posedness class and its exponent: Laplace decays polynomially, Gaussian exponentially."""
        return ("mild", 2.0) if self.kind == "laplace" else ("severe", 2.0)

    def to_dict(self):
        return {"kind": self.kind, "scale": self.scale}


def resolve_latent(spec) -> MixtureParams:
    if isinstance(spec, MixtureParams):
        return spec
    if isinstance(spec, str):
        try:
            return NAMED_LATENTS[spec]
        except KeyError:
            raise ValueError(f"unknown latent density {spec!r}; known: {sorted(NAMED_LATENTS)}") from None
    return MixtureParams.from_dict(spec)


@dataclass
class ScenarioSpec:
    kind: str
    latent: object = "bimodal"
    errors: list = field(default_factory=lambda: [ErrorSpec()])
    n_grid: list = field(default_factory=lambda: [1000])
    loadings: np.ndarray | None = None
    seeds: list = field(default_factory=lambda: [0])
    aux_m: int | None = None
    d: int = 1

    def __post_init__(self):
        if self.kind not in ("deconv", "repmeas", "factor"):
            raise ValueError(f"unknown model kind {self.kind!r}")
        self.errors = [e if isinstance(e, ErrorSpec) else ErrorSpec(**e) for e in self.errors]
        if any(n < 10 for n in self.n_grid):
            raise ValueError("every sample size must be at least 10")
        if self.kind == "factor":
            if self.loadings is None:
                raise ValueError("factor scenarios need loadings")
            self.loadings = np.asarray(self.loadings, dtype=float)
            lat = self.latent if isinstance(self.latent, (list, tuple)) else None
            if lat is None or len(lat) != self.loadings.shape[1]:
                raise ValueError("factor scenarios need one latent spec per loading column")
        if self.kind == "repmeas" and len(self.errors) == 1:
            self.errors = self.errors * 2

    def latent_params(self):
        if self.kind == "factor":
            return [resolve_latent(s) for s in self.latent]
        p = resolve_latent(self.latent)
        if p.d == 1 and self.d > 1:
            raise ValueError("latent dimension does not match d")
        return p

    def to_dict(self) -> dict:
        lat = self.latent
        if self.kind == "factor":
            lat = [resolve_latent(s).to_dict() if not isinstance(s, str) else s for s in lat]
        elif not isinstance(lat, str):
            lat = resolve_latent(lat).to_dict()
        out = {
            "kind": self.kind,
            "latent": lat,
            "errors": [e.to_dict() for e in self.errors],
            "n_grid": list(self.n_grid),
            "seeds": list(self.seeds),
            "aux_m": self.aux_m,
            "d": self.d,
        }
        if self.loadings is not None:
            out["loadings"] = self.loadings.tolist()
        return out


def bimodal_factor_scenario(n_grid=(1000,), seeds=(0,)) -> ScenarioSpec:
    """Two noisy measurements of a bimodal factor, as a three-factor model."""
    return ScenarioSpec(
        kind="factor",
        latent=["bimodal", "normal", "normal"],
        n_grid=list(n_grid),
        loadings=np.array([[1.0, 1.0, 0.0], [1.0, 0.0, 1.0]]),
        seeds=list(seeds),
    )


def _n(spec, n):
    return spec.n_grid[0] if n is None else int(n)


def _truth(p: MixtureParams):
    return lambda x: density(p, x)


def gen_deconv(spec: ScenarioSpec, seed: int, n: int | None = None):
    """``Y = X + eps`` with an independent auxiliary error sample of size ``aux_m`` (default n)."""
    n = _n(spec, n)
    rng = np.random.default_rng(seed)
    p = spec.latent_params()
    err = spec.errors[0]
    x = sample_mixture(p, n, rng)
    y = x + err.draw(rng, x.shape)
    m = spec.aux_m or n
    aux = err.draw(rng, (m, p.d))
    return y, aux, _truth(p)


def gen_repmeas(spec: ScenarioSpec, seed: int, n: int | None = None):
    """Two measurements sharing each row's latent draw, with independent errors."""
    n = _n(spec, n)
    rng = np.random.default_rng(seed)
    p = spec.latent_params()
    x = sample_mixture(p, n, rng)
    y1 = x + spec.errors[0].draw(rng, x.shape)
    y2 = x + spec.errors[1].draw(rng, x.shape)
    return y1, y2, _truth(p)


def gen_factor(spec: ScenarioSpec, seed: int, n: int | None = None):
    """``Y = A X`` with factors demeaned in sample; returns ``(Y, truths, shifts)``.

    A latent law with nonzero mean is centred (with a warning) before
    sampling; ``shifts`` records the in-sample means removed from each factor.
    """
    n = _n(spec, n)
    rng = np.random.default_rng(seed)
    params = []
    for k, p in enumerate(spec.latent_params()):
        if p.d != 1:
            raise ValueError("factors must be univariate")
        if abs(float(mixture_mean(p)[0])) > 1e-12:
            warnings.warn(f"factor {k + 1} latent law has nonzero mean; demeaning it", stacklevel=2)
            p = demean(p)
        params.append(p)
    X = np.column_stack([sample_mixture(p, n, rng)[:, 0] for p in params])
    shifts = X.mean(axis=0)
    X = X - shifts
    Y = X @ spec.loadings.T
    return Y, [_truth(p) for p in params], shifts


@dataclass
class ExperimentReport:
    rows: list
    scenario: dict

    def medians(self, key="l2") -> dict:
        out = {}
        for n in sorted({r["n"] for r in self.rows}):
            vals = [r[key] for r in self.rows if r["n"] == n and r["status"] == "ok"]
            out[n] = float(np.median(vals)) if vals else float("nan")
        return out

    def trend(self, key="l2") -> dict:
        med = self.medians(key)
        ns = sorted(med)
        first, last = med[ns[0]], med[ns[-1]]
        return {
            "medians": {str(n): v for n, v in med.items()},
            "decreasing": bool(len(ns) > 1 and last < first),
            "ratio_last_first": last / first if first else float("nan"),
        }

    def to_dict(self) -> dict:
        return {"scenario": self.scenario, "cells": self.rows, "trend": self.trend()}


CSV_COLUMNS = ("model", "n", "seed", "l2", "linf", "rhat_max", "divergences", "wall_time", "status")


def run_experiment(scenario: ScenarioSpec, fit_cell, log=None) -> ExperimentReport:
    """Fit every (n, seed) cell with ``fit_cell(scenario, n, seed) -> dict``.

    ``fit_cell`` returns at least ``l2``, ``linf``, ``rhat_max`` and
    ``divergences``. A cell that raises is recorded with its error and the
    sweep continues.
    """
    rows = []
    for n in scenario.n_grid:
        for seed in scenario.seeds:
            t0 = time.perf_counter()
            row = {"model": scenario.kind, "n": int(n), "seed": int(seed)}
            try:
                res = fit_cell(scenario, n, seed)
                row.update({k: res[k] for k in ("l2", "linf", "rhat_max", "divergences")})
                row["status"] = "ok"
            except Exception as exc:  # a failed cell must not stop the sweep
                row.update({"l2": float("nan"), "linf": float("nan"), "rhat_max": float("nan"),
                            "divergences": 0, "status": f"error: {type(exc).__name__}: {exc}"})
            row["wall_time"] = time.perf_counter() - t0
            rows.append(row)
            if log:
                log(row)
    return ExperimentReport(rows, scenario.to_dict())
