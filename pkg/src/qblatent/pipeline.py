"""End-to-end fitting: quadrature and model construction, sampling, summaries."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import prior as _prior
from .analysis import DensityGrid, Grid, default_grid, demean_draws, density_error, posterior_mean_density
from .diagnostics import Diagnostics, diagnostics
from .likelihood import DeconvModel, FactorModel, QuasiPosterior, RepMeasModel
from .mixture import DEFAULT_FLOOR
from .quadrature import DEFAULTS, build_box, build_sphere_line
from .sampler import HMCConfig, PosteriorChain, find_initial, run_chains


@dataclass
class LikelihoodSettings:
    """Quadrature and model options; ``None`` sizes fall back to per-dimension defaults."""

    T: float = 2.0
    m: int | None = None
    M: int | None = None
    q: int | None = None
    radial: int | None = None
    boundary: bool | None = None
    symmetrized: bool = False
    factor_target: int | str = 1
    floor: float = DEFAULT_FLOOR

    def to_dict(self) -> dict:
        return {
            "T": self.T, "m": self.m, "M": self.M, "q": self.q, "radial": self.radial,
            "boundary": self.boundary, "symmetrized": self.symmetrized,
            "factor_target": self.factor_target, "floor": self.floor,
        }


def suggested_T(n: int) -> float:
    """Rate-schedule value ``sqrt(log n) * sqrt(log log n)``; informational only."""
    if n < 16:
        return float("nan")
    return math.sqrt(math.log(n)) * math.sqrt(math.log(math.log(n)))


def _defaults(d):
    return DEFAULTS.get(d, {"m": max(4, int(round(10**7 ** (1 / d) / 4)))})


def build_quadrature(settings: LikelihoodSettings, d: int, boundary: bool = False):
    dflt = _defaults(d)
    if boundary:
        return build_sphere_line(settings.T, settings.M or dflt.get("M", 64), settings.q or dflt.get("q", 16),
                                 d, radial=settings.radial)
    return build_box(settings.T, settings.m or dflt["m"], d)


def build_model(kind: str, data: dict, settings: LikelihoodSettings, loadings=None):
    """Model over the given datasets.

    ``data`` holds ``y`` and ``eps`` (deconv), ``y1`` and ``y2`` (repmeas) or
    ``y`` (factor, with ``loadings``).
    """
    if kind == "deconv":
        y = np.asarray(data["y"], dtype=float)
        d = 1 if y.ndim == 1 else y.shape[1]
        return DeconvModel.from_data(y, data["eps"], build_quadrature(settings, d))
    if kind == "repmeas":
        y1 = np.asarray(data["y1"], dtype=float)
        d = 1 if y1.ndim == 1 else y1.shape[1]
        boundary = settings.boundary if settings.boundary is not None else d > 1
        quad = build_quadrature(settings, d, boundary)
        return RepMeasModel.from_data(y1, data["y2"], quad, symmetrized=settings.symmetrized,
                                      boundary=boundary, floor=settings.floor)
    if kind == "factor":
        if loadings is None:
            raise ValueError("factor models need loadings")
        y = np.asarray(data["y"], dtype=float)
        quad = build_quadrature(settings, y.shape[1])
        return FactorModel.from_data(y, loadings, quad, target=settings.factor_target, floor=settings.floor)
    raise ValueError(f"unknown model kind {kind!r}")


def proxy_sample(kind: str, data: dict, loadings=None, block: int = 0) -> np.ndarray:
    """Observed sample whose spread sets the default density grid."""
    if kind == "deconv":
        return np.asarray(data["y"], dtype=float)
    if kind == "repmeas":
        return np.asarray(data["y1"], dtype=float)
    y = np.asarray(data["y"], dtype=float)
    col = int(np.argmax(np.abs(np.asarray(loadings)[:, block])))
    return y[:, col]


@dataclass
class FitResult:
    posterior: QuasiPosterior
    chains: list[PosteriorChain]
    diagnostics: Diagnostics
    elapsed: float
    draws: list = field(default_factory=list)  # per kept draw, one MixtureParams per block

    def block_draws(self, block: int = 0):
        return [d[block] for d in self.draws]


def map_initial(qp: QuasiPosterior, draw_init, rng, starts: int = 8, maxiter: int = 500) -> np.ndarray:
    """Best local minimum of the negative log quasi-posterior over prior-draw starts.

    Lets chains begin inside the dominant basin when the quasi-posterior is
    multimodal and prior draws tend to settle in a poor local mode.
    """
    from scipy.optimize import minimize

    best, best_val = None, np.inf
    for _ in range(starts):
        x0 = find_initial(qp, draw_init, rng)
        with np.errstate(over="ignore", invalid="ignore"):
            res = minimize(qp.neg_loglik_grad, x0, jac=True, method="L-BFGS-B",
                           options={"maxiter": maxiter})
        x = res.x if np.isfinite(res.fun) else x0
        val = qp.neg_loglik_grad(x)[0]
        if val < best_val:
            best, best_val = x, val
    return best


def fit_model(model, spec: _prior.PriorSpec, hmc: HMCConfig, init=None, map_starts: int = 8) -> FitResult:
    """Sample the quasi-posterior.

    ``init`` is ``None`` or ``"prior"`` (each chain starts from a prior draw),
    ``"map"`` (all chains start from the best of ``map_starts`` local optima)
    or an explicit unconstrained state.
    """
    qp = QuasiPosterior(model, spec)

    def draw_init(rng):
        return np.concatenate([_prior.sample_prior_state(spec, rng) for _ in range(qp.n_blocks)])

    t0 = time.perf_counter()
    if isinstance(init, str):
        if init == "map":
            init = map_initial(qp, draw_init, np.random.default_rng([hmc.seed, 2]), starts=map_starts)
        elif init == "prior":
            init = None
        else:
            raise ValueError(f"unknown init strategy {init!r}")
    chains = run_chains(qp, hmc, init=init, draw_init=draw_init)
    elapsed = time.perf_counter() - t0
    draws = [qp.constrain(x) for c in chains for x in c.draws]
    return FitResult(qp, chains, diagnostics(chains), elapsed, draws)


def density_summary(result: FitResult, grid: Grid, block: int = 0, demean: bool = False,
                    levels=(0.9,), truth=None):
    """Posterior-mean density of one latent block, optionally demeaned, with errors."""
    draws = result.block_draws(block)
    if demean:
        draws = demean_draws(draws)
    est = posterior_mean_density(draws, grid, levels=levels)
    err = density_error(est, truth) if truth is not None else None
    return est, err


def factor_block(settings: LikelihoodSettings) -> tuple[int, int]:
    """(posterior block index, 0-based factor index) reported for a factor fit."""
    if settings.factor_target == "joint":
        return 0, 0
    return 0, int(settings.factor_target) - 1


def default_density_grid(kind, data, loadings=None, settings=None, points=512) -> Grid:
    block = factor_block(settings)[1] if kind == "factor" and settings is not None else 0
    return default_grid(proxy_sample(kind, data, loadings, block), points=points)


__all__ = [
    "LikelihoodSettings", "FitResult", "DensityGrid", "build_model", "build_quadrature",
    "fit_model", "map_initial", "density_summary", "suggested_T", "default_density_grid", "proxy_sample",
]
