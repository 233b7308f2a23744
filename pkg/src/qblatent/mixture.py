"""Finite Gaussian mixtures with a shared covariance.

A mixture is ``sum_j p_j N(mu_j, Sigma)``. Its characteristic function
factors into a Gaussian envelope ``exp(-t' Sigma t / 2)`` times the
characteristic function of the discrete mixing distribution, which is what
every routine here exploits: the envelope is evaluated once per point and the
mixing part is a single complex matrix-vector product.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy.special import logsumexp

from .errors import DegeneratePointError, InvalidParameterError

DEFAULT_FLOOR = 1e-12


def _readonly(a):
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class MixtureParams:
    """Weights (K,), atoms (K, d) and a shared covariance (d, d).

    Atoms given as a flat sequence are read as K points in one dimension, and
    a scalar covariance as ``sigma^2`` of a univariate mixture.
    """

    weights: np.ndarray
    atoms: np.ndarray
    covariance: np.ndarray
    _chol: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        w = np.atleast_1d(np.asarray(self.weights, dtype=float))
        mu = np.asarray(self.atoms, dtype=float)
        if mu.ndim <= 1:
            mu = mu.reshape(-1, 1)
        cov = np.asarray(self.covariance, dtype=float)
        if cov.ndim < 2:
            cov = cov.reshape(1, 1)

        if w.ndim != 1 or w.size < 1:
            raise InvalidParameterError("weights must be a non-empty vector")
        if mu.shape[0] != w.size:
            raise InvalidParameterError(
                f"{w.size} weights but {mu.shape[0]} atoms"
            )
        d = mu.shape[1]
        if cov.shape != (d, d):
            raise InvalidParameterError(
                f"covariance shape {cov.shape} does not match dimension {d}"
            )
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(mu)) and np.all(np.isfinite(cov))):
            raise InvalidParameterError("parameters must be finite")
        if np.any(w < 0):
            raise InvalidParameterError("weights must be nonnegative")
        if abs(w.sum() - 1.0) > 1e-12:
            raise InvalidParameterError(f"weights sum to {float(w.sum())!r}, not 1")
        if not np.allclose(cov, cov.T, rtol=0, atol=1e-12 * max(1.0, np.abs(cov).max())):
            raise InvalidParameterError("covariance must be symmetric")
        try:
            chol = np.linalg.cholesky(cov)
        except np.linalg.LinAlgError:
            raise InvalidParameterError("covariance must be positive definite") from None
        if np.any(np.diag(chol) <= 0):
            raise InvalidParameterError("covariance must be positive definite")

        object.__setattr__(self, "weights", _readonly(w))
        object.__setattr__(self, "atoms", _readonly(mu))
        object.__setattr__(self, "covariance", _readonly(0.5 * (cov + cov.T)))
        object.__setattr__(self, "_chol", _readonly(chol))

    @classmethod
    def _trusted(cls, weights, atoms, covariance, chol):
        """Skip validation for parameters built by a map known to produce valid ones."""
        obj = object.__new__(cls)
        for name, val in (("weights", weights), ("atoms", atoms), ("covariance", covariance), ("_chol", chol)):
            val = np.asarray(val, dtype=float)
            val.setflags(write=False)
            object.__setattr__(obj, name, val)
        return obj

    @property
    def K(self) -> int:
        return self.weights.size

    @property
    def d(self) -> int:
        return self.atoms.shape[1]

    @property
    def cholesky(self) -> np.ndarray:
        return self._chol

    @cached_property
    def variance(self) -> float:
        """``sigma^2`` of a univariate mixture."""
        if self.d != 1:
            raise InvalidParameterError("variance is only defined for d=1")
        return float(self.covariance[0, 0])

    def permute(self, order) -> "MixtureParams":
        order = np.asarray(order)
        return MixtureParams(self.weights[order], self.atoms[order], self.covariance)

    def to_dict(self) -> dict:
        return {
            "weights": self.weights.tolist(),
            "atoms": self.atoms.tolist(),
            "covariance": self.covariance.tolist(),
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "MixtureParams":
        return cls(obj["weights"], obj["atoms"], obj["covariance"])

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "MixtureParams":
        return cls.from_dict(json.loads(text))


def _points(x, d):
    """Coerce ``x`` to an (N, d) array; report whether it was a single point."""
    x = np.asarray(x, dtype=float)
    if d == 1 and x.ndim <= 1:
        single = x.ndim == 0
        return x.reshape(-1, 1), single
    single = x.ndim == 1
    return np.atleast_2d(x), single


def _unwrap(values, single):
    return values[0] if single else values


def log_density(params: MixtureParams, x):
    """Log of the mixture density at one point or an array of points."""
    pts, single = _points(x, params.d)
    L = params.cholesky
    diff = pts[:, None, :] - params.atoms[None, :, :]  # (N, K, d)
    # solve L z = diff for every (point, component) pair
    z = np.linalg.solve(L, diff.reshape(-1, params.d).T).T.reshape(diff.shape)
    maha = np.einsum("nkd,nkd->nk", z, z)
    log_norm = np.log(np.diag(L)).sum() + 0.5 * params.d * np.log(2 * np.pi)
    with np.errstate(divide="ignore"):
        logw = np.log(params.weights)
    out = logsumexp(logw[None, :] - 0.5 * maha, axis=1) - log_norm
    return _unwrap(out, single)


def density(params: MixtureParams, x):
    """Mixture density ``sum_j p_j N(x; mu_j, Sigma)``."""
    return np.exp(log_density(params, x))


def _mixing_terms(params: MixtureParams, t):
    """Phase matrix ``exp(i t' mu_j)`` (N, K) and envelope (N,) at points ``t``."""
    pts, single = _points(t, params.d)
    E = np.exp(1j * (pts @ params.atoms.T))
    quad = np.einsum("nd,de,ne->n", pts, params.covariance, pts)
    return pts, E, np.exp(-0.5 * quad), single


def cf(params: MixtureParams, t):
    """Characteristic function ``exp(-t' Sigma t / 2) sum_j p_j exp(i t' mu_j)``."""
    _, E, env, single = _mixing_terms(params, t)
    return _unwrap(env * (E @ params.weights), single)


def mixing_cf(params: MixtureParams, t):
    """Characteristic function of the discrete mixing distribution alone."""
    _, E, _, single = _mixing_terms(params, t)
    return _unwrap(E @ params.weights, single)


def _check_floor(S, pts, floor):
    mod = np.abs(S)
    bad = mod < floor
    if np.any(bad):
        i = int(np.argmax(bad))
        raise DegeneratePointError(pts[i].copy(), float(mod[i]), floor)


def cf_log_grad(params: MixtureParams, t, floor: float = DEFAULT_FLOOR):
    """Gradient of ``log cf`` as the ratio ``grad(cf) / cf``.

    The Gaussian envelope contributes ``-Sigma t`` exactly; only the mixing
    part ``S(t)`` can vanish, so the floor is applied to ``|S(t)|``.

    Raises
    ------
    DegeneratePointError
        If ``|S(t)|`` is below ``floor`` at any requested point.
    """
    pts, E, _, single = _mixing_terms(params, t)
    S = E @ params.weights
    _check_floor(S, pts, floor)
    M = E @ (params.weights[:, None] * params.atoms)
    out = 1j * M / S[:, None] - pts @ params.covariance
    return _unwrap(out, single)


def cf_log_hess_1d(params: MixtureParams, s, floor: float = DEFAULT_FLOOR):
    """Second derivative of ``log cf`` for a univariate mixture.

    Uses ``S''/S - (S'/S)^2`` on the mixing part plus ``-sigma^2`` from the
    envelope.
    """
    if params.d != 1:
        raise ValueError("cf_log_hess_1d needs a univariate mixture")
    s_arr = np.asarray(s, dtype=float)
    single = s_arr.ndim == 0
    s_arr = s_arr.reshape(-1)
    mu = params.atoms[:, 0]
    E = np.exp(1j * np.outer(s_arr, mu))
    S = E @ params.weights
    _check_floor(S, s_arr.reshape(-1, 1), floor)
    m1 = E @ (params.weights * mu)
    m2 = E @ (params.weights * mu**2)
    out = -params.variance - m2 / S + (m1 / S) ** 2
    return out[0] if single else out


def mixture_mean(params: MixtureParams) -> np.ndarray:
    return params.weights @ params.atoms


def demean(params: MixtureParams) -> MixtureParams:
    """Shift the atoms so the mixture has mean zero."""
    return MixtureParams(params.weights, params.atoms - mixture_mean(params), params.covariance)


def sample(params: MixtureParams, size: int, rng: np.random.Generator) -> np.ndarray:
    """Draw ``size`` points, returned as an (size, d) array."""
    labels = rng.choice(params.K, size=size, p=params.weights)
    z = rng.standard_normal((size, params.d))
    return params.atoms[labels] + z @ params.cholesky.T
