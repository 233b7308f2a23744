"""Truncated stick-breaking Dirichlet-process prior on Gaussian mixtures.

Sampler coordinates are laid out as ``[stick logits (K-1) | atoms (K*d) |
covariance coordinates]``. The covariance coordinates are ``log sigma^2`` when
``d == 1``; otherwise ``d`` log standard deviations followed by
``d(d-1)/2`` inverse-tanh canonical partial correlations, ordered row-major
over the strict lower triangle.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy.special import betaln, expit, gammaln, log_expit

from .errors import InvalidParameterError, NonInvertibleError
from .mixture import MixtureParams

_LOG2PI = np.log(2 * np.pi)


@dataclass(frozen=True)
class InverseGamma:
    """Inverse-gamma prior on ``sigma^2`` (univariate mixtures)."""

    shape: float = 2.0
    scale: float = 1.0

    def __post_init__(self):
        if self.shape <= 0 or self.scale <= 0:
            raise InvalidParameterError("inverse-gamma hyperparameters must be positive")


@dataclass(frozen=True)
class LKJLogNormal:
    """``Sigma = D C D`` with log-normal scales and an LKJ(eta) correlation."""

    eta: float = 2.0
    loc: float = 0.0
    scale: float = 1.0

    def __post_init__(self):
        if self.eta <= 0 or self.scale <= 0:
            raise InvalidParameterError("LKJ eta and log-normal scale must be positive")


@dataclass(frozen=True, eq=False)
class PriorSpec:
    K: int = 30
    beta: float = 1.0
    base_mean: np.ndarray = field(default_factory=lambda: np.zeros(1))
    base_cov: np.ndarray = field(default_factory=lambda: 4.0 * np.eye(1))
    cov_prior: InverseGamma | LKJLogNormal | None = None

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.base_mean, dtype=float))
        cov = np.asarray(self.base_cov, dtype=float)
        if cov.ndim < 2:
            cov = cov.reshape(1, 1) if cov.size == 1 else np.diag(cov)
        d = mean.size
        if int(self.K) < 1:
            raise InvalidParameterError("truncation level K must be at least 1")
        if not self.beta > 0:
            raise InvalidParameterError("concentration beta must be positive")
        if cov.shape != (d, d):
            raise InvalidParameterError("base covariance does not match base mean")
        try:
            chol = np.linalg.cholesky(cov)
        except np.linalg.LinAlgError:
            raise InvalidParameterError("base covariance must be positive definite") from None
        cov_prior = self.cov_prior
        if cov_prior is None:
            cov_prior = InverseGamma() if d == 1 else LKJLogNormal()
        if d == 1 and not isinstance(cov_prior, InverseGamma):
            raise InvalidParameterError("d=1 uses the inverse-gamma covariance prior")
        if d > 1 and not isinstance(cov_prior, LKJLogNormal):
            raise InvalidParameterError("d>1 uses the LKJ/log-normal covariance prior")
        object.__setattr__(self, "K", int(self.K))
        object.__setattr__(self, "beta", float(self.beta))
        object.__setattr__(self, "base_mean", mean)
        object.__setattr__(self, "base_cov", cov)
        object.__setattr__(self, "cov_prior", cov_prior)
        object.__setattr__(self, "_base_chol", chol)
        object.__setattr__(self, "_base_prec", np.linalg.inv(cov))

    @property
    def d(self) -> int:
        return self.base_mean.size

    @property
    def n_cov(self) -> int:
        d = self.d
        return 1 if d == 1 else d + d * (d - 1) // 2

    @property
    def dim(self) -> int:
        return (self.K - 1) + self.K * self.d + self.n_cov

    def to_dict(self) -> dict:
        cp = self.cov_prior
        if isinstance(cp, InverseGamma):
            cov_prior = {"kind": "inverse_gamma", "shape": cp.shape, "scale": cp.scale}
        else:
            cov_prior = {"kind": "lkj_lognormal", "eta": cp.eta, "loc": cp.loc, "scale": cp.scale}
        return {
            "K": self.K,
            "beta": self.beta,
            "base_mean": self.base_mean.tolist(),
            "base_cov": self.base_cov.tolist(),
            "cov_prior": cov_prior,
        }


def empirical_bayes(spec: PriorSpec, data) -> PriorSpec:
    """Replace the base measure with the sample mean and covariance of ``data``."""
    x = np.asarray(data, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    cov = np.atleast_2d(np.cov(x, rowvar=False))
    return PriorSpec(spec.K, spec.beta, x.mean(axis=0), cov, spec.cov_prior)


class UnconstrainedState(NamedTuple):
    stick_logits: np.ndarray
    raw_atoms: np.ndarray
    cov_coords: np.ndarray

    @property
    def flat(self) -> np.ndarray:
        return np.concatenate([self.stick_logits, self.raw_atoms.ravel(), self.cov_coords])


def split_state(x, spec: PriorSpec) -> UnconstrainedState:
    x = np.asarray(x, dtype=float)
    if x.shape != (spec.dim,):
        raise ValueError(f"state has shape {x.shape}, expected ({spec.dim},)")
    k1 = spec.K - 1
    ka = k1 + spec.K * spec.d
    return UnconstrainedState(x[:k1], x[k1:ka].reshape(spec.K, spec.d), x[ka:])


def stick_weights(sticks) -> np.ndarray:
    """Truncated stick-breaking: the last component takes the residual mass."""
    v = np.asarray(sticks, dtype=float).reshape(-1)
    if np.any(~(v > 0)) or np.any(~(v < 1)):
        raise ValueError("sticks must lie strictly inside (0, 1)")
    return _weights_from_logs(np.log(v), np.log1p(-v))


def _weights_from_logs(log_v, log_1mv):
    # cumulative log remaining mass before each stick
    remain = np.concatenate([[0.0], np.cumsum(log_1mv)])
    w = np.exp(np.concatenate([log_v + remain[:-1], remain[-1:]]))
    # close the simplex exactly on the residual component
    w[-1] = max(0.0, 1.0 - w[:-1].sum()) if w.size > 1 else 1.0
    return w


def _corr_cholesky(z, d):
    """Cholesky factor of a correlation matrix from canonical partial correlations.

    Returns ``L`` and its derivatives ``dL[c] = dL/dz_c``.
    """
    L = np.zeros((d, d))
    dL = np.zeros((z.size, d, d))
    L[0, 0] = 1.0
    c = 0
    for i in range(1, d):
        ssq = 0.0
        dssq = np.zeros(z.size)
        for j in range(i):
            rem = np.sqrt(1.0 - ssq)
            drem = -0.5 * dssq / rem
            L[i, j] = z[c] * rem
            dL[:, i, j] = z[c] * drem
            dL[c, i, j] += rem
            ssq += L[i, j] ** 2
            dssq = dssq + 2 * L[i, j] * dL[:, i, j]
            c += 1
        L[i, i] = np.sqrt(max(1.0 - ssq, 0.0))
        dL[:, i, i] = -0.5 * dssq / L[i, i] if L[i, i] > 0 else 0.0
    return L, dL


def _cpc_from_cholesky(L):
    d = L.shape[0]
    z = []
    for i in range(1, d):
        ssq = 0.0
        for j in range(i):
            z.append(L[i, j] / np.sqrt(1.0 - ssq))
            ssq += L[i, j] ** 2
    return np.array(z)


def _cpc_beta_params(spec: PriorSpec):
    """Beta(b, b) shape of each partial correlation under LKJ(eta), C-vine order."""
    d = spec.d
    eta = spec.cov_prior.eta
    return np.array([eta + (d - 2 - j) / 2.0 for i in range(1, d) for j in range(i)])


def _log_1m_tanh2(y):
    # log(1 - tanh(y)^2) = 2 log sech(y), stable for large |y|
    a = np.abs(y)
    return 2.0 * (np.log(2.0) - a - np.log1p(np.exp(-2.0 * a)))


def _cov_from_coords(c, spec: PriorSpec):
    """Covariance and its derivative along each covariance coordinate."""
    d = spec.d
    if d == 1:
        s2 = np.exp(c[0])
        return np.array([[s2]]), np.array([[[s2]]])
    ell, y = c[:d], c[d:]
    z = np.tanh(y)
    L, dLdz = _corr_cholesky(z, d)
    C = L @ L.T
    sd = np.exp(ell)
    Sigma = sd[:, None] * C * sd[None, :]
    dS = np.empty((c.size, d, d))
    for a in range(d):
        e = np.zeros(d)
        e[a] = 1.0
        dS[a] = Sigma * (e[:, None] + e[None, :])
    dzdy = 1.0 - z**2
    for k in range(y.size):
        dC = dLdz[k] @ L.T + L @ dLdz[k].T
        dS[d + k] = sd[:, None] * dC * sd[None, :] * dzdy[k]
    return 0.5 * (Sigma + Sigma.T), dS


def constrain(state, spec: PriorSpec) -> MixtureParams:
    """Map sampler coordinates to mixture parameters."""
    params, _ = constrain_with_pullback(state, spec)
    return params


def constrain_with_pullback(state, spec: PriorSpec):
    """Constrain ``state`` and return a function pulling constrained gradients back.

    The returned ``pullback(g_weights, g_atoms, g_cov)`` maps gradients with
    respect to the weights (K,), atoms (K, d) and the symmetric covariance
    (d, d) to a gradient over the flat sampler coordinates.
    """
    x = state.flat if isinstance(state, UnconstrainedState) else np.asarray(state, dtype=float)
    st = split_state(x, spec)
    s = st.stick_logits
    v = expit(s)
    w = _weights_from_logs(log_expit(s), log_expit(-s))
    Sigma, dSigma = _cov_from_coords(st.cov_coords, spec)
    try:
        chol = np.linalg.cholesky(Sigma)
    except np.linalg.LinAlgError:
        # extreme coordinates can round Sigma out of the PD cone; validate for a clear error
        chol = None
    finite = np.all(np.isfinite(w)) and np.all(np.isfinite(st.raw_atoms)) and np.all(np.isfinite(Sigma))
    if chol is None or not finite:
        params = MixtureParams(w, st.raw_atoms.copy(), Sigma)
    else:
        params = MixtureParams._trusted(w, st.raw_atoms.copy(), Sigma, chol)
    K = spec.K

    def pullback(g_w, g_atoms, g_cov):
        g_w = np.asarray(g_w, dtype=float)
        gp = g_w * w
        # d p_j / d s_i = p_j (1 - v_i) if j == i, -p_j v_i if j > i
        tail = np.cumsum(gp[::-1])[::-1]  # sum_{j >= i} g_j p_j
        g_s = gp[: K - 1] * (1.0 - v) - v * tail[1:K]
        g_c = np.einsum("kab,ab->k", dSigma, np.asarray(g_cov, dtype=float).reshape(spec.d, spec.d))
        return np.concatenate([g_s, np.asarray(g_atoms, dtype=float).ravel(), g_c])

    return params, pullback


def unconstrain(params: MixtureParams, spec: PriorSpec) -> np.ndarray:
    """Inverse of :func:`constrain`; requires strictly positive weights."""
    if params.K != spec.K or params.d != spec.d:
        raise NonInvertibleError("parameters do not match the prior's K and d")
    w = params.weights
    if np.any(w <= 0):
        raise NonInvertibleError("zero weight has no stick-breaking preimage")
    remaining = np.cumsum(w[::-1])[::-1]
    v = w[:-1] / remaining[:-1]
    if np.any(v >= 1):
        raise NonInvertibleError("weights leave no mass for the last component")
    logits = np.log(v) - np.log1p(-v)
    Sigma = params.covariance
    d = spec.d
    if d == 1:
        cov_c = np.array([np.log(Sigma[0, 0])])
    else:
        sd = np.sqrt(np.diag(Sigma))
        C = Sigma / np.outer(sd, sd)
        L = np.linalg.cholesky(C)
        z = _cpc_from_cholesky(L)
        cov_c = np.concatenate([np.log(sd), np.arctanh(z)])
    return np.concatenate([logits, params.atoms.ravel(), cov_c])


def log_prior(state, spec: PriorSpec) -> float:
    return log_prior_and_grad(state, spec)[0]


def log_prior_and_grad(state, spec: PriorSpec):
    """Log density of the prior pushed forward to sampler coordinates, and its gradient."""
    x = state.flat if isinstance(state, UnconstrainedState) else np.asarray(state, dtype=float)
    st = split_state(x, spec)
    beta = spec.beta

    # sticks: Beta(1, beta) density of v = logistic(s) times the logistic Jacobian
    s = st.stick_logits
    log_v, log_1mv = log_expit(s), log_expit(-s)
    lp_sticks = np.sum(np.log(beta) + beta * log_1mv + log_v)
    v = expit(s)
    g_s = (1.0 - v) - beta * v

    # atoms: Gaussian base measure
    diff = st.raw_atoms - spec.base_mean[None, :]
    pd = diff @ spec._base_prec
    logdet = 2 * np.log(np.diag(spec._base_chol)).sum()
    lp_atoms = -0.5 * np.sum(pd * diff) - spec.K * 0.5 * (spec.d * _LOG2PI + logdet)
    g_atoms = -pd

    c = st.cov_coords
    cp = spec.cov_prior
    if spec.d == 1:
        # inverse-gamma on sigma^2 = exp(c), Jacobian exp(c) folded in
        a, b = cp.shape, cp.scale
        lp_cov = a * np.log(b) - gammaln(a) - a * c[0] - b * np.exp(-c[0])
        g_c = np.array([-a + b * np.exp(-c[0])])
    else:
        d = spec.d
        ell, y = c[:d], c[d:]
        zs = (ell - cp.loc) / cp.scale
        lp_cov = np.sum(-0.5 * zs**2 - np.log(cp.scale) - 0.5 * _LOG2PI)
        g_ell = -zs / cp.scale
        bb = _cpc_beta_params(spec)
        z = np.tanh(y)
        l1m = _log_1m_tanh2(y)
        log_norm = (2 * bb - 1) * np.log(2.0) + betaln(bb, bb)
        # Beta(b, b) on (-1, 1) for each partial correlation, plus tanh Jacobian
        lp_cov += np.sum(bb * l1m - log_norm)
        g_y = -2.0 * bb * z
        g_c = np.concatenate([g_ell, g_y])

    lp = float(lp_sticks + lp_atoms + lp_cov)
    return lp, np.concatenate([g_s, g_atoms.ravel(), g_c])


def sample_prior(spec: PriorSpec, seed) -> MixtureParams:
    """One draw of (P, Sigma); ``seed`` is an int or a numpy Generator."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    K, d = spec.K, spec.d
    v = rng.beta(1.0, spec.beta, size=K - 1)
    v = np.clip(v, np.finfo(float).tiny, 1 - np.finfo(float).epsneg)
    w = _weights_from_logs(np.log(v), np.log1p(-v))
    atoms = spec.base_mean + rng.standard_normal((K, d)) @ spec._base_chol.T
    cp = spec.cov_prior
    if d == 1:
        Sigma = np.array([[cp.scale / rng.gamma(cp.shape)]])
    else:
        sd = np.exp(cp.loc + cp.scale * rng.standard_normal(d))
        bb = _cpc_beta_params(spec)
        z = 2.0 * rng.beta(bb, bb) - 1.0
        L, _ = _corr_cholesky(z, d)
        Sigma = sd[:, None] * (L @ L.T) * sd[None, :]
    return MixtureParams(w, atoms, 0.5 * (Sigma + Sigma.T))


def sample_prior_state(spec: PriorSpec, rng: np.random.Generator) -> np.ndarray:
    """A prior draw expressed in sampler coordinates.

    Stick proportions are drawn directly as logits, which keeps every weight
    strictly positive even when a Beta draw would round to 0 or 1.
    """
    K, d = spec.K, spec.d
    v = rng.beta(1.0, spec.beta, size=K - 1)
    v = np.clip(v, 1e-12, 1 - 1e-12)
    logits = np.log(v) - np.log1p(-v)
    atoms = spec.base_mean + rng.standard_normal((K, d)) @ spec._base_chol.T
    cp = spec.cov_prior
    if d == 1:
        cov_c = np.array([np.log(cp.scale / rng.gamma(cp.shape))])
    else:
        ell = cp.loc + cp.scale * rng.standard_normal(d)
        bb = _cpc_beta_params(spec)
        z = np.clip(2.0 * rng.beta(bb, bb) - 1.0, -1 + 1e-12, 1 - 1e-12)
        cov_c = np.concatenate([ell, np.arctanh(z)])
    return np.concatenate([logits, atoms.ravel(), cov_c])
