"""Characteristic-function quasi-likelihoods and the quasi-posterior target.

Each model stores estimator values on a fixed node set together with the
node weights of the metric, and exposes ``value(params)`` and
``value_and_grad(params)``. ``params`` is a list with one
:class:`~qblatent.mixture.MixtureParams` per latent block (one block except
for the joint factor posterior). Gradients are returned per block as
``(d/dweights, d/datoms, d/dcovariance)`` and pulled back to sampler
coordinates by :class:`QuasiPosterior`.

Objectives are ``n/2`` times a weighted sum of squared residual moduli, so
``exp(-objective)`` is the quasi-likelihood. A candidate whose mixing
characteristic function drops below the floor at some node yields ``+inf``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.differentiate import derivative

from . import prior as _prior
from .ecf import as_dataset, build_cache
from .errors import IdentificationError, InvalidParameterError
from .mixture import DEFAULT_FLOOR, MixtureParams
from .quadrature import BoxQuadrature, SphereLineQuadrature, fold_symmetric


def build_Q(A):
    """Upper-triangular vectorisations of ``A_k A_k'`` and the left inverse.

    Returns ``(Q, Qstar)`` with ``Q`` of shape (L(L+1)/2, K), rows ordered
    row-major over pairs ``l1 <= l2``, and ``Qstar = (Q'Q)^{-1} Q'``.
    """
    A = np.asarray(A, dtype=float)
    if A.ndim != 2 or not np.all(np.isfinite(A)):
        raise ValueError("loadings must be a finite L x K matrix")
    L, K = A.shape
    iu = np.triu_indices(L)
    Q = np.stack([np.outer(A[:, k], A[:, k])[iu] for k in range(K)], axis=1)
    rank = np.linalg.matrix_rank(Q)
    if rank < K:
        raise IdentificationError(rank, K)
    Qstar = np.linalg.solve(Q.T @ Q, Q.T)
    return Q, Qstar


def _vech(H):
    L = H.shape[-1]
    iu = np.triu_indices(L)
    return H[..., iu[0], iu[1]]


def _node_set(quad, fold):
    if isinstance(quad, BoxQuadrature) and fold:
        return fold_symmetric(quad.nodes, quad.weights)
    return np.asarray(quad.nodes), np.asarray(quad.weights)


class _Model:
    n_blocks = 1
    floor = DEFAULT_FLOOR

    def value(self, params) -> float:
        return self.value_and_grad(params, need_grad=False)[0]

    def _as_list(self, params):
        if isinstance(params, MixtureParams):
            params = [params]
        if len(params) != self.n_blocks:
            raise ValueError(f"expected {self.n_blocks} mixtures, got {len(params)}")
        return params


class DeconvModel(_Model):
    """``n/2 * sum_k w_k |phi_Y(t_k) - phi_eps(t_k) phi_theta(t_k)|^2``."""

    kind = "deconv"

    def __init__(self, nodes, weights, phi_y, phi_eps, n, d=None):
        self.nodes = np.asarray(nodes, dtype=float)
        self.weights = np.asarray(weights, dtype=float)
        self.phi_y = np.asarray(phi_y, dtype=complex)
        self.phi_eps = np.asarray(phi_eps, dtype=complex)
        self.n = float(n)
        self.d = self.nodes.shape[1] if d is None else d

    @classmethod
    def from_data(cls, y, eps, quad: BoxQuadrature, n=None, fold=True):
        y, eps = as_dataset(y), as_dataset(eps)
        nodes, weights = _node_set(quad, fold)
        cy = build_cache(y, nodes)
        ce = build_cache(eps, nodes)
        return cls(nodes, weights, cy.phi, ce.phi, y.shape[0] if n is None else n)

    @classmethod
    def from_population(cls, phi_y, phi_eps, quad, n):
        """Test constructor: analytic characteristic functions instead of data."""
        nodes, weights = np.asarray(quad.nodes), np.asarray(quad.weights)
        return cls(nodes, weights, phi_y(nodes), phi_eps(nodes), n)

    def residual(self, params):
        p = self._as_list(params)[0]
        t = self.nodes
        E = np.exp(1j * (t @ p.atoms.T))
        env = np.exp(-0.5 * np.einsum("nd,de,ne->n", t, p.covariance, t))
        return self.phi_y - self.phi_eps * env * (E @ p.weights)

    def value_and_grad(self, params, need_grad=True):
        p = self._as_list(params)[0]
        t, w = self.nodes, self.weights
        E = np.exp(1j * (t @ p.atoms.T))
        env = np.exp(-0.5 * np.einsum("nd,de,ne->n", t, p.covariance, t))
        phi = env * (E @ p.weights)
        R = self.phi_y - self.phi_eps * phi
        val = 0.5 * self.n * float(w @ (R.real**2 + R.imag**2))
        if not need_grad:
            return val, None
        a = -self.n * w * np.conj(R) * self.phi_eps
        ag = a * env
        g_w = (ag @ E).real
        g_mu = p.weights[:, None] * (1j * ((E * ag[:, None]).T @ t)).real
        aphi = a * phi
        g_cov = -0.5 * ((t * aphi[:, None]).T @ t).real
        return val, [(g_w, g_mu, 0.5 * (g_cov + g_cov.T))]


class RepMeasModel(_Model):
    """Residual field ``phi_{Y2}(t) grad log phi_theta(t) - E_n[i Y1 e^{i t'Y2}]``.

    With ``symmetrized`` the role-swapped field is added. The metric is the
    node-weighted sum of squared Euclidean norms; on a
    :class:`SphereLineQuadrature` that is the boundary-corrected metric.
    """

    kind = "repmeas"

    def __init__(self, nodes, weights, phi_y2, h12, n, phi_y1=None, h21=None, floor=DEFAULT_FLOOR, boundary=False):
        self.nodes = np.asarray(nodes, dtype=float)
        self.weights = np.asarray(weights, dtype=float)
        self.d = self.nodes.shape[1]
        self.terms = [(np.asarray(phi_y2, dtype=complex), np.asarray(h12, dtype=complex).reshape(-1, self.d))]
        if phi_y1 is not None:
            self.terms.append((np.asarray(phi_y1, dtype=complex), np.asarray(h21, dtype=complex).reshape(-1, self.d)))
        self.symmetrized = len(self.terms) == 2
        self.n = float(n)
        self.floor = floor
        self.boundary = boundary

    @classmethod
    def from_data(cls, y1, y2, quad, n=None, symmetrized=False, boundary=None, fold=True, floor=DEFAULT_FLOOR):
        y1, y2 = as_dataset(y1), as_dataset(y2)
        if y1.shape != y2.shape:
            raise ValueError("repeated measurements must have equal shapes")
        is_sphere = isinstance(quad, SphereLineQuadrature)
        if boundary is None:
            boundary = is_sphere
        if boundary and not is_sphere:
            raise ValueError("the boundary-corrected metric needs a SphereLineQuadrature")
        nodes, weights = _node_set(quad, fold)
        c2 = build_cache(y2, nodes, ("plain", "weighted"), w_data=y1)
        extra = {}
        if symmetrized:
            c1 = build_cache(y1, nodes, ("plain", "weighted"), w_data=y2)
            extra = {"phi_y1": c1.phi, "h21": c1.weighted}
        return cls(nodes, weights, c2.phi, c2.weighted, y1.shape[0] if n is None else n,
                   floor=floor, boundary=boundary, **extra)

    @classmethod
    def from_population(cls, phi_y2, h12, quad, n, phi_y1=None, h21=None):
        nodes, weights = np.asarray(quad.nodes), np.asarray(quad.weights)
        kw = {}
        if phi_y1 is not None:
            kw = {"phi_y1": phi_y1(nodes), "h21": h21(nodes)}
        return cls(nodes, weights, phi_y2(nodes), h12(nodes), n,
                   boundary=isinstance(quad, SphereLineQuadrature), **kw)

    def directional(self, which):
        """Model with only one of the two directional restrictions."""
        phi, h = self.terms[which]
        return RepMeasModel(self.nodes, self.weights, phi, h, self.n, floor=self.floor, boundary=self.boundary)

    def value_and_grad(self, params, need_grad=True):
        p = self._as_list(params)[0]
        t, w = self.nodes, self.weights
        E = np.exp(1j * (t @ p.atoms.T))
        S = E @ p.weights
        if np.min(np.abs(S)) < self.floor:
            return np.inf, None
        M = E @ (p.weights[:, None] * p.atoms)
        psi = 1j * M / S[:, None] - t @ p.covariance
        val = 0.0
        b = np.zeros_like(psi)
        for phi, h in self.terms:
            r = phi[:, None] * psi - h
            val += 0.5 * self.n * float(w @ (r.real**2 + r.imag**2).sum(axis=1))
            if need_grad:
                b += (self.n * w * phi)[:, None] * np.conj(r)
        if not need_grad:
            return val, None
        invS = 1.0 / S
        bM = np.einsum("nd,nd->n", b, M) * invS  # (b . M) / S
        bmu = b @ p.atoms.T  # (N, K): b . mu_j
        coef = 1j * E * invS[:, None]
        inner = bmu - bM[:, None]
        g_w = np.sum(coef * inner, axis=0).real
        g_mu = p.weights[:, None] * (coef.T @ b + 1j * ((coef * inner).T @ t)).real
        g_cov = -(b.T @ t).real
        return val, [(g_w, g_mu, 0.5 * (g_cov + g_cov.T))]


def _hess1d_terms(p, s):
    mu = p.atoms[:, 0]
    E = np.exp(1j * np.outer(s, mu))
    S = E @ p.weights
    return mu, E, S


def _hess1d_value_grad(p, s, a, floor, need_grad):
    """``(log phi)''(s)`` at projected nodes and the pullback of ``Re sum a * dl''``."""
    mu, E, S = _hess1d_terms(p, s)
    if np.min(np.abs(S)) < floor:
        return None, None
    w = p.weights
    m1 = E @ (w * mu)
    m2 = E @ (w * mu**2)
    invS = 1.0 / S
    r1 = m1 * invS
    l2 = -p.variance - m2 * invS + r1**2
    if not need_grad:
        return l2, None
    return l2, (E, S, m1, m2, invS, r1, mu)


def _hess1d_backward(p, s, a, cache):
    E, S, m1, m2, invS, r1, mu = cache
    w = p.weights
    m2s = m2 * invS**2
    r1s = r1 * invS
    # d l'' / d p_j
    Dp = E * (-(mu**2)[None, :] * invS[:, None] + m2s[:, None]
              + 2 * r1s[:, None] * mu[None, :] - 2 * (r1**2 * invS)[:, None])
    g_w = (a @ Dp).real
    isx = 1j * s[:, None]
    dm1 = 1.0 + isx * mu[None, :]
    dm2 = 2 * mu[None, :] + isx * (mu**2)[None, :]
    Dmu = E * (-dm2 * invS[:, None] + m2s[:, None] * isx
               + 2 * r1s[:, None] * dm1 - 2 * (r1**2 * invS)[:, None] * isx)
    g_mu = w * (a @ Dmu).real
    g_var = -float(np.sum(a).real)
    return g_w, g_mu[:, None], np.array([[g_var]])


class FactorModel(_Model):
    """Multi-factor restriction ``phi_Y^2 (Q* V_Y - (log phi_k)''(t'A_k))``.

    ``target`` is a 1-based factor index for the single-factor posterior or
    ``"joint"`` for all factors at once, in which case the residual is the
    full vector ``phi_Y^2 (V_Y - Q V_theta)``.
    """

    kind = "factor"

    def __init__(self, nodes, weights, phi_y, hess_combo, A, n, target=1, floor=DEFAULT_FLOOR):
        self.nodes = np.asarray(nodes, dtype=float)
        self.weights = np.asarray(weights, dtype=float)
        self.A = np.asarray(A, dtype=float)
        self.Q, self.Qstar = build_Q(self.A)
        self.phi_y = np.asarray(phi_y, dtype=complex)
        self.phi2 = self.phi_y**2
        self.vech = _vech(np.asarray(hess_combo, dtype=complex))  # premultiplied by phi^2
        self.n = float(n)
        self.floor = floor
        self.d = 1
        self.target = target
        if target == "joint":
            self.n_blocks = self.A.shape[1]
            self.proj = self.nodes @ self.A  # (N, K)
        else:
            k = int(target)
            if not 1 <= k <= self.A.shape[1]:
                raise ValueError(f"factor target {k} outside 1..{self.A.shape[1]}")
            self.k = k - 1
            self.s = self.nodes @ self.A[:, self.k]
            self.c = self.vech @ self.Qstar[self.k]
            self._group_projections()

    def _group_projections(self):
        """Collapse nodes sharing a projection ``t'A_k`` into one quadratic term each.

        Per group ``sum w |c - g l|^2 = C |l - beta|^2 + R0`` with ``g = phi^2``,
        ``C = sum w |g|^2``, ``beta = sum w conj(g) c / C`` and ``R0`` the
        minimum, computed directly so it is exactly nonnegative.
        """
        key = np.round(self.s, 10)
        _, inv = np.unique(key, return_inverse=True)
        cnt = np.bincount(inv)
        w, g, c = self.weights, self.phi2, self.c
        self.s_grp = np.bincount(inv, weights=self.s) / cnt
        C = np.bincount(inv, weights=w * np.abs(g) ** 2)
        wgc = w * np.conj(g) * c
        B = np.bincount(inv, weights=wgc.real) + 1j * np.bincount(inv, weights=wgc.imag)
        beta = np.divide(B, C, out=np.zeros_like(B), where=C > 0)
        resid = c - g * beta[inv]
        self.C_grp = C
        self.beta_grp = beta
        self.R0 = float(w @ (resid.real**2 + resid.imag**2))

    @classmethod
    def from_data(cls, y, A, quad: BoxQuadrature, target=1, n=None, fold=True, floor=DEFAULT_FLOOR):
        y = as_dataset(y)
        A = np.asarray(A, dtype=float)
        if A.shape[0] != y.shape[1]:
            raise ValueError(f"loadings have {A.shape[0]} rows for {y.shape[1]} measurements")
        nodes, weights = _node_set(quad, fold)
        cache = build_cache(y, nodes, ("plain", "hess"))
        return cls(nodes, weights, cache.phi, cache.hess_combo, A,
                   y.shape[0] if n is None else n, target=target, floor=floor)

    @classmethod
    def from_population(cls, phi_y, hess_combo, A, quad, n, target=1):
        nodes, weights = np.asarray(quad.nodes), np.asarray(quad.weights)
        return cls(nodes, weights, phi_y(nodes), hess_combo(nodes), A, n, target=target)

    def value_and_grad(self, params, need_grad=True):
        params = self._as_list(params)
        w = self.weights
        if self.target != "joint":
            p = params[0]
            l2, cache = _hess1d_value_grad(p, self.s_grp, None, self.floor, need_grad)
            if l2 is None:
                return np.inf, None
            dev = l2 - self.beta_grp
            val = 0.5 * self.n * (float(self.C_grp @ (dev.real**2 + dev.imag**2)) + self.R0)
            if not need_grad:
                return val, None
            a = self.n * self.C_grp * np.conj(dev)
            return val, [_hess1d_backward(p, self.s_grp, a, cache)]

        l2s, caches = [], []
        for k, p in enumerate(params):
            l2, cache = _hess1d_value_grad(p, self.proj[:, k], None, self.floor, need_grad)
            if l2 is None:
                return np.inf, None
            l2s.append(l2)
            caches.append(cache)
        V = np.stack(l2s, axis=1)  # (N, K)
        r = self.vech - self.phi2[:, None] * (V @ self.Q.T)
        val = 0.5 * self.n * float(w @ (r.real**2 + r.imag**2).sum(axis=1))
        if not need_grad:
            return val, None
        a = -(self.n * w * self.phi2)[:, None] * (np.conj(r) @ self.Q)
        grads = [_hess1d_backward(p, self.proj[:, k], a[:, k], caches[k]) for k, p in enumerate(params)]
        return val, grads

    def single_residuals(self, params):
        """Per-factor residuals ``Q*_k phi^2 V_Y - phi^2 l''_k`` stacked as (N, K)."""
        params = self._as_list(params)
        out = []
        for k, p in enumerate(params):
            s = self.proj[:, k] if self.target == "joint" else self.s
            l2, _ = _hess1d_value_grad(p, s, None, 0.0, False)
            out.append(self.vech @ self.Qstar[k] - self.phi2 * l2)
        return np.stack(out, axis=1)


def symmetrize_to_deconv(y1, y2):
    """Half-sum proxy and half-difference auxiliary error sample."""
    y1, y2 = as_dataset(y1), as_dataset(y2)
    if y1.shape != y2.shape:
        raise ValueError(f"length mismatch: {y1.shape} vs {y2.shape}")
    return 0.5 * (y1 + y2), 0.5 * (y1 - y2)


@dataclass
class QuasiPosterior:
    """Log quasi-posterior over flat sampler coordinates.

    One prior block of ``spec.dim`` coordinates per latent mixture, with
    independent priors across blocks.
    """

    model: _Model
    spec: _prior.PriorSpec
    floor_breaches: int = 0
    evaluations: int = 0

    @property
    def n_blocks(self) -> int:
        return self.model.n_blocks

    @property
    def dim(self) -> int:
        return self.n_blocks * self.spec.dim

    def blocks(self, x):
        x = np.asarray(x, dtype=float)
        return x.reshape(self.n_blocks, self.spec.dim)

    def constrain(self, x):
        return [_prior.constrain(b, self.spec) for b in self.blocks(x)]

    def neg_loglik_grad(self, x):
        """Objective minus log prior, and its gradient (``+inf`` on a floor breach)."""
        self.evaluations += 1
        params, pulls = [], []
        try:
            with np.errstate(over="ignore", invalid="ignore"):
                for b in self.blocks(x):
                    p, pull = _prior.constrain_with_pullback(b, self.spec)
                    params.append(p)
                    pulls.append(pull)
        except InvalidParameterError:
            # coordinates so extreme the covariance overflows
            self.floor_breaches += 1
            return np.inf, np.full(self.dim, np.nan)
        with np.errstate(over="ignore", invalid="ignore"):
            val, grads = self.model.value_and_grad(params)
        # floor breaches and overflow in far-out regions are both rejections
        if not np.isfinite(val) or not all(np.all(np.isfinite(np.concatenate([np.ravel(a) for a in g]))) for g in grads):
            self.floor_breaches += 1
            return np.inf, np.full(self.dim, np.nan)
        total = val
        out = []
        for b, pull, g in zip(self.blocks(x), pulls, grads):
            lp, glp = _prior.log_prior_and_grad(b, self.spec)
            total -= lp
            out.append(pull(*g) - glp)
        return float(total), np.concatenate(out)

    def logp_and_grad(self, x):
        v, g = self.neg_loglik_grad(x)
        return -v, -g

    def logp(self, x) -> float:
        try:
            with np.errstate(over="ignore", invalid="ignore"):
                params = self.constrain(x)
        except InvalidParameterError:
            return -np.inf
        with np.errstate(over="ignore", invalid="ignore"):
            val = self.model.value(params)
        if not np.isfinite(val):
            return -np.inf
        return float(-val + sum(_prior.log_prior(b, self.spec) for b in self.blocks(x)))

    def objective(self, x) -> float:
        return self.model.value(self.constrain(x))


def deconv_neg_loglik(state, model: DeconvModel, spec) -> float:
    return model.value(_prior.constrain(state, spec))


def repmeas_neg_loglik(state, model: RepMeasModel, spec) -> float:
    return model.value(_prior.constrain(state, spec))


def factor_neg_loglik(states, model: FactorModel, spec) -> float:
    states = np.asarray(states, dtype=float).reshape(model.n_blocks, spec.dim)
    return model.value([_prior.constrain(s, spec) for s in states])


def neg_loglik_grad(state, model, spec):
    """Objective minus log prior and its gradient over sampler coordinates."""
    return QuasiPosterior(model, spec).neg_loglik_grad(np.ravel(state))


def fd_gradient(f, x, step: float = 1e-2):
    """Central finite-difference gradient of a scalar function.

    Each coordinate uses adaptive Richardson extrapolation over a halving step
    sequence that starts at ``step * max(1, |x_i|)``, so strongly curved
    objectives still get an accurate reference.
    """
    x = np.asarray(x, dtype=float)
    g = np.empty_like(x)
    for i in range(x.size):
        def along(z, i=i):
            out = np.empty(z.shape)
            for idx, zi in np.ndenumerate(z):
                y = x.copy()
                y[i] = zi
                out[idx] = f(y)
            return out

        res = derivative(along, x[i], initial_step=step * max(1.0, abs(x[i])), step_factor=2.0,
                         order=4, maxiter=8, tolerances={"rtol": 1e-10})
        g[i] = res.df
    return g


def relative_errors(analytic, numeric):
    """``|a - f| / max(|a|, |f|, 1)`` per coordinate."""
    a = np.asarray(analytic, dtype=float)
    f = np.asarray(numeric, dtype=float)
    return np.abs(a - f) / np.maximum(np.maximum(np.abs(a), np.abs(f)), 1.0)


def gradient_check(value_and_grad, x, step: float = 1e-2):
    """Per-coordinate relative error between an analytic gradient and finite differences."""
    _, g = value_and_grad(x)
    num = fd_gradient(lambda z: value_and_grad(z)[0], x, step=step)
    return relative_errors(g, num)
