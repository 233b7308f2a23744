"""Convergence diagnostics: rank-normalised split R-hat and bulk effective sample size.

Coordinates where R-hat is undefined (every draw identical) are reported as
NaN in arrays and ``null`` in JSON output.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import ndtri
from scipy.stats import rankdata


def _stack(chains):
    """(M, N, dim) array from PosteriorChain objects or raw draw arrays."""
    arrs = [np.asarray(getattr(c, "draws", c), dtype=float) for c in chains]
    if not arrs:
        raise ValueError("need at least one chain")
    arrs = [a[:, None] if a.ndim == 1 else a for a in arrs]
    n = min(a.shape[0] for a in arrs)
    if n < 4:
        raise ValueError("need at least 4 draws per chain")
    return np.stack([a[:n] for a in arrs])


def _split(x):
    """Split each of M chains in half, dropping a middle draw when N is odd."""
    m, n = x.shape[:2]
    half = n // 2
    return np.concatenate([x[:, :half], x[:, n - half:]], axis=0)


def _rank_normalize(x):
    flat = x.reshape(-1)
    r = rankdata(flat, method="average")
    return ndtri((r - 0.375) / (flat.size + 0.25)).reshape(x.shape)


def _rhat_raw(x):
    """Classic potential scale reduction for an (M, N) array."""
    m, n = x.shape
    w = x.var(axis=1, ddof=1).mean()
    b = n * x.mean(axis=1).var(ddof=1) if m > 1 else 0.0
    var_hat = (n - 1) / n * w + b / n
    if w == 0:
        return np.nan if b == 0 else np.inf
    return float(np.sqrt(var_hat / w))


def _constant(x):
    return np.all(x == x.flat[0])


def rhat(x) -> float:
    """Maximum of bulk and folded rank-normalised split R-hat for one coordinate.

    ``x`` has shape (chains, draws).
    """
    x = np.asarray(x, dtype=float)
    if _constant(x):
        return np.nan
    s = _split(x)
    bulk = _rhat_raw(_rank_normalize(s))
    folded = np.abs(s - np.median(s))
    tail = np.nan if _constant(folded) else _rhat_raw(_rank_normalize(folded))
    return float(np.fmax(bulk, tail))


def _autocov(x):
    """Biased autocovariance of each row via FFT."""
    m, n = x.shape
    size = 1 << (2 * n - 1).bit_length()
    xc = x - x.mean(axis=1, keepdims=True)
    f = np.fft.rfft(xc, size, axis=1)
    return np.fft.irfft(f * np.conj(f), size, axis=1)[:, :n] / n


def _ess_raw(x) -> float:
    """Effective sample size with Geyer's initial monotone sequence."""
    m, n = x.shape
    if _constant(x):
        return np.nan
    acov = _autocov(x)
    chain_mean = x.mean(axis=1)
    mean_var = acov[:, 0].mean() * n / (n - 1)
    var_plus = mean_var * (n - 1) / n
    if m > 1:
        var_plus += chain_mean.var(ddof=1)
    if var_plus <= 0:
        return np.nan
    rho = np.zeros(n)
    rho[0] = 1.0
    rho_even, rho_odd = 1.0, 1.0 - (mean_var - acov[:, 1].mean()) / var_plus
    rho[1] = rho_odd
    t = 1
    while t < n - 3 and rho_even + rho_odd > 0:
        rho_even = 1.0 - (mean_var - acov[:, t + 1].mean()) / var_plus
        rho_odd = 1.0 - (mean_var - acov[:, t + 2].mean()) / var_plus
        if rho_even + rho_odd >= 0:
            rho[t + 1] = rho_even
            rho[t + 2] = rho_odd
        t += 2
    max_t = t - 2
    if rho_even > 0 and max_t + 1 < n:
        rho[max_t + 1] = rho_even
    # initial monotone sequence on pair sums
    t = 1
    while t <= max_t - 2:
        if rho[t + 1] + rho[t + 2] > rho[t - 1] + rho[t]:
            rho[t + 1] = (rho[t - 1] + rho[t]) / 2.0
            rho[t + 2] = rho[t + 1]
        t += 2
    ess = m * n
    tau = -1.0 + 2.0 * rho[: max_t + 1].sum() + (rho[max_t + 1] if max_t + 1 < n else 0.0)
    tau = max(tau, 1.0 / np.log10(ess))
    return float(ess / tau)


def ess_bulk(x) -> float:
    """Bulk effective sample size of one coordinate, shape (chains, draws)."""
    x = np.asarray(x, dtype=float)
    if _constant(x):
        return np.nan
    return _ess_raw(_rank_normalize(_split(x)))


@dataclass
class Diagnostics:
    rhat: np.ndarray
    ess_bulk: np.ndarray
    divergences: int
    divergences_per_chain: list
    n_chains: int
    n_draws: int

    @property
    def max_rhat(self) -> float:
        """Largest defined R-hat; NaN when no coordinate has one."""
        r = self.rhat[np.isfinite(self.rhat) | np.isinf(self.rhat)]
        return float(r.max()) if r.size else np.nan

    @property
    def min_ess(self) -> float:
        e = self.ess_bulk[np.isfinite(self.ess_bulk)]
        return float(e.min()) if e.size else np.nan

    def to_dict(self) -> dict:
        return {
            "rhat": [_json_num(v) for v in self.rhat],
            "ess_bulk": [_json_num(v) for v in self.ess_bulk],
            "max_rhat": _json_num(self.max_rhat),
            "min_ess_bulk": _json_num(self.min_ess),
            "divergences": self.divergences,
            "divergences_per_chain": self.divergences_per_chain,
            "n_chains": self.n_chains,
            "n_draws": self.n_draws,
        }


def _json_num(v):
    """NaN becomes ``None``; infinities become strings JSON can carry."""
    v = float(v)
    if np.isnan(v):
        return None
    if np.isinf(v):
        return "inf" if v > 0 else "-inf"
    return v


def diagnostics(chains) -> Diagnostics:
    """Per-coordinate R-hat and bulk ESS plus divergence totals."""
    x = _stack(chains)
    m, n, dim = x.shape
    r = np.array([rhat(x[:, :, j]) for j in range(dim)])
    e = np.array([ess_bulk(x[:, :, j]) for j in range(dim)])
    per_chain = [int(getattr(c, "n_divergent", 0)) for c in chains]
    return Diagnostics(r, e, sum(per_chain), per_chain, m, n)
