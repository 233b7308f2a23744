"""Multinomial No-U-Turn sampler with dual averaging and a diagonal metric.

The target is anything exposing ``logp_and_grad(x) -> (float, ndarray)`` or a
plain callable with that signature. A non-finite log density counts as
infinite energy, so such points are never accepted.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import SamplerAbort

ABORT_AFTER = 50


@dataclass
class HMCConfig:
    warmup: int = 1000
    draws: int = 1000
    target_accept: float = 0.8
    max_depth: int = 10
    max_energy_error: float = 1000.0
    adapt_mass: bool = True
    seed: int = 0
    chains: int = 4
    init_step: float = 1.0
    metric: str = "diag"

    def __post_init__(self):
        if self.draws < 1:
            raise ValueError("draws must be at least 1")
        if self.warmup < 0:
            raise ValueError("warmup must be nonnegative")
        if not 0 < self.target_accept < 1:
            raise ValueError("target_accept must lie in (0, 1)")
        if self.max_depth < 1:
            raise ValueError("max_depth must be at least 1")
        if self.chains < 1:
            raise ValueError("need at least one chain")
        if self.metric not in ("diag", "dense"):
            raise ValueError("metric must be 'diag' or 'dense'")


@dataclass
class PosteriorChain:
    """Kept draws of one chain in sampler coordinates with per-draw diagnostics."""

    draws: np.ndarray
    logp: np.ndarray
    accept_stat: np.ndarray
    divergent: np.ndarray
    tree_depth: np.ndarray
    n_leapfrog: np.ndarray
    energy: np.ndarray
    step_size: float
    inv_metric: np.ndarray  # diagonal (dim,) or dense (dim, dim)
    warmup_divergences: int = 0
    chain: int = 0
    extra: dict = field(default_factory=dict)

    @property
    def n_divergent(self) -> int:
        return int(self.divergent.sum())

    @property
    def mean_accept(self) -> float:
        return float(self.accept_stat.mean())

    def __len__(self):
        return self.draws.shape[0]


def _as_fn(target):
    return target.logp_and_grad if hasattr(target, "logp_and_grad") else target


def _eval(fn, q):
    lp, g = fn(q)
    lp = float(lp)
    if not np.isfinite(lp) or not np.all(np.isfinite(g)):
        return -np.inf, np.zeros_like(q)
    return lp, np.asarray(g, dtype=float)


def _velocity(minv, p):
    if minv is None:
        return p
    return minv @ p if minv.ndim == 2 else minv * p


def leapfrog(q, p, eps, target, inv_metric=None, grad=None):
    """One velocity-Verlet step; returns ``(q, p, logp, grad)`` at the new point.

    ``logp`` is ``-inf`` when the target is non-finite there, which callers
    treat as a divergence.
    """
    fn = _as_fn(target)
    q = np.asarray(q, dtype=float)
    p = np.asarray(p, dtype=float)
    if grad is None:
        _, grad = _eval(fn, q)
    p_half = p + 0.5 * eps * grad
    q_new = q + eps * _velocity(inv_metric, p_half)
    lp, g = _eval(fn, q_new)
    return q_new, p_half + 0.5 * eps * g, lp, g


class _Point:
    __slots__ = ("q", "p", "lp", "g")

    def __init__(self, q, p, lp, g):
        self.q, self.p, self.lp, self.g = q, p, lp, g


class _Stats:
    __slots__ = ("n_leapfrog", "sum_accept", "divergent")

    def __init__(self):
        self.n_leapfrog = 0
        self.sum_accept = 0.0
        self.divergent = False


class _Tree:
    __slots__ = ("edge", "p_beg", "p_end", "ps_beg", "ps_end", "rho", "lsw", "prop", "valid")


def _no_uturn(ps_minus, ps_plus, rho):
    return ps_minus @ rho > 0 and ps_plus @ rho > 0


class _NUTS:
    def __init__(self, fn, cfg: HMCConfig, rng, dim):
        self.fn = fn
        self.cfg = cfg
        self.rng = rng
        self.eps = cfg.init_step
        self.set_metric(np.ones(dim))

    def set_metric(self, minv):
        self.minv = minv
        if minv.ndim == 2:
            self._chol = np.linalg.cholesky(minv)
        else:
            self._isd = 1.0 / np.sqrt(minv)

    def draw_momentum(self, dim):
        z = self.rng.standard_normal(dim)
        if self.minv.ndim == 2:
            # p ~ N(0, M) with M = inv(minv) = inv(L L')
            return np.linalg.solve(self._chol.T, z)
        return z * self._isd

    def hamiltonian(self, pt):
        if not np.isfinite(pt.lp):
            return np.inf
        with np.errstate(over="ignore", invalid="ignore"):
            return -pt.lp + 0.5 * float(pt.p @ _velocity(self.minv, pt.p))

    def step(self, pt, direction):
        q, p, lp, g = leapfrog(pt.q, pt.p, direction * self.eps, self.fn, self.minv, pt.g)
        return _Point(q, p, lp, g)

    def build(self, pt, depth, direction, H0, st: _Stats) -> _Tree:
        if depth == 0:
            new = self.step(pt, direction)
            st.n_leapfrog += 1
            h = self.hamiltonian(new)
            if math.isnan(h):
                h = np.inf
            t = _Tree()
            t.valid = not (h - H0 > self.cfg.max_energy_error)
            if not t.valid:
                st.divergent = True
            st.sum_accept += 1.0 if H0 - h > 0 else math.exp(H0 - h)
            t.lsw = H0 - h
            t.edge = t.prop = new
            t.p_beg = t.p_end = new.p
            t.ps_beg = t.ps_end = _velocity(self.minv, new.p)
            t.rho = new.p.copy()
            return t

        left = self.build(pt, depth - 1, direction, H0, st)
        if not left.valid:
            return left
        right = self.build(left.edge, depth - 1, direction, H0, st)
        if not right.valid:
            return right
        t = _Tree()
        t.edge = right.edge
        t.lsw = np.logaddexp(left.lsw, right.lsw)
        if self.rng.uniform() < math.exp(right.lsw - t.lsw):
            t.prop = right.prop
        else:
            t.prop = left.prop
        t.rho = left.rho + right.rho
        t.p_beg, t.ps_beg = left.p_beg, left.ps_beg
        t.p_end, t.ps_end = right.p_end, right.ps_end
        t.valid = (
            _no_uturn(t.ps_beg, t.ps_end, t.rho)
            and _no_uturn(left.ps_beg, right.ps_beg, left.rho + right.p_beg)
            and _no_uturn(left.ps_end, right.ps_end, right.rho + left.p_end)
        )
        return t

    def transition(self, cur: _Point):
        cfg, rng = self.cfg, self.rng
        p0 = self.draw_momentum(cur.q.size)
        start = _Point(cur.q, p0, cur.lp, cur.g)
        H0 = self.hamiltonian(start)
        fwd = bck = start
        p_fwd_bck = p_fwd_fwd = p_bck_fwd = p_bck_bck = p0
        ps0 = _velocity(self.minv, p0)
        ps_fwd_bck = ps_fwd_fwd = ps_bck_fwd = ps_bck_bck = ps0
        rho = p0.copy()
        lsw = 0.0
        sample = start
        st = _Stats()
        depth = 0
        while depth < cfg.max_depth:
            if rng.uniform() > 0.5:
                rho_bck = rho
                sub = self.build(fwd, depth, 1, H0, st)
                if not sub.valid:
                    break
                fwd = sub.edge
                rho_fwd = sub.rho
                p_fwd_bck, ps_fwd_bck = sub.p_beg, sub.ps_beg
                p_fwd_fwd, ps_fwd_fwd = sub.p_end, sub.ps_end
            else:
                rho_fwd = rho
                sub = self.build(bck, depth, -1, H0, st)
                if not sub.valid:
                    break
                bck = sub.edge
                rho_bck = sub.rho
                p_bck_fwd, ps_bck_fwd = sub.p_beg, sub.ps_beg
                p_bck_bck, ps_bck_bck = sub.p_end, sub.ps_end
            depth += 1
            # biased progressive sampling favours the new subtree
            if sub.lsw > lsw or rng.uniform() < math.exp(sub.lsw - lsw):
                sample = sub.prop
            lsw = np.logaddexp(lsw, sub.lsw)
            rho = rho_bck + rho_fwd
            if not (
                _no_uturn(ps_bck_bck, ps_fwd_fwd, rho)
                and _no_uturn(ps_bck_bck, ps_fwd_bck, rho_bck + p_fwd_bck)
                and _no_uturn(ps_bck_fwd, ps_fwd_fwd, rho_fwd + p_bck_fwd)
            ):
                break
        accept = st.sum_accept / max(st.n_leapfrog, 1)
        new = _Point(sample.q, sample.p, sample.lp, sample.g)
        return new, {
            "accept": accept,
            "depth": depth,
            "n_leapfrog": st.n_leapfrog,
            "divergent": st.divergent,
            "energy": self.hamiltonian(sample),
        }

    def init_stepsize(self, cur: _Point):
        """Double or halve the step until one-step acceptance crosses 0.8."""
        rng = self.rng
        direction = 0
        for _ in range(100):
            p = self.draw_momentum(cur.q.size)
            start = _Point(cur.q, p, cur.lp, cur.g)
            H0 = self.hamiltonian(start)
            new = self.step(start, 1)
            dH = H0 - self.hamiltonian(new)
            if math.isnan(dH):
                dH = -np.inf
            if direction == 0:
                direction = 1 if dH > math.log(0.8) else -1
            if direction == 1 and not dH > math.log(0.8):
                break
            if direction == -1 and not dH < math.log(0.8):
                break
            self.eps = self.eps * 2.0 if direction == 1 else self.eps / 2.0
            if self.eps > 1e7 or self.eps < 1e-12:
                raise SamplerAbort(f"step-size search diverged (step {self.eps:g})")


class _DualAveraging:
    gamma, t0, kappa = 0.05, 10.0, 0.75

    def __init__(self, eps, delta):
        self.delta = delta
        self.restart(eps)

    def restart(self, eps):
        self.mu = math.log(10 * eps)
        self.counter = 0
        self.s_bar = 0.0
        self.x_bar = 0.0

    def update(self, accept):
        self.counter += 1
        accept = min(1.0, accept)
        eta = 1.0 / (self.counter + self.t0)
        self.s_bar = (1 - eta) * self.s_bar + eta * (self.delta - accept)
        x = self.mu - self.s_bar * math.sqrt(self.counter) / self.gamma
        x_eta = self.counter ** (-self.kappa)
        self.x_bar = (1 - x_eta) * self.x_bar + x_eta * x
        return math.exp(x)

    def final(self):
        return math.exp(self.x_bar)


def _metric_windows(warmup):
    """Iteration indices at which a metric window closes, with window starts."""
    if warmup < 20:
        return []
    a, b, c = int(0.15 * warmup), int(0.5 * warmup), int(0.9 * warmup)
    return [(a, b), (b, c)]


def _regularized_metric(x, dense=False):
    """Warmup covariance shrunk toward ``1e-3 I`` with weight ``5 / (n + 5)``."""
    n = x.shape[0]
    if dense:
        cov = np.atleast_2d(np.cov(x, rowvar=False))
        return (n / (n + 5.0)) * cov + 1e-3 * (5.0 / (n + 5.0)) * np.eye(x.shape[1])
    var = x.var(axis=0, ddof=1)
    return (n / (n + 5.0)) * var + 1e-3 * (5.0 / (n + 5.0))


def nuts_sample(target, config: HMCConfig, init, chain: int = 0, progress=None) -> PosteriorChain:
    """Run one chain from ``init``; the generator is seeded with ``seed + chain``.

    ``progress(iteration, info, step_size)`` is called after every transition.
    """
    fn = _as_fn(target)
    rng = np.random.default_rng(config.seed + chain)
    q0 = np.array(init, dtype=float)
    lp, g = _eval(fn, q0)
    if not np.isfinite(lp):
        raise ValueError("log density is not finite at the initial state")
    cur = _Point(q0, None, lp, g)
    dim = q0.size
    nuts = _NUTS(fn, config, rng, dim)
    nuts.init_stepsize(cur)
    da = _DualAveraging(nuts.eps, config.target_accept)
    windows = _metric_windows(config.warmup) if config.adapt_mass else []
    window_buf = []

    total = config.warmup + config.draws
    kept = config.draws
    draws = np.empty((kept, dim))
    out = {k: np.empty(kept) for k in ("logp", "accept", "energy")}
    divergent = np.zeros(kept, dtype=bool)
    depth = np.zeros(kept, dtype=int)
    nleap = np.zeros(kept, dtype=int)
    warm_div = 0
    run_div = 0

    for it in range(total):
        cur, info = nuts.transition(cur)
        if progress is not None:
            progress(it, info, nuts.eps)
        run_div = run_div + 1 if info["divergent"] else 0
        if run_div >= ABORT_AFTER:
            raise SamplerAbort(
                f"chain {chain}: {ABORT_AFTER} consecutive divergent iterations "
                f"at iteration {it} (step size {nuts.eps:.3g})"
            )
        if it < config.warmup:
            warm_div += info["divergent"]
            nuts.eps = da.update(info["accept"])
            for lo, hi in windows:
                if lo <= it < hi:
                    window_buf.append(cur.q)
                if it == hi - 1:
                    nuts.set_metric(_regularized_metric(np.array(window_buf), config.metric == "dense"))
                    window_buf = []
                    nuts.init_stepsize(cur)
                    da.restart(nuts.eps)
            if it == config.warmup - 1:
                nuts.eps = da.final()
            continue
        k = it - config.warmup
        draws[k] = cur.q
        out["logp"][k] = cur.lp
        out["accept"][k] = info["accept"]
        out["energy"][k] = info["energy"]
        divergent[k] = info["divergent"]
        depth[k] = info["depth"]
        nleap[k] = info["n_leapfrog"]

    return PosteriorChain(
        draws=draws, logp=out["logp"], accept_stat=out["accept"], divergent=divergent,
        tree_depth=depth, n_leapfrog=nleap, energy=out["energy"], step_size=nuts.eps,
        inv_metric=nuts.minv.copy(), warmup_divergences=warm_div, chain=chain,
    )


def find_initial(target, draw, rng, tries: int = 100):
    """First of up to ``tries`` states from ``draw(rng)`` with finite log density."""
    fn = _as_fn(target)
    for _ in range(tries):
        x = np.asarray(draw(rng), dtype=float)
        lp, _ = _eval(fn, x)
        if np.isfinite(lp):
            return x
    raise SamplerAbort(f"no initial state with finite log density in {tries} prior draws")


def run_chains(target, config: HMCConfig, init=None, draw_init=None) -> list[PosteriorChain]:
    """Independent chains; each starts from ``init`` or a prior draw.

    Initial states are drawn with the chain's own generator stream offset so
    that chain ``c`` depends only on ``seed + c``.
    """
    chains = []
    for c in range(config.chains):
        if init is not None:
            x0 = np.asarray(init, dtype=float)
        else:
            if draw_init is None:
                raise ValueError("need an explicit init or a draw_init function")
            x0 = find_initial(target, draw_init, np.random.default_rng([config.seed + c, 1]))
        chains.append(nuts_sample(target, config, x0, chain=c))
    return chains
