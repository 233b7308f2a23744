"""Deterministic node sets for the two frequency-domain norms.

``BoxQuadrature`` is a tensor midpoint rule on the cube ``[-T, T]^d``.
``SphereLineQuadrature`` covers the boundary-corrected metric: a polar rule
on the Euclidean ball plus, for every direction on the sphere of radius T,
a Gauss-Legendre rule along the segment from the origin.
"""

from __future__ import annotations

from dataclasses import dataclass
from math import gamma, pi

import numpy as np

from .errors import QuadratureEvaluationError, ResourceError

MAX_NODES = 10**7

DEFAULTS = {
    1: {"m": 128},
    2: {"m": 48, "M": 64, "q": 16},
    3: {"m": 24, "M": 256, "q": 16},
}


def _frozen(a):
    a = np.ascontiguousarray(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class BoxQuadrature:
    T: float
    m: int
    d: int
    nodes: np.ndarray
    weights: np.ndarray

    def __len__(self):
        return self.weights.size


def build_box(T: float, m: int, d: int) -> BoxQuadrature:
    """Midpoint tensor rule with ``m`` nodes per axis on ``[-T, T]^d``."""
    if not T > 0:
        raise ValueError("T must be positive")
    if m < 2:
        raise ValueError("need at least two nodes per dimension")
    if d < 1:
        raise ValueError("dimension must be positive")
    if d * np.log2(m) > np.log2(MAX_NODES):
        raise ResourceError(f"{m}^{d} nodes exceeds the budget of {MAX_NODES}")
    h = 2.0 * T / m
    axis = -T + h * (np.arange(m) + 0.5)
    grids = np.meshgrid(*([axis] * d), indexing="ij")
    nodes = np.stack([g.ravel() for g in grids], axis=1)
    weights = np.full(nodes.shape[0], h**d)
    return BoxQuadrature(float(T), int(m), int(d), _frozen(nodes), _frozen(weights))


def seminorm_sq(values, quad) -> float:
    """``sum_k w_k |f(t_k)|^2``; vector-valued ``values`` use the Euclidean norm."""
    v = np.asarray(values)
    w = quad.weights if hasattr(quad, "weights") else np.asarray(quad)
    if v.shape[0] != w.size:
        raise ValueError(f"{v.shape[0]} values for {w.size} nodes")
    mag = np.abs(v) ** 2
    if mag.ndim > 1:
        mag = mag.reshape(mag.shape[0], -1).sum(axis=1)
    return float(w @ mag)


def fold_symmetric(nodes, weights):
    """Keep one node of each ``(t, -t)`` pair with doubled weight.

    Valid for integrands with ``|f(-t)| = |f(t)|`` on a node set closed under
    negation; the origin, if present, keeps its weight.
    """
    nodes = np.asarray(nodes)
    nz = nodes != 0
    first = np.argmax(nz, axis=1)
    lead = nodes[np.arange(nodes.shape[0]), first]
    origin = ~nz.any(axis=1)
    keep = (lead > 0) | origin
    w = np.where(origin, 1.0, 2.0) * np.asarray(weights)
    return _frozen(nodes[keep]), _frozen(w[keep])


def _fibonacci_sphere(M):
    i = np.arange(M) + 0.5
    z = 1.0 - 2.0 * i / M
    r = np.sqrt(1.0 - z**2)
    phi = pi * (3.0 - np.sqrt(5.0)) * i
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)


def _unit_directions(M, d):
    if d == 2:
        ang = 2 * pi * np.arange(M) / M
        return np.stack([np.cos(ang), np.sin(ang)], axis=1)
    return _fibonacci_sphere(M)


def _gauss_legendre_01(q):
    x, w = np.polynomial.legendre.leggauss(q)
    return 0.5 * (x + 1.0), 0.5 * w


@dataclass(frozen=True, eq=False)
class SphereLineQuadrature:
    T: float
    M: int
    q: int
    d: int
    sphere_nodes: np.ndarray
    sphere_weights: np.ndarray
    line_nodes: np.ndarray
    line_weights: np.ndarray
    ball_nodes: np.ndarray
    ball_weights: np.ndarray

    @property
    def boundary_nodes(self) -> np.ndarray:
        """Points ``s z`` for every line node ``s`` and sphere node ``z``."""
        return (self.line_nodes[:, None, None] * self.sphere_nodes[None, :, :]).reshape(-1, self.d)

    @property
    def boundary_weights(self) -> np.ndarray:
        return np.outer(self.line_weights, self.sphere_weights).ravel()

    @property
    def nodes(self) -> np.ndarray:
        """Volume and boundary nodes stacked; the full metric is one weighted sum."""
        return np.vstack([self.ball_nodes, self.boundary_nodes])

    @property
    def weights(self) -> np.ndarray:
        return np.concatenate([self.ball_weights, self.boundary_weights])

    def __len__(self):
        return self.ball_weights.size + self.boundary_weights.size


def build_sphere_line(T: float, M: int, q: int, d: int, radial: int | None = None) -> SphereLineQuadrature:
    """Sphere, segment and ball rules for the boundary-corrected metric.

    Directions are equally spaced angles (d=2) or a Fibonacci lattice (d=3),
    each carrying an equal share of the sphere's surface measure. The ball
    rule reuses the directions with ``radial`` Gauss-Legendre radii weighted
    by ``r^(d-1)``.
    """
    if d not in (2, 3):
        raise ValueError(
            "the boundary-corrected metric supports d in {2, 3}; "
            "for d=1 use the plain posterior on a BoxQuadrature"
        )
    if not T > 0:
        raise ValueError("T must be positive")
    if M < 8:
        raise ValueError("need at least 8 sphere nodes")
    if q < 4:
        raise ValueError("need at least 4 line nodes")
    radial = radial or max(4, DEFAULTS[d]["m"] // 2)
    u = _unit_directions(M, d)
    area_unit = 2 * pi ** (d / 2) / gamma(d / 2)
    sphere_nodes = T * u
    sphere_weights = np.full(M, area_unit * T ** (d - 1) / M)
    line_nodes, line_weights = _gauss_legendre_01(q)
    r01, wr01 = _gauss_legendre_01(radial)
    r = T * r01
    wr = T * wr01 * r ** (d - 1)
    ball_nodes = (r[:, None, None] * u[None, :, :]).reshape(-1, d)
    ball_weights = np.outer(wr, np.full(M, area_unit / M)).ravel()
    return SphereLineQuadrature(
        float(T), int(M), int(q), int(d),
        _frozen(sphere_nodes), _frozen(sphere_weights),
        _frozen(line_nodes), _frozen(line_weights),
        _frozen(ball_nodes), _frozen(ball_weights),
    )


def boundary_metric_sq(g, quad: SphereLineQuadrature) -> float:
    """Volume integral of ``||g||^2`` over the ball plus the sphere-segment term.

    ``g`` maps an (N, d) array of points to (N,) or (N, k) values.
    """
    nodes = quad.nodes
    vals = np.asarray(g(nodes))
    mag = np.abs(vals) ** 2
    if mag.ndim > 1:
        mag = mag.reshape(mag.shape[0], -1).sum(axis=1)
    bad = ~np.isfinite(mag)
    if np.any(bad):
        raise QuadratureEvaluationError(nodes[int(np.argmax(bad))].copy())
    return float(quad.weights @ mag)


def volume_term_sq(g, quad: SphereLineQuadrature) -> float:
    vals = np.asarray(g(quad.ball_nodes))
    mag = np.abs(vals) ** 2
    if mag.ndim > 1:
        mag = mag.reshape(mag.shape[0], -1).sum(axis=1)
    return float(quad.ball_weights @ mag)
