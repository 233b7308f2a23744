"""Posterior-mean densities, demeaning, pointwise credible bands and error metrics."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .mixture import MixtureParams, demean, log_density


def _axis_weights(x):
    """Rectangle-rule weights: half-gaps inside, the full adjacent gap at the ends."""
    x = np.asarray(x, dtype=float)
    if x.size == 1:
        return np.ones(1)
    gaps = np.diff(x)
    w = np.empty_like(x)
    w[1:-1] = 0.5 * (gaps[:-1] + gaps[1:])
    w[0], w[-1] = gaps[0], gaps[-1]
    return w


@dataclass
class Grid:
    """Rectangular evaluation grid given by one coordinate axis per dimension."""

    axes: list

    def __post_init__(self):
        self.axes = [np.asarray(a, dtype=float).reshape(-1) for a in self.axes]
        if not self.axes or any(a.size < 1 for a in self.axes):
            raise ValueError("grid axes must be non-empty")

    @property
    def d(self) -> int:
        return len(self.axes)

    @property
    def points(self) -> np.ndarray:
        mesh = np.meshgrid(*self.axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)

    @property
    def weights(self) -> np.ndarray:
        ws = [_axis_weights(a) for a in self.axes]
        out = ws[0]
        for w in ws[1:]:
            out = np.outer(out, w).ravel()
        return out

    def __len__(self):
        return int(np.prod([a.size for a in self.axes]))


def as_grid(grid) -> Grid:
    if isinstance(grid, Grid):
        return grid
    g = np.asarray(grid, dtype=float)
    if g.ndim <= 1:
        return Grid([g])
    raise ValueError("pass a Grid for multivariate evaluation points")


def default_grid(data, points: int = 512, width: float = 3.0, points_2d: int = 64) -> Grid:
    """Data range padded by ``width`` sample standard deviations per axis."""
    x = np.asarray(data, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    n_axis = points if x.shape[1] == 1 else points_2d
    sd = x.std(axis=0, ddof=1) if x.shape[0] > 1 else np.ones(x.shape[1])
    sd = np.where(sd > 0, sd, 1.0)
    lo = x.min(axis=0) - width * sd
    hi = x.max(axis=0) + width * sd
    return Grid([np.linspace(a, b, n_axis) for a, b in zip(lo, hi)])


@dataclass
class DensityGrid:
    """Posterior-mean density on a grid with optional pointwise bands.

    ``bands`` maps a credible level to ``(lower, upper)`` arrays.
    """

    grid: Grid
    mean_density: np.ndarray
    bands: dict = field(default_factory=dict)
    n_draws: int = 0

    def to_csv(self, path) -> None:
        pts = self.grid.points
        levels = sorted(self.bands)
        head = [f"x{i + 1}" for i in range(pts.shape[1])] + ["mean"]
        for lv in levels:
            head += [f"lower_{lv:g}", f"upper_{lv:g}"]
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(head)
            for i, p in enumerate(pts):
                row = [repr(float(v)) for v in p] + [repr(float(self.mean_density[i]))]
                for lv in levels:
                    lo, up = self.bands[lv]
                    row += [repr(float(lo[i])), repr(float(up[i]))]
                w.writerow(row)


def _draw_densities(draws, grid: Grid) -> np.ndarray:
    pts = grid.points
    return np.stack([np.exp(log_density(p, pts)) for p in draws])


def posterior_mean_density(draws, grid, levels=()) -> DensityGrid:
    """Pointwise average of draw densities, plus bands at each requested level."""
    draws = list(draws)
    if not draws:
        raise ValueError("no posterior draws")
    g = as_grid(grid)
    dens = _draw_densities(draws, g)
    bands = {float(lv): _quantile_band(dens, lv) for lv in levels}
    return DensityGrid(g, dens.mean(axis=0), bands, len(draws))


def demean_draws(draws) -> list[MixtureParams]:
    return [demean(p) for p in draws]


def _quantile_band(dens, level):
    if not 0 < level < 1:
        raise ValueError(f"credible level {level} outside (0, 1)")
    lo = np.quantile(dens, (1 - level) / 2, axis=0, method="inverted_cdf")
    hi = np.quantile(dens, (1 + level) / 2, axis=0, method="inverted_cdf")
    return lo, hi


def credible_band(draws, grid, level: float = 0.9):
    """Pointwise ``(1 -+ level) / 2`` quantiles of the draw densities.

    Quantiles use the inverse empirical CDF, so bands are order statistics
    of the draws and saturate at the min/max envelope.
    """
    draws = list(draws)
    if len(draws) < 2:
        raise ValueError("a band needs at least two draws")
    if not 0 < level < 1:
        raise ValueError(f"credible level {level} outside (0, 1)")
    return _quantile_band(_draw_densities(draws, as_grid(grid)), level)


def density_error(estimate: DensityGrid, truth) -> dict:
    """L2 (grid quadrature) and sup-norm distance to ``truth(points)``."""
    pts = estimate.grid.points
    ref = np.asarray(truth(pts if estimate.grid.d > 1 else pts[:, 0]), dtype=float).reshape(-1)
    diff = estimate.mean_density - ref
    l2 = float(np.sqrt(estimate.grid.weights @ diff**2))
    return {"l2": l2, "linf": float(np.max(np.abs(diff)))}
