"""Empirical characteristic functions evaluated on fixed node sets."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

# complex entries per evaluation block; bounds the (nodes x n) phase matrix
_BLOCK = 2_000_000


def as_dataset(x) -> np.ndarray:
    """Coerce observations to an (n, d) float array with finite entries."""
    a = np.asarray(x, dtype=float)
    if a.ndim == 0:
        a = a.reshape(1, 1)
    elif a.ndim == 1:
        a = a[:, None]
    if a.ndim != 2 or a.shape[0] < 1:
        raise ValueError("a dataset needs at least one observation")
    if not np.all(np.isfinite(a)):
        raise ValueError("dataset contains non-finite entries")
    return a


def load_csv(path, header: bool = False) -> np.ndarray:
    """Read one observation per row; ``header`` skips the first line."""
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if header:
        rows = rows[1:]
    rows = [r for r in rows if r and any(c.strip() for c in r)]
    if not rows:
        raise ValueError(f"{path}: no observations")
    return as_dataset([[float(c) for c in r] for r in rows])


def save_csv(path, data) -> None:
    data = as_dataset(data)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        for row in data:
            w.writerow([repr(float(v)) for v in row])


def _nodes(t, d):
    t = np.asarray(t, dtype=float)
    if d == 1 and t.ndim <= 1:
        return t.reshape(-1, 1), t.ndim == 0
    return np.atleast_2d(t), t.ndim == 1


def _moments(z, t, w=None, second=False):
    """Blocked ``E_n[e^{i t'Z}]`` with optional ``E_n[W e^{..}]`` and ``E_n[Z Z' e^{..}]``."""
    n = z.shape[0]
    N = t.shape[0]
    phi = np.empty(N, dtype=complex)
    first = np.empty((N, w.shape[1]), dtype=complex) if w is not None else None
    sec = np.empty((N, z.shape[1], z.shape[1]), dtype=complex) if second else None
    zz = np.einsum("na,nb->nab", z, z).reshape(n, -1) if second else None
    step = max(1, _BLOCK // max(n, 1))
    for lo in range(0, N, step):
        hi = min(N, lo + step)
        E = np.exp(1j * (t[lo:hi] @ z.T))  # (block, n)
        phi[lo:hi] = E.mean(axis=1)
        if w is not None:
            first[lo:hi] = E @ w / n
        if second:
            sec[lo:hi] = (E @ zz / n).reshape(hi - lo, z.shape[1], z.shape[1])
    return phi, first, sec


def ecf_eval(data, t):
    """``(1/n) sum_j exp(i t' Z_j)`` at one node or an (N, d) array of nodes."""
    z = as_dataset(data)
    tt, single = _nodes(t, z.shape[1])
    phi, _, _ = _moments(z, tt)
    return phi[0] if single else phi


def ecf_weighted(w_data, z_data, t):
    """``(1/n) sum_j i W_j exp(i t' Z_j)``, a d*-vector per node."""
    w = as_dataset(w_data)
    z = as_dataset(z_data)
    if w.shape[0] != z.shape[0]:
        raise ValueError(f"length mismatch: {w.shape[0]} weights vs {z.shape[0]} observations")
    tt, single = _nodes(t, z.shape[1])
    _, first, _ = _moments(z, tt, w=w)
    out = 1j * first
    return out[0] if single else out


def ecf_hess_combo(data, t):
    """``phi_n(t)^2`` times the Hessian of ``log phi_n`` at ``t``.

    Computed as ``-phi_n E_n[Y Y' e] + E_n[Y e] E_n[Y e]'`` so no division by
    the empirical characteristic function is needed.
    """
    z = as_dataset(data)
    tt, single = _nodes(t, z.shape[1])
    phi, first, sec = _moments(z, tt, w=z, second=True)
    out = -phi[:, None, None] * sec + first[:, :, None] * first[:, None, :]
    return out[0] if single else out


@dataclass(frozen=True, eq=False)
class ECFCache:
    """Estimator values at fixed nodes, indexed positionally.

    ``weighted`` holds ``E_n[i W e^{i t'Z}]`` (N, d*) and ``hess_combo`` the
    premultiplied log-Hessian (N, d, d); either may be absent.
    """

    nodes: np.ndarray
    phi: np.ndarray
    weighted: np.ndarray | None = None
    hess_combo: np.ndarray | None = None
    n: int = 0

    def __post_init__(self):
        for name in ("nodes", "phi", "weighted", "hess_combo"):
            val = getattr(self, name)
            if val is not None:
                val = np.array(val)
                val.setflags(write=False)
                object.__setattr__(self, name, val)

    def __len__(self):
        return self.nodes.shape[0]


def build_cache(data, nodes, which="plain", w_data=None) -> ECFCache:
    """Evaluate the selected estimators once at every node.

    ``which`` is any of ``"plain"``, ``"weighted"``, ``"hess"`` or an iterable
    of them; ``"weighted"`` needs ``w_data`` (the measurement multiplying the
    phase).
    """
    z = as_dataset(data)
    kinds = {which} if isinstance(which, str) else set(which)
    unknown = kinds - {"plain", "weighted", "hess"}
    if unknown:
        raise ValueError(f"unknown estimator kinds {sorted(unknown)}")
    t = np.asarray(nodes, dtype=float).reshape(-1, z.shape[1])
    if t.shape[0] == 0:
        return ECFCache(nodes=t, phi=np.zeros(0, dtype=complex), n=z.shape[0])
    w = None
    if "weighted" in kinds:
        if w_data is None:
            raise ValueError("weighted cache needs w_data")
        w = as_dataset(w_data)
        if w.shape[0] != z.shape[0]:
            raise ValueError("length mismatch between W and Z samples")
    want_hess = "hess" in kinds
    if want_hess:
        w_first = z if w is None else np.hstack([w, z])
    else:
        w_first = w
    phi, first, sec = _moments(z, t, w=w_first, second=want_hess)
    weighted = hess = None
    if w is not None:
        weighted = 1j * first[:, : w.shape[1]]
    if want_hess:
        fz = first[:, -z.shape[1]:]
        hess = -phi[:, None, None] * sec + fz[:, :, None] * fz[:, None, :]
    return ECFCache(nodes=t, phi=phi, weighted=weighted, hess_combo=hess, n=z.shape[0])
