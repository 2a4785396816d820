"""Compactly supported Wendland bases for the low-rank scale process.

Knots are drawn from the mesh nodes near the data by a greedy max-min
ordering; basis values are rescaled to sum to one at every site.
"""

import csv
from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist

from .errors import CoverageError, EmptyCandidateError, ParameterError, SizeError

__all__ = ["KnotSet", "BasisSystem", "wendland2", "candidate_knots", "maxmin_order",
           "phi_bounds", "basis_system", "default_phi_grid"]


def wendland2(d, phi):
    """Wendland function of order 2 in R^2 with support radius ``phi``.

    ``(1 - d/phi)^6 (35 d^2/phi^2 + 18 d/phi + 3)`` for ``d < phi``, else 0.
    """
    d = np.asarray(d, dtype=float)
    if not phi > 0:
        raise ParameterError("phi must be positive")
    if np.any(d < 0):
        raise ParameterError("distances must be non-negative")
    x = d / phi
    out = (1.0 - x) ** 6 * (35.0 * x ** 2 + 18.0 * x + 3.0)
    return np.where(d < phi, out, 0.0)


@dataclass(frozen=True)
class KnotSet:
    knots: np.ndarray
    c: float = 1.0
    indices: np.ndarray = None      # positions within the candidate list

    @property
    def K(self):
        return self.knots.shape[0]

    def to_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as f:
            w = csv.writer(f)
            w.writerow(["k", "x", "y"])
            for k, (x, y) in enumerate(self.knots):
                w.writerow([k, repr(float(x)), repr(float(y))])

    @classmethod
    def from_csv(cls, path, c=1.0):
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        order = np.argsort(data[:, 0])
        return cls(knots=data[order, 1:3], c=c)


def candidate_knots(mesh_nodes, sites, c=0.05, return_index=False):
    """Mesh nodes within ``c`` times the farthest-node distance of some site.

    Returned in mesh-node order, without duplicates.
    """
    if not 0 < c <= 1:
        raise ParameterError("c must lie in (0, 1]")
    nodes = np.asarray(mesh_nodes, dtype=float).reshape(-1, 2)
    d = cdist(np.asarray(sites, dtype=float).reshape(-1, 2), nodes)
    radius = c * d.max(axis=1, keepdims=True)
    keep = np.nonzero(np.any(d <= radius, axis=0))[0]
    if keep.size == 0:
        raise EmptyCandidateError(f"no mesh node within c={c} of any site")
    if return_index:
        return nodes[keep], keep
    return nodes[keep]


def maxmin_order(candidates, K, c=1.0):
    """First ``K`` points of the maximum-minimum ordering of ``candidates``.

    The first knot is the most central candidate (least mean distance to the
    others); each later knot maximizes its minimum distance to the knots
    already chosen.  Ties go to the lowest candidate index.
    """
    pts = np.asarray(candidates, dtype=float).reshape(-1, 2)
    n = pts.shape[0]
    if K < 1 or K > n:
        raise SizeError(f"K={K} but only {n} candidates are available")
    d = cdist(pts, pts)
    order = [int(np.argmin(d.sum(axis=1)))]
    mind = d[order[0]].copy()
    mind[order[0]] = -np.inf
    for _ in range(1, K):
        j = int(np.argmax(mind))
        order.append(j)
        np.minimum(mind, d[j], out=mind)
        mind[order] = -np.inf
    idx = np.array(order, dtype=np.int64)
    return KnotSet(knots=pts[idx], c=c, indices=idx)


def phi_bounds(sites, knots):
    """Smallest range covering every site, and smallest range at which one basis covers all sites."""
    kn = knots.knots if isinstance(knots, KnotSet) else np.asarray(knots, dtype=float).reshape(-1, 2)
    d = cdist(np.asarray(sites, dtype=float).reshape(-1, 2), kn)
    return float(d.min(axis=1).max()), float(d.max(axis=0).min())


def default_phi_grid(phi_min, phi_max):
    return [0.75 * phi_min + 0.25 * phi_max, 0.5 * phi_min + 0.5 * phi_max,
            0.25 * phi_min + 0.75 * phi_max]


@dataclass(frozen=True)
class BasisSystem:
    """Rescaled basis weights at the sites.

    Attributes
    ----------
    B : (N, K) array
        Rows sum to one; ``B[i, k] == 0`` iff site ``i`` is at distance
        ``>= phi`` from knot ``k``.
    raw : (N, K) array
        Unscaled Wendland values.
    """

    B: np.ndarray
    raw: np.ndarray
    phi: float
    knots: np.ndarray
    sites: np.ndarray

    @property
    def K(self):
        return self.B.shape[1]

    @property
    def N(self):
        return self.B.shape[0]

    def weights(self, gamma):
        """``B ** (1/gamma)`` with exact zeros kept."""
        with np.errstate(divide="ignore"):
            return np.where(self.B > 0, np.exp(np.log(self.B) / gamma), 0.0)

    def to_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as f:
            w = csv.writer(f)
            if self.N * self.K <= 100_000:
                w.writerow(["site"] + [f"B{k}" for k in range(self.K)])
                for i, row in enumerate(self.B):
                    w.writerow([i] + [repr(float(v)) for v in row])
            else:
                w.writerow(["row", "col", "value"])
                for i, k in zip(*np.nonzero(self.B)):
                    w.writerow([int(i), int(k), repr(float(self.B[i, k]))])


def basis_system(sites, knots, phi):
    """Evaluate and rescale the Wendland basis at ``sites``.

    Raises
    ------
    CoverageError
        If some site is at distance ``>= phi`` from every knot.
    """
    sites = np.asarray(sites, dtype=float).reshape(-1, 2)
    kn = knots.knots if isinstance(knots, KnotSet) else np.asarray(knots, dtype=float).reshape(-1, 2)
    raw = wendland2(cdist(sites, kn), phi)
    total = raw.sum(axis=1)
    if np.any(total <= 0):
        i = int(np.nonzero(total <= 0)[0][0])
        raise CoverageError(i, f"site {i} is not covered by any basis function at phi={phi}")
    return BasisSystem(B=raw / total[:, None], raw=raw, phi=float(phi), knots=kn, sites=sites)
