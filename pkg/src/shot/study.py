"""Grid designs and synthetic datasets used by the simulation studies and demos."""

from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import pdist

from .basis import basis_system, candidate_knots, maxmin_order, phi_bounds
from .inference import make_dataset
from .mesh import SpdeOperator, build_rect_mesh, fem_matrices, projection_matrix
from .model import MixParams, ModelParams, simulate_full

__all__ = ["Design", "grid_design", "design_from_sites", "design_on_mesh", "grid_covariates",
           "synthetic_elevation", "simulate_dataset"]


@dataclass
class Design:
    mesh: object
    fem: object
    A: object
    sites: np.ndarray
    covariates: np.ndarray
    knots: object
    phi_min: float
    phi_max: float
    delta: float

    def phi_at(self, frac=0.25):
        """``(1 - frac) phi_min + frac phi_max``."""
        return (1.0 - frac) * self.phi_min + frac * self.phi_max

    def basis(self, phi):
        return basis_system(self.sites, self.knots, phi)

    def operator(self, psi, r):
        return SpdeOperator(self.fem, self.A, psi, r)


def synthetic_elevation(sites):
    """Smooth centered bump standing in for elevation on synthetic grids."""
    sites = np.asarray(sites, dtype=float)
    cx, cy = (sites - sites.mean(axis=0)).T
    span = max(np.ptp(sites[:, 0]), np.ptp(sites[:, 1]), 1e-12)
    elev = np.cos(np.pi * cx / span) * np.cos(np.pi * cy / span)
    return elev - elev.mean()


def grid_covariates(sites, elev=None):
    """Intercept, centered coordinates and centered elevation (synthetic if not given)."""
    sites = np.asarray(sites, dtype=float)
    cx, cy = (sites - sites.mean(axis=0)).T
    elev = synthetic_elevation(sites) if elev is None else np.asarray(elev, float) - np.mean(elev)
    return np.column_stack([np.ones(len(sites)), cx, cy, elev])


def grid_design(nx=8, ny=8, spacing=0.5, edge=None, extension=None, K=25, c=0.05,
                origin=(0.0, 0.0)):
    """Regular ``nx`` x ``ny`` site grid; with the default edge length sites sit on mesh nodes.

    Knots are the first ``K`` max-min points among the candidate mesh nodes.
    Defaults: ``edge = spacing``, ``extension = 2 * spacing``.
    """
    edge = spacing if edge is None else edge
    extension = 2.0 * spacing if extension is None else extension
    xs = origin[0] + np.arange(nx) * spacing
    ys = origin[1] + np.arange(ny) * spacing
    sites = np.array([(x, y) for y in ys for x in xs])
    return design_from_sites(sites, edge, extension, K=K, c=c)


def design_from_sites(sites, edge, extension, K=25, c=0.05, elev=None):
    """Rectangular mesh around the sites' bounding box plus max-min knots."""
    sites = np.asarray(sites, dtype=float)
    lo, hi = sites.min(axis=0), sites.max(axis=0)
    mesh = build_rect_mesh((lo[0], lo[1], hi[0], hi[1]), edge, extension=extension)
    return design_on_mesh(mesh, sites, K=K, c=c, elev=elev)


def design_on_mesh(mesh, sites, K=25, c=0.05, elev=None):
    sites = np.asarray(sites, dtype=float)
    fem = fem_matrices(mesh)
    A = projection_matrix(mesh, sites)
    cand = candidate_knots(mesh.vertices, sites, c=c)
    knots = maxmin_order(cand, K, c=c)
    lo, hi = phi_bounds(sites, knots)
    return Design(mesh=mesh, fem=fem, A=A, sites=sites, covariates=grid_covariates(sites, elev),
                  knots=knots, phi_min=lo, phi_max=hi, delta=float(pdist(sites).max()))


def simulate_dataset(design, T=500, seed=0, tau=10.0, psi_frac=0.15, r=0.9, gamma=5.0, beta=0.0,
                     phi_frac=0.25, quantile=0.95, theta=(5.0, 0.0, 0.0, 0.0), quad=0.25):
    """Synthetic censored dataset with the simulation-study truths.

    The location is ``theta[0] + quad * (x^2 + y^2 + elev^2)`` on centered
    covariates (so ``tau_mu`` is effectively infinite).

    Returns
    -------
    data : Dataset
    truth : dict
        ``params`` (ModelParams), ``basis``, ``op``, ``realization``.
    """
    phi = design.phi_at(phi_frac)
    basis = design.basis(phi)
    psi = psi_frac * design.delta
    op = design.operator(psi, r)
    D = design.covariates
    mu = theta[0] + quad * (D[:, 1] ** 2 + D[:, 2] ** 2 + D[:, 3] ** 2)
    params = ModelParams(mix=MixParams(beta, gamma), psi=psi, r=r, tau=tau, theta=theta,
                         mu=mu, phi=phi, K=design.knots.K)
    real = simulate_full(params, D, op, basis, T, seed)
    data = make_dataset(real.Y, design.sites, D, threshold_quantile=quantile)
    return data, dict(params=params, basis=basis, op=op, realization=real, phi=phi, psi=psi)
