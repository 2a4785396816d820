"""Generative model: scale mixture of a low-rank heavy-tailed scale field and a GMRF.

Core field at the sites::

    X = R * Z,   Z = sqrt(r) A eps + sqrt(1 - r) eta,   eps ~ N(0, Q^-1)

with ``R(s) = sum_k B_k(s)^(1/gamma) R*_k`` (``beta = 0``) and observations
``Y = mu + tau^(-1/2) X``.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.special import kv, logsumexp

from . import rng as _rng
from .errors import NumericError, ParameterError, SizeError

__all__ = ["MixParams", "ModelParams", "Realization", "matern_rho", "sample_scale",
           "scale_cdf", "scale_field", "simulate_core", "iter_core", "simulate_full",
           "simulation_mean"]


@dataclass(frozen=True)
class MixParams:
    beta: float = 0.0
    gamma: float = 5.0

    def __post_init__(self):
        if not self.beta >= 0:
            raise ParameterError("beta must be non-negative")
        if not 0 < self.gamma <= 50:
            raise ParameterError("gamma must lie in (0, 50]")


@dataclass
class ModelParams:
    """Full parameter vector of the observation model."""

    mix: MixParams
    psi: float
    r: float
    tau: float
    theta: np.ndarray = field(default_factory=lambda: np.array([5.0, 0.0, 0.0, 0.0]))
    tau_mu: float = 1e12
    mu: np.ndarray = None
    phi: float = None
    K: int = None

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=float)
        if self.theta.shape != (4,):
            raise ParameterError("theta must have length 4")
        if not self.psi > 0:
            raise ParameterError("psi must be positive")
        if not 0 <= self.r <= 1:
            raise ParameterError("r must lie in [0, 1]")
        if not self.tau > 0 or not self.tau_mu > 0:
            raise ParameterError("precisions must be positive")
        if self.mu is not None:
            self.mu = np.asarray(self.mu, dtype=float)


@dataclass
class Realization:
    """Replicates stacked column-wise (sites x replicates)."""

    X: np.ndarray
    R_star: np.ndarray = None
    eps_star: np.ndarray = None
    eta: np.ndarray = None
    Z: np.ndarray = None
    R: np.ndarray = None
    Y: np.ndarray = None
    mu: np.ndarray = None


def matern_rho(d, psi, r=1.0):
    """Matern correlation (smoothness 1) with nugget: ``r (d/psi) K1(d/psi) + (1-r) 1{d=0}``."""
    d = np.asarray(d, dtype=float)
    if not psi > 0:
        raise ParameterError("psi must be positive")
    if not 0 <= r <= 1:
        raise ParameterError("r must lie in [0, 1]")
    if np.any(d < 0):
        raise ParameterError("distances must be non-negative")
    x = d / psi
    with np.errstate(invalid="ignore", over="ignore"):
        m = np.where(x > 0, x * kv(1, np.where(x > 0, x, 1.0)), 1.0)
    return r * m + (1.0 - r) * (d == 0)


def sample_scale(mix, u):
    """Inverse-CDF draw from the scale distribution; ``u`` uniform on (0, 1)."""
    u = np.asarray(u, dtype=float)
    e = -np.log1p(-u)                      # standard exponential
    if mix.beta == 0:
        return np.exp(e / mix.gamma)
    return np.exp(np.log1p(mix.beta / mix.gamma * e) / mix.beta)


def scale_cdf(mix, x):
    x = np.asarray(x, dtype=float)
    if mix.beta == 0:
        return np.where(x >= 1, -np.expm1(-mix.gamma * np.log(np.maximum(x, 1.0))), 0.0)
    lx = np.log(np.maximum(x, 1.0))
    return np.where(x >= 1, -np.expm1(-mix.gamma * np.expm1(mix.beta * lx) / mix.beta), 0.0)


def scale_field(basis, R_star, mix):
    """Low-rank scale process at the sites.

    Parameters
    ----------
    basis : BasisSystem or (N, K) array of rescaled weights
    R_star : (K,) or (K, T) array, entries >= 1
    mix : MixParams
    """
    B = basis.B if hasattr(basis, "B") else np.asarray(basis, dtype=float)
    R_star = np.asarray(R_star, dtype=float)
    if np.any(R_star < 1):
        raise ParameterError("latent scales must be >= 1")
    with np.errstate(divide="ignore"):
        logw = np.where(B > 0, np.log(np.where(B > 0, B, 1.0)) / mix.gamma, -np.inf)
    if mix.beta == 0:
        return np.exp(logw) @ R_star
    b = mix.beta
    g = np.expm1(b * np.log(R_star)) / b                 # (R*^b - 1) / b
    if R_star.ndim == 1:
        logS = logsumexp(logw + g[None, :], axis=1)
    else:
        logS = logsumexp(logw[:, :, None] + g[None, :, :], axis=1)
    inner = b * logS
    if np.any(inner <= -1):
        raise NumericError("scale field undefined: 1 + beta*log(sum) <= 0 for these weights and gamma")
    return np.exp(np.log1p(inner) / b)


def iter_core(op, basis, mix, T, seed, sites=None, R_star=None, keep_latent=False,
              block=_rng.BLOCK):
    """Yield ``(start, Realization)`` for consecutive replicate blocks.

    Replicate ``t`` always uses stream ``(seed, CORE, t // block)`` and a fixed
    position within it, so a replicate does not depend on ``T``.
    """
    A = op.A if sites is None else op.A[np.asarray(sites)]
    B = basis.B if sites is None else basis.B[np.asarray(sites)]
    N_all = op.n_sites
    rows = np.arange(N_all) if sites is None else np.asarray(sites)
    sr, snr = np.sqrt(op.r), np.sqrt(1.0 - op.r)
    if R_star is not None:
        R_fixed = np.asarray(R_star, dtype=float)
    for b, start in enumerate(range(0, T, block)):
        n = min(block, T - start)
        g = _rng.stream(seed, _rng.CORE, b)
        # always draw a full block so replicate t does not depend on T
        z = g.standard_normal((op.n_nodes, block))[:, :n]
        eta = g.standard_normal((N_all, block))[rows, :n]
        u = g.random((B.shape[1], block))[:, :n]
        eps = op.sample_prior(z)
        Z = sr * (A @ eps) + snr * eta
        if R_star is None:
            Rs = sample_scale(mix, u)
        else:
            Rs = np.broadcast_to(R_fixed.reshape(B.shape[1], -1), (B.shape[1], n))
        R = scale_field(B, Rs, mix)
        X = R * Z
        if keep_latent:
            yield start, Realization(X=X, R_star=np.array(Rs), eps_star=eps, eta=eta, Z=Z, R=R)
        else:
            yield start, Realization(X=X)


def simulate_core(op, basis, mix, T, seed, sites=None, R_star=None, keep_latent=True,
                  dtype=float):
    """Simulate ``T`` independent replicates of the core field.

    Parameters
    ----------
    op : SpdeOperator
    basis : BasisSystem
    mix : MixParams
    T : int
    seed : int
    sites : index array, optional
        Restrict the returned fields to these sites.
    R_star : (K,) array, optional
        Hold the latent scales fixed at these values in every replicate.
    """
    n = op.n_sites if sites is None else len(sites)
    if keep_latent and T * max(op.n_nodes, n) > 5e7:
        raise SizeError("too many replicates to keep latent fields; use keep_latent=False")
    X = np.empty((n, T), dtype=dtype)
    parts = []
    for start, real in iter_core(op, basis, mix, T, seed, sites=sites, R_star=R_star,
                                 keep_latent=keep_latent):
        X[:, start:start + real.X.shape[1]] = real.X
        if keep_latent:
            parts.append(real)
    if not keep_latent:
        return Realization(X=X)
    cat = lambda name: np.concatenate([getattr(p, name) for p in parts], axis=1)
    return Realization(X=X, R_star=cat("R_star"), eps_star=cat("eps_star"), eta=cat("eta"),
                       Z=cat("Z"), R=cat("R"))


def simulation_mean(params, covariates, seed):
    """Location surface ``D theta + eps_mu`` drawn once per dataset."""
    D = np.asarray(covariates, dtype=float)
    if D.ndim != 2 or D.shape[1] != 4:
        raise SizeError("covariates must be an (N, 4) matrix")
    if not np.allclose(D[:, 0], 1.0):
        raise ParameterError("first covariate column must be the intercept (ones)")
    if params.mu is not None:
        if params.mu.shape != (D.shape[0],):
            raise SizeError("mu has the wrong length")
        return params.mu.copy()
    g = _rng.stream(seed, _rng.MEAN)
    return D @ params.theta + g.standard_normal(D.shape[0]) / np.sqrt(params.tau_mu)


def simulate_full(params, covariates, op, basis, T, seed, keep_latent=True):
    """Observations ``Y = mu + tau^-1/2 X`` for ``T`` replicates."""
    D = np.asarray(covariates, dtype=float)
    if D.shape[0] != op.n_sites or basis.N != op.n_sites:
        raise SizeError("covariates, projection and basis disagree on the number of sites")
    if op.r != params.r or op.psi != params.psi:
        op = op.with_params(psi=params.psi, r=params.r)
    mu = simulation_mean(params, D, seed)
    real = simulate_core(op, basis, params.mix, T, seed, keep_latent=keep_latent)
    real.Y = mu[:, None] + real.X / np.sqrt(params.tau)
    real.mu = mu
    return real
