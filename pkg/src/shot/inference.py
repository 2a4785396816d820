"""Censored-data MCMC for the model with a Pareto-tailed scale (``beta = 0``).

One sweep, in order:

1. ``mh_gamma`` (second half of the previous sweep, see below) leaves the
   censored cells stale, so every sweep starts with ``impute_censored``:
   exact truncated-normal draws of every censored cell.
2. ``gibbs_tau``: Gamma draw of ``tau`` with the node weights integrated
   out (site-space covariance of the field).
3. ``mh_hyper``: adaptive random-walk Metropolis for ``psi`` and ``r`` on
   logit scales, also with the node weights integrated out.
4. ``gibbs_eps``: exact Gaussian draw of the node weights of every replicate
   from the sparse precision ``Q + r/(1-r) A'A``.  Steps 2-3 must come right
   before this one.
5. ``mala_R``: componentwise MALA on ``log(R* - 1)``; knots whose supports
   share no site are updated simultaneously.
6. ``gibbs_gaussian_blocks``: ``mu``, ``theta``, ``tau_mu`` by conjugacy.
7. ``mh_gamma``: a centered update (``R*`` fixed) and a non-centered update
   (``gamma log R*`` fixed, censored cells integrated out).  The latter must
   be followed by imputation, which is step 1 of the next sweep.

Conditionals are written in terms of the standardized residual
``a = sqrt(tau) (Y - mu)``, for which ``a = R (sqrt(r) A eps + sqrt(1-r) eta)``.
"""

import hashlib
import json
import logging
import os
import time
from dataclasses import asdict, dataclass, field

import numpy as np
import scipy.linalg as sla
from scipy.special import expit, log_ndtr, ndtri_exp
from scipy.spatial.distance import pdist

from . import rng as _rng
from .basis import BasisSystem, basis_system
from .errors import DataError, NumericError, ParameterError, PreprocessingError, SizeError
from .mesh import SpdeOperator, fem_matrices, projection_matrix, splu_spd

log = logging.getLogger(__name__)

STATE_VERSION = 1
MALA_TARGET = 0.574
RWM_TARGET = 0.234

__all__ = ["Scaling", "Dataset", "preprocess", "make_dataset", "Priors", "ChainConfig",
           "ChainState", "ShotSampler", "ChainResult", "run_chain", "censored_loglik",
           "censored_loglik_cells", "cell_location_scale",
           "dic", "single_basis", "rgamma"]


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------

@dataclass
class Scaling:
    """Per-site affine map ``z = (y - center) / scale``."""

    center: np.ndarray
    scale: np.ndarray

    def transform(self, y):
        return (np.asarray(y, dtype=float) - self.center[:, None]) / self.scale[:, None]

    def inverse(self, z, sites=None):
        z = np.asarray(z, dtype=float)
        c = self.center if sites is None else self.center[sites]
        s = self.scale if sites is None else self.scale[sites]
        if z.ndim == 1 and np.ndim(c) == 1 and z.shape[0] == np.size(c):
            return z * s + c
        if z.ndim == 2 and z.shape[0] == np.size(c):
            return z * np.reshape(s, (-1, 1)) + np.reshape(c, (-1, 1))
        return z * s + c


def preprocess(raw, min_positive=20):
    """Center by the median and scale by the IQR of each site's positive values.

    Returns
    -------
    scaled : (N, T) array
    scaling : Scaling
    """
    raw = np.asarray(raw, dtype=float)
    center = np.empty(raw.shape[0])
    scale = np.empty(raw.shape[0])
    for i, row in enumerate(raw):
        pos = row[row > 0]
        if pos.size < min_positive:
            raise PreprocessingError(f"site {i} has only {pos.size} positive observations "
                                     f"(need {min_positive})")
        q25, q50, q75 = np.quantile(pos, [0.25, 0.5, 0.75])
        if not q75 > q25:
            raise PreprocessingError(f"site {i}: interquartile range of positive values is zero")
        center[i], scale[i] = q50, q75 - q25
    scaling = Scaling(center=center, scale=scale)
    return scaling.transform(raw), scaling


@dataclass
class Dataset:
    """Observations with per-site censoring thresholds.

    ``censored[i, t]`` is true iff ``Y[i, t] <= thresholds[i]``.
    """

    Y: np.ndarray
    thresholds: np.ndarray
    covariates: np.ndarray
    sites: np.ndarray
    scaling: Scaling = None

    def __post_init__(self):
        self.Y = np.asarray(self.Y, dtype=float)
        if self.Y.ndim != 2:
            raise DataError("Y must be a sites x replicates matrix")
        self.thresholds = np.asarray(self.thresholds, dtype=float)
        self.covariates = np.asarray(self.covariates, dtype=float)
        self.sites = np.asarray(self.sites, dtype=float)
        N = self.Y.shape[0]
        if self.thresholds.shape != (N,) or self.covariates.shape != (N, 4) \
                or self.sites.shape != (N, 2):
            raise DataError("thresholds, covariates and sites must match the number of sites")
        if not np.all(np.isfinite(self.Y)):
            raise DataError("observations must be finite")
        self.censored = self.Y <= self.thresholds[:, None]

    @property
    def N(self):
        return self.Y.shape[0]

    @property
    def T(self):
        return self.Y.shape[1]


def make_dataset(Y, sites, covariates=None, threshold_quantile=0.95, thresholds=None,
                 scaling=None):
    """Build a Dataset with per-site empirical-quantile thresholds (linear interpolation)."""
    Y = np.asarray(Y, dtype=float)
    sites = np.asarray(sites, dtype=float)
    if covariates is None:
        covariates = np.column_stack([np.ones(len(sites)), sites, np.zeros(len(sites))])
    if thresholds is None:
        if not 0 < threshold_quantile < 1:
            raise ParameterError("threshold quantile must lie in (0, 1)")
        thresholds = (np.quantile(Y, threshold_quantile, axis=1) if Y.shape[1]
                      else np.full(Y.shape[0], np.inf))
    return Dataset(Y=Y, thresholds=thresholds, covariates=covariates, sites=sites,
                   scaling=scaling)


def single_basis(sites):
    """Basis with one function equal to one everywhere (single random scale)."""
    sites = np.asarray(sites, dtype=float)
    ones = np.ones((sites.shape[0], 1))
    return BasisSystem(B=ones, raw=ones, phi=np.inf, knots=sites.mean(axis=0, keepdims=True),
                       sites=sites)


# ---------------------------------------------------------------------------
# configuration and state
# ---------------------------------------------------------------------------

@dataclass
class Priors:
    psi_upper: float = None          # default: twice the largest site distance
    gamma_upper: float = 50.0
    r_bounds: tuple = (0.001, 0.999)
    tau: tuple = (0.1, 0.1)          # shape, rate
    tau_mu: tuple = (0.1, 0.1)
    theta_sd: float = 100.0


@dataclass
class ChainConfig:
    n_iter: int = 20_000
    n_burnin: int = 10_000
    thin: int = 5
    seed: int = 0
    phi: float = None
    K: int = 25
    c: float = 0.05
    model: str = "shot"              # "shot", "hot" (one scale) or "gmrf" (R = 1)
    priors: Priors = field(default_factory=Priors)
    fixed: tuple = ()                # names of blocks held at their initial values
    init: dict = field(default_factory=dict)
    checkpoint_path: str = None
    checkpoint_every: int = 0
    threads: int = 1                 # recorded only; the chain itself runs on one thread

    def __post_init__(self):
        if isinstance(self.priors, dict):
            self.priors = Priors(**self.priors)
        if not 0 <= self.n_burnin < self.n_iter:
            raise ParameterError("need 0 <= n_burnin < n_iter")
        if self.thin < 1:
            raise ParameterError("thin must be >= 1")
        if self.model not in ("shot", "hot", "gmrf"):
            raise ParameterError(f"unknown model {self.model!r}")
        self.fixed = tuple(self.fixed)


@dataclass
class ChainState:
    theta: np.ndarray
    tau_mu: float
    mu: np.ndarray
    tau: float
    psi: float
    r: float
    gamma: float
    eps: np.ndarray          # (N*, T) node weights
    R_star: np.ndarray       # (K, T) latent scales
    Y: np.ndarray            # (N, T) completed observations
    log_step: dict
    iteration: int = 0
    accepted: dict = field(default_factory=dict)
    proposed: dict = field(default_factory=dict)
    nonfinite_grad: int = 0

    def copy(self):
        out = {}
        for k, v in self.__dict__.items():
            if isinstance(v, np.ndarray):
                out[k] = v.copy()
            elif isinstance(v, dict):
                out[k] = {kk: (vv.copy() if isinstance(vv, np.ndarray) else vv)
                          for kk, vv in v.items()}
            else:
                out[k] = v
        return ChainState(**out)


def rgamma(g, shape, rate):
    return g.gamma(shape) / rate


def _to_logit(x, lo, hi):
    return np.log(x - lo) - np.log(hi - x)


def _from_logit(z, lo, hi):
    return lo + (hi - lo) * expit(z)


def _log_jac(x, lo, hi):
    return np.log(x - lo) + np.log(hi - x) - np.log(hi - lo)


def cell_location_scale(mu, tau, r, R, AE):
    """Normal location and scale of every cell given the latent fields, each (N, T)."""
    s = 1.0 / np.sqrt(tau)
    return mu[:, None] + s * np.sqrt(r) * R * AE, s * np.sqrt(1.0 - r) * R


def censored_loglik(Y, censored, thresholds, mu, tau, r, R, AE, per_cell=False):
    """Censored log-likelihood given the latent fields.

    Exceedances contribute the Gaussian log density, censored cells the log
    Gaussian CDF at the threshold; ``AE = A eps`` and ``R`` are (N, T).
    """
    m, sd = cell_location_scale(mu, tau, r, R, AE)
    return censored_loglik_cells(Y, censored, thresholds, m, sd, per_cell)


def censored_loglik_cells(Y, censored, thresholds, m, sd, per_cell=False):
    """Censored log-likelihood from cell-level Normal locations ``m`` and scales ``sd``."""
    out = np.empty_like(m)
    obs = ~censored
    z = (Y[obs] - m[obs]) / sd[obs]
    out[obs] = -0.5 * z * z - np.log(sd[obs]) - 0.5 * np.log(2 * np.pi)
    zc = (np.broadcast_to(thresholds[:, None], m.shape)[censored] - m[censored]) / sd[censored]
    out[censored] = log_ndtr(zc)
    return out if per_cell else float(out.sum())


# ---------------------------------------------------------------------------
# sampler
# ---------------------------------------------------------------------------

class ShotSampler:
    """Holds data, model structure, the chain state and derived caches.

    Parameters
    ----------
    data : Dataset
    fem : FemMatrices
    A : sparse (N, N*) projection matrix
    basis : BasisSystem
        Ignored (replaced) for the ``"hot"`` and ``"gmrf"`` models.
    config : ChainConfig
    """

    def __init__(self, data, fem, A, basis, config, state=None):
        self.data = data
        self.fem = fem
        self.A = A
        self.config = config
        if config.model != "shot":
            basis = single_basis(data.sites)
        if basis.N != data.N or A.shape[0] != data.N:
            raise SizeError("basis / projection do not match the number of sites")
        self.basis = basis
        self.model = config.model
        pri = config.priors
        self.delta = float(pdist(data.sites).max()) if data.N > 1 else 1.0
        self.psi_upper = pri.psi_upper or 2.0 * self.delta
        self.r_lo, self.r_hi = pri.r_bounds
        self.gamma_upper = pri.gamma_upper
        self.fixed = set(config.fixed)
        if self.model == "gmrf":
            self.fixed |= {"gamma", "R_star"}
        self.AtA = (A.T @ A).tocsc()
        self._set_censoring(data)
        self._colors = self._color_knots()
        D = data.covariates
        self._DtD = D.T @ D
        self.state = state if state is not None else self.init_state()
        self._refresh()

    def _set_censoring(self, data):
        self._cens_idx = np.flatnonzero(data.censored.ravel())
        self._thr_c = np.broadcast_to(data.thresholds[:, None], data.Y.shape).ravel()[self._cens_idx]
        self._obs = ~data.censored

    def set_data(self, data, Y_complete):
        """Swap in a dataset of the same shape, with ``Y_complete`` as the imputed state.

        ``Y_complete`` must agree with ``data`` on observed cells and lie at or
        below the threshold on censored cells.
        """
        if data.Y.shape != self.data.Y.shape:
            raise SizeError("replacement data must have the same shape")
        self.data = data
        self._set_censoring(data)
        self.state.Y = np.array(Y_complete, dtype=float)
        self.check_invariants()

    # -- initialization --------------------------------------------------

    def init_state(self):
        cfg, data = self.config, self.data
        N, T, K = data.N, data.T, self.basis.K
        init = dict(cfg.init)
        site_sd = np.std(data.Y, axis=1) if T > 1 else np.ones(N)
        site_sd = np.where(site_sd > 0, site_sd, 1.0)
        Y = data.Y.copy()
        Y[data.censored] = np.broadcast_to((data.thresholds - 0.1 * site_sd)[:, None],
                                           Y.shape)[data.censored]
        mu0 = np.median(data.Y, axis=1) if T else np.zeros(N)
        theta0 = np.zeros(4)
        state = ChainState(
            theta=np.asarray(init.get("theta", theta0), dtype=float),
            tau_mu=float(init.get("tau_mu", cfg.priors.tau_mu[0] / cfg.priors.tau_mu[1])),
            mu=np.asarray(init.get("mu", mu0), dtype=float).copy(),
            tau=float(init.get("tau", cfg.priors.tau[0] / cfg.priors.tau[1])),
            psi=float(init.get("psi", 0.5 * self.psi_upper)),
            r=float(init.get("r", 0.5 * (self.r_lo + self.r_hi))),
            gamma=float(init.get("gamma", 0.5 * self.gamma_upper)),
            eps=np.zeros((self.fem.n, T)) if "eps" not in init else np.array(init["eps"], float),
            R_star=(np.full((K, T), 1.5) if self.model != "gmrf" else np.ones((K, T)))
            if "R_star" not in init else np.array(init["R_star"], float),
            Y=Y,
            log_step=dict(psi=np.log(0.1), r=np.log(0.1), gamma=np.log(0.1),
                          gamma_nc=np.log(0.05), mala=np.full(K, np.log(0.5))),
        )
        if not 0 < state.psi < self.psi_upper:
            raise ParameterError("initial psi outside the prior support")
        if not self.r_lo < state.r < self.r_hi:
            raise ParameterError("initial r outside the sampler bounds")
        if not 0 < state.gamma < self.gamma_upper:
            raise ParameterError("initial gamma outside the prior support")
        return state

    def _color_knots(self):
        """Greedy coloring of knots so that knots sharing a site get different colors."""
        support = self.basis.B > 0
        overlap = (support.T.astype(float) @ support.astype(float)) > 0
        colors = []
        for k in range(self.basis.K):
            for group in colors:
                if not overlap[k, group].any():
                    group.append(k)
                    break
            else:
                colors.append([k])
        out = []
        for group in colors:
            g = np.array(group)
            sub = support[:, g]
            rows = np.flatnonzero(sub.any(axis=1))
            owner = np.argmax(sub[rows], axis=1)      # position within g
            ind = np.zeros((g.size, rows.size))
            ind[owner, np.arange(rows.size)] = 1.0
            out.append((g, rows, owner, ind))
        return out

    # -- caches ------------------------------------------------------------

    def _refresh(self):
        s = self.state
        self.op = SpdeOperator(self.fem, self.A, s.psi, s.r)
        self.Bw = self.basis.weights(s.gamma)
        self.R = self.Bw @ s.R_star if self.model != "gmrf" else np.ones_like(s.Y)
        self.AE = self.A @ s.eps

    def _cov_factor(self, op, r):
        """Cholesky of the site covariance ``r A Q^-1 A' + (1-r) I`` and its log-determinant."""
        S = r * op.site_covariance() + (1.0 - r) * np.eye(self.data.N)
        try:
            c = sla.cho_factor(S, lower=True, check_finite=False)
        except np.linalg.LinAlgError as exc:
            raise NumericError("site covariance is not positive definite") from exc
        return c, 2.0 * float(np.sum(np.log(np.diag(c[0]))))

    def _quad_total(self, chol, S):
        """``trace(Sigma^-1 S)`` for the scatter matrix ``S``."""
        return float(np.trace(sla.cho_solve(chol, S, check_finite=False)))

    def _scatter(self):
        a = (self.state.Y - self.state.mu[:, None]) / self.R
        return a @ a.T

    def collapsed_loglik(self, op, r, tau, S):
        """Log-likelihood of the completed data with node weights integrated out (up to terms free of psi, r, tau)."""
        N, T = self.data.N, self.data.T
        chol, logdet = self._cov_factor(op, r)
        return 0.5 * N * T * np.log(tau) - 0.5 * T * logdet - 0.5 * tau * self._quad_total(chol, S)

    # -- blocks ------------------------------------------------------------

    def impute_censored(self, g):
        """Exact draws of censored cells from their upper-truncated normal conditionals."""
        if self._cens_idx.size == 0:
            return
        s = self.state
        sc = 1.0 / np.sqrt(s.tau)
        idx = self._cens_idx
        R = self.R.ravel()[idx]
        mu = np.broadcast_to(s.mu[:, None], s.Y.shape).ravel()[idx]
        m = mu + sc * np.sqrt(s.r) * R * self.AE.ravel()[idx]
        sd = sc * np.sqrt(1.0 - s.r) * R
        zu = (self._thr_c - m) / sd
        logp = log_ndtr(zu)
        u = g.random(idx.size)
        z = np.minimum(ndtri_exp(np.log(u) + logp), zu)
        y = np.minimum(m + sd * z, self._thr_c)
        Yf = s.Y.reshape(-1)
        Yf[idx] = y

    def gibbs_tau(self, g, S=None):
        """``tau`` from its Gamma conditional with the node weights integrated out."""
        if "tau" in self.fixed:
            return
        shape, rate = self.tau_conditional(S)
        self.state.tau = float(rgamma(g, shape, rate))

    def tau_conditional(self, S=None):
        """Shape and rate of the Gamma conditional of ``tau`` (node weights integrated out)."""
        a0, b0 = self.config.priors.tau
        if self.data.T == 0:
            return a0, b0
        S = self._scatter() if S is None else S
        chol, _ = self._cov_factor(self.op, self.state.r)
        return a0 + 0.5 * self.data.N * self.data.T, b0 + 0.5 * self._quad_total(chol, S)

    def mh_hyper(self, g, adapt=False, S=None):
        """Random-walk Metropolis on logit(psi) and logit(r), node weights integrated out."""
        s = self.state
        S = self._scatter() if S is None and self.data.T else S
        if S is None:
            S = np.zeros((self.data.N, self.data.N))
        for name in ("psi", "r"):
            if name in self.fixed:
                continue
            lo, hi = (0.0, self.psi_upper) if name == "psi" else (self.r_lo, self.r_hi)
            cur = getattr(s, name)
            z = _to_logit(cur, lo, hi)
            zp = z + np.exp(s.log_step[name]) * g.standard_normal()
            new = float(_from_logit(zp, lo, hi))
            logu = np.log(g.random())
            if not lo < new < hi:
                ok = False
            else:
                op_new = self.op.with_params(psi=new) if name == "psi" else self.op
                r_new = new if name == "r" else s.r
                ll_new = self.collapsed_loglik(op_new, r_new, s.tau, S)
                ll_cur = self.collapsed_loglik(self.op, s.r, s.tau, S)
                log_a = ll_new - ll_cur + _log_jac(new, lo, hi) - _log_jac(cur, lo, hi)
                ok = bool(np.isfinite(log_a) and logu < log_a)
            self._count(name, ok)
            if ok:
                setattr(s, name, new)
                if name == "psi":
                    self.op = op_new
                else:
                    self.op = self.op.with_params(r=new)
            if adapt:
                self._adapt(name, float(ok), RWM_TARGET)

    def gibbs_eps(self, g):
        """Node weights of every replicate from their Gaussian full conditional.

        Precision ``P = Q + r/(1-r) A'A``; mean ``P^-1 sqrt(r)/(1-r) A' e`` with
        ``e = sqrt(tau) (Y - mu) / R``.  Draws use ``P^-1 (b + w)`` with
        ``w = H'z1 + sqrt(c) A'z2 ~ N(0, P)``.
        """
        s = self.state
        T = self.data.T
        if "eps" in self.fixed or T == 0:
            return
        c = s.r / (1.0 - s.r)
        e = np.sqrt(s.tau) * (s.Y - s.mu[:, None]) / self.R
        b = (np.sqrt(s.r) / (1.0 - s.r)) * (self.A.T @ e)
        z1 = g.standard_normal((self.fem.n, T))
        z2 = g.standard_normal((self.data.N, T))
        w = self.op.sqrt_Q_T(z1) + np.sqrt(c) * (self.A.T @ z2)
        lu = splu_spd(self.op.Q + c * self.AtA)
        s.eps = lu.solve(b + w)
        self.AE = self.A @ s.eps

    def eps_conditional(self):
        """Dense precision and mean of the node-weight conditional (small problems, testing)."""
        s = self.state
        c = s.r / (1.0 - s.r)
        P = (self.op.Q + c * self.AtA).toarray()
        e = np.sqrt(s.tau) * (s.Y - s.mu[:, None]) / self.R
        b = (np.sqrt(s.r) / (1.0 - s.r)) * (self.A.T @ e)
        return P, np.linalg.solve(P, b)

    # R* block -----------------------------------------------------------------

    def _cell_terms(self, R, a, W, c1):
        """Per-cell log-likelihood in ``R`` and its derivative (completed data)."""
        q = a / R - W
        ll = -np.log(R) - 0.5 * c1 * q * q
        dll = -1.0 / R + c1 * q * a / (R * R)
        return ll, dll

    def log_target_R(self, xi, k=None):
        """Log conditional density of ``xi = log(R* - 1)`` for all (k, t), summed over knots.

        Mainly for gradient checks; the sampler evaluates it blockwise.
        """
        s = self.state
        Rs = 1.0 + np.exp(xi)
        R = self.Bw @ Rs
        a = np.sqrt(s.tau) * (s.Y - s.mu[:, None])
        W = np.sqrt(s.r) * self.AE
        ll, _ = self._cell_terms(R, a, W, 1.0 / (1.0 - s.r))
        prior = np.log(s.gamma) - (s.gamma + 1.0) * np.log(Rs) + xi
        return float(ll.sum() + prior.sum())

    def grad_log_target_R(self, xi):
        s = self.state
        Rs = 1.0 + np.exp(xi)
        R = self.Bw @ Rs
        a = np.sqrt(s.tau) * (s.Y - s.mu[:, None])
        W = np.sqrt(s.r) * self.AE
        _, dll = self._cell_terms(R, a, W, 1.0 / (1.0 - s.r))
        return (self.Bw.T @ dll) * (Rs - 1.0) - (s.gamma + 1.0) * (Rs - 1.0) / Rs + 1.0

    def mala_R(self, g, adapt=False):
        """Componentwise MALA on ``xi = log(R* - 1)``, vectorized over replicates."""
        s = self.state
        if "R_star" in self.fixed or self.data.T == 0:
            return
        a_all = np.sqrt(s.tau) * (s.Y - s.mu[:, None])
        W_all = np.sqrt(s.r) * self.AE
        c1 = 1.0 / (1.0 - s.r)
        gam = s.gamma
        for knots, rows, owner, ind in self._colors:
            a = a_all[rows]
            W = W_all[rows]
            w = self.Bw[rows, knots[owner]][:, None]          # weight of the owning knot
            Rk = s.R_star[knots]
            base = self.R[rows] - w * Rk[owner]
            h = np.exp(s.log_step["mala"][knots])[:, None]

            def target(Rk_):
                R = base + w * Rk_[owner]
                ll, dll = self._cell_terms(R, a, W, c1)
                xi = np.log(Rk_ - 1.0)
                lp = ind @ ll + np.log(gam) - (gam + 1.0) * np.log(Rk_) + xi
                gr = (ind @ (dll * w)) * (Rk_ - 1.0) - (gam + 1.0) * (Rk_ - 1.0) / Rk_ + 1.0
                return lp, gr

            xi = np.log(Rk - 1.0)
            lp, gr = target(Rk)
            z = g.standard_normal(Rk.shape)
            logu = np.log(g.random(Rk.shape))
            xi_p = xi + 0.5 * h * h * gr + h * z
            with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
                Rk_p = 1.0 + np.exp(xi_p)
                lp_p, gr_p = target(np.where(np.isfinite(Rk_p), Rk_p, 2.0))
                fwd = -0.5 * (xi_p - xi - 0.5 * h * h * gr) ** 2 / (h * h)
                bwd = -0.5 * (xi - xi_p - 0.5 * h * h * gr_p) ** 2 / (h * h)
                log_a = lp_p - lp + bwd - fwd
            finite = np.isfinite(Rk_p) & np.isfinite(log_a) & np.isfinite(gr_p)
            s.nonfinite_grad += int(np.sum(~finite))
            acc = finite & (logu < log_a)
            Rk_new = np.where(acc, Rk_p, Rk)
            s.R_star[knots] = Rk_new
            self.R[rows] = base + w * Rk_new[owner]
            n_acc = acc.sum(axis=1)
            self._count("mala", int(n_acc.sum()), n=acc.size)
            if adapt:
                rate = np.where(finite, np.minimum(1.0, np.exp(np.minimum(log_a, 0.0))), 0.0).mean(axis=1)
                gain = self._gain()
                s.log_step["mala"][knots] += gain * (rate - MALA_TARGET)
        self.R = self.Bw @ s.R_star

    # Gaussian blocks -------------------------------------------------------------

    def gibbs_gaussian_blocks(self, g):
        """Conjugate draws of ``mu`` (per site), ``theta`` and ``tau_mu``."""
        s = self.state
        D = self.data.covariates
        N = self.data.N
        if "mu" not in self.fixed:
            sc = 1.0 / np.sqrt(s.tau)
            resid = s.Y - sc * np.sqrt(s.r) * self.R * self.AE
            wgt = s.tau / ((1.0 - s.r) * self.R ** 2)
            prec = s.tau_mu + wgt.sum(axis=1)
            mean = (s.tau_mu * (D @ s.theta) + (wgt * resid).sum(axis=1)) / prec
            s.mu = mean + g.standard_normal(N) / np.sqrt(prec)
        if "theta" not in self.fixed:
            P = s.tau_mu * self._DtD + np.eye(4) / self.config.priors.theta_sd ** 2
            L = np.linalg.cholesky(P)
            m = sla.cho_solve((L, True), s.tau_mu * (D.T @ s.mu))
            s.theta = m + sla.solve_triangular(L.T, g.standard_normal(4), lower=False)
        if "tau_mu" not in self.fixed:
            a0, b0 = self.config.priors.tau_mu
            res = s.mu - D @ s.theta
            s.tau_mu = float(rgamma(g, a0 + 0.5 * N, b0 + 0.5 * res @ res))

    def gibbs_mu_conditional(self):
        """Mean and precision of each ``mu_i`` given everything else (testing)."""
        s = self.state
        D = self.data.covariates
        sc = 1.0 / np.sqrt(s.tau)
        resid = s.Y - sc * np.sqrt(s.r) * self.R * self.AE
        wgt = s.tau / ((1.0 - s.r) * self.R ** 2)
        prec = s.tau_mu + wgt.sum(axis=1)
        return (s.tau_mu * (D @ s.theta) + (wgt * resid).sum(axis=1)) / prec, prec

    # gamma ---------------------------------------------------------------------

    def _complete_loglik_R(self, R):
        s = self.state
        a = np.sqrt(s.tau) * (s.Y - s.mu[:, None])
        ll, _ = self._cell_terms(R, a, np.sqrt(s.r) * self.AE, 1.0 / (1.0 - s.r))
        return float(ll.sum())

    def _censored_loglik_R(self, R):
        s = self.state
        return censored_loglik(self.data.Y, self.data.censored, self.data.thresholds,
                               s.mu, s.tau, s.r, R, self.AE)

    def mh_gamma(self, g, adapt=False):
        """Centered then non-centered random-walk updates of ``gamma`` on the logit scale."""
        s = self.state
        if "gamma" in self.fixed:
            return
        lo, hi = 0.0, self.gamma_upper
        logR = np.log(s.R_star)
        n_lat = s.R_star.size
        sum_logR = float(logR.sum())

        # centered: R* fixed
        z = _to_logit(s.gamma, lo, hi)
        gp = float(_from_logit(z + np.exp(s.log_step["gamma"]) * g.standard_normal(), lo, hi))
        logu = np.log(g.random())
        ok = False
        if lo < gp < hi:
            Bw_p = self.basis.weights(gp)
            R_p = Bw_p @ s.R_star
            lp_new = n_lat * np.log(gp) - (gp + 1.0) * sum_logR + self._complete_loglik_R(R_p)
            lp_cur = n_lat * np.log(s.gamma) - (s.gamma + 1.0) * sum_logR \
                + self._complete_loglik_R(self.R)
            log_a = lp_new - lp_cur + _log_jac(gp, lo, hi) - _log_jac(s.gamma, lo, hi)
            ok = bool(np.isfinite(log_a) and logu < log_a)
            if ok:
                s.gamma, self.Bw, self.R = gp, Bw_p, R_p
        self._count("gamma", ok)
        if adapt:
            self._adapt("gamma", float(ok), RWM_TARGET)

        # non-centered: E = gamma log R* fixed, censored cells integrated out
        z = _to_logit(s.gamma, lo, hi)
        gp = float(_from_logit(z + np.exp(s.log_step["gamma_nc"]) * g.standard_normal(), lo, hi))
        logu = np.log(g.random())
        ok = False
        if lo < gp < hi and self.data.T:
            with np.errstate(over="ignore", invalid="ignore"):
                Rs_p = np.exp(logR * (s.gamma / gp))
                Bw_p = self.basis.weights(gp)
                R_p = Bw_p @ Rs_p
            # a small gp can push R* past the float range: reject outright
            if np.all(np.isfinite(R_p)):
                log_a = (self._censored_loglik_R(R_p) - self._censored_loglik_R(self.R)
                         + _log_jac(gp, lo, hi) - _log_jac(s.gamma, lo, hi))
                ok = bool(np.isfinite(log_a) and logu < log_a)
            if ok:
                s.gamma, s.R_star, self.Bw, self.R = gp, Rs_p, Bw_p, R_p
        self._count("gamma_nc", ok)
        if adapt:
            self._adapt("gamma_nc", float(ok), RWM_TARGET)

    # bookkeeping -------------------------------------------------------------

    def _count(self, name, accepted, n=1):
        s = self.state
        s.accepted[name] = s.accepted.get(name, 0) + int(accepted)
        s.proposed[name] = s.proposed.get(name, 0) + n

    def _gain(self):
        return min(0.5, 10.0 / (self.state.iteration + 10.0) ** 0.6)

    def _adapt(self, name, acc, target):
        self.state.log_step[name] = float(self.state.log_step[name] + self._gain() * (acc - target))

    def sweep(self, g, adapt=False):
        s = self.state
        self.impute_censored(g)
        S = self._scatter() if self.data.T else None
        self.gibbs_tau(g, S)
        self.mh_hyper(g, adapt=adapt, S=S)
        self.gibbs_eps(g)
        if self.model != "gmrf":
            self.mala_R(g, adapt=adapt)
        self.gibbs_gaussian_blocks(g)
        if self.model != "gmrf":
            self.mh_gamma(g, adapt=adapt)
        s.iteration += 1

    def loglik(self):
        s = self.state
        return censored_loglik(self.data.Y, self.data.censored, self.data.thresholds,
                               s.mu, s.tau, s.r, self.R, self.AE)

    def check_invariants(self):
        s = self.state
        d = self.data
        if np.any(s.Y[d.censored] > np.broadcast_to(d.thresholds[:, None], s.Y.shape)[d.censored]):
            raise NumericError("imputed value above its threshold")
        if not np.array_equal(s.Y[~d.censored], d.Y[~d.censored]):
            raise NumericError("observed cell modified")
        if np.any(s.R_star < 1):
            raise NumericError("latent scale below 1")


# ---------------------------------------------------------------------------
# driver
# ---------------------------------------------------------------------------

SCALAR_PARAMS = ("tau", "psi", "r", "gamma", "tau_mu")


@dataclass
class ChainResult:
    samples: dict            # name -> array over stored draws
    iterations: np.ndarray
    acceptance: dict
    log_step: dict
    means: dict              # posterior means of parameters and cell-level latents
    dic: dict
    config: ChainConfig
    timings: dict
    trace: dict = None       # thinned draws including burn-in
    state: ChainState = None

    def sample_matrix(self, name):
        return np.asarray(self.samples[name])


def _save_state(path, state, meta):
    arrays = {k: v for k, v in state.__dict__.items() if isinstance(v, np.ndarray)}
    arrays["mala_log_step"] = state.log_step["mala"]
    scalars = {k: v for k, v in state.__dict__.items()
               if not isinstance(v, (np.ndarray, dict))}
    meta = dict(meta, version=STATE_VERSION, scalars=scalars,
                log_step={k: v for k, v in state.log_step.items() if k != "mala"},
                accepted=state.accepted, proposed=state.proposed)
    tmp = path + ".tmp.npz"
    np.savez(tmp, meta=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8), **arrays)
    os.replace(tmp, path)


def load_state(path):
    with np.load(path) as z:
        meta = json.loads(bytes(z["meta"]).decode())
        if meta.get("version") != STATE_VERSION:
            raise DataError(f"{path}: unsupported state version {meta.get('version')}")
        arrays = {k: z[k] for k in z.files if k not in ("meta", "mala_log_step")}
        mala = z["mala_log_step"]
    log_step = dict(meta["log_step"], mala=mala)
    state = ChainState(**arrays, **meta["scalars"], log_step=log_step,
                       accepted=meta["accepted"], proposed=meta["proposed"])
    return state, meta


def config_hash(config, data):
    # fields that cannot change the draws stay out of the hash
    cfg = {k: v for k, v in asdict(config).items()
           if k not in ("threads", "checkpoint_path", "checkpoint_every")}
    h = hashlib.sha256()
    h.update(json.dumps(cfg, sort_keys=True, default=str).encode())
    h.update(np.ascontiguousarray(data.Y).tobytes())
    h.update(np.ascontiguousarray(data.thresholds).tobytes())
    return h.hexdigest()


def run_chain(data, config, mesh, knots=None, basis=None, resume_from=None, progress=None):
    """Run the sampler and return thinned post-burn-in draws plus diagnostics.

    Parameters
    ----------
    data : Dataset
    config : ChainConfig
    mesh : TriMesh
    knots : KnotSet, optional
        Needed for the ``"shot"`` model unless ``basis`` is given.
    resume_from : str, optional
        Checkpoint file written by an earlier run with the same config.
    """
    from threadpoolctl import threadpool_limits

    t0 = time.perf_counter()
    fem = fem_matrices(mesh)
    A = projection_matrix(mesh, data.sites)
    if config.model == "shot" and basis is None:
        if knots is None or config.phi is None:
            raise ParameterError("the shot model needs knots and phi")
        basis = basis_system(data.sites, knots, config.phi)
    state = None
    chash = config_hash(config, data)
    if resume_from is not None:
        state, meta = load_state(resume_from)
        if meta.get("config_hash") != chash:
            raise DataError("checkpoint was written for a different configuration or dataset")
    sampler = ShotSampler(data, fem, A, basis, config, state=state)
    out = _Recorder(sampler, config)
    if resume_from is not None:
        out.restore(meta.get("recorder"))
    # one BLAS thread keeps floating-point reductions, and so the chain, identical
    # whatever thread count the caller asks for
    with threadpool_limits(limits=1):
        while sampler.state.iteration < config.n_iter:
            it = sampler.state.iteration
            g = _rng.stream(config.seed, _rng.CHAIN, it)
            sampler.sweep(g, adapt=it < config.n_burnin)
            sampler.check_invariants()
            out.record(it)
            if config.checkpoint_path and config.checkpoint_every and \
                    (it + 1) % config.checkpoint_every == 0:
                _save_state(config.checkpoint_path, sampler.state,
                            dict(config_hash=chash, recorder=out.dump()))
            if progress is not None:
                progress(it)
    result = out.finish()
    result.timings = dict(total_seconds=time.perf_counter() - t0)
    return result


def _step_snapshot(log_step):
    return {k: (tuple(np.asarray(v).ravel().tolist())) for k, v in log_step.items()}


class _Recorder:
    """Accumulates thinned draws, deviances and running latent means."""

    def __init__(self, sampler, config):
        self.sampler = sampler
        self.config = config
        self.draws = {k: [] for k in SCALAR_PARAMS + ("theta", "mu", "deviance")}
        self.iters = []
        self.trace = {k: [] for k in SCALAR_PARAMS}
        self.trace_iters = []
        self.n = 0
        N, T = sampler.data.N, sampler.data.T
        self.sum_loc = np.zeros((N, T))
        self.sum_scale = np.zeros((N, T))
        self.sum_mu = np.zeros(N)
        self.sum_scalar = dict.fromkeys(SCALAR_PARAMS, 0.0)
        self.frozen = None

    def record(self, it):
        cfg = self.config
        smp = self.sampler
        s = smp.state
        if (it + 1) % cfg.thin:
            return
        for k in SCALAR_PARAMS:
            self.trace[k].append(getattr(s, k))
        self.trace_iters.append(it + 1)
        if it < cfg.n_burnin:
            return
        if self.frozen is None:
            self.frozen = _step_snapshot(s.log_step)
        elif _step_snapshot(s.log_step) != self.frozen:
            raise NumericError("proposal scales changed after burn-in")
        dev = -2.0 * smp.loglik()
        if not np.isfinite(dev):
            path = cfg.checkpoint_path or "shot_state_dump.npz"
            _save_state(path, s, dict(reason="non-finite log posterior", iteration=it))
            raise NumericError(f"non-finite log-likelihood at iteration {it}; state written to {path}")
        for k in SCALAR_PARAMS:
            self.draws[k].append(getattr(s, k))
            self.sum_scalar[k] += getattr(s, k)
        self.draws["theta"].append(s.theta.copy())
        self.draws["mu"].append(s.mu.copy())
        self.draws["deviance"].append(dev)
        self.iters.append(it + 1)
        loc, scale = cell_location_scale(s.mu, s.tau, s.r, smp.R, smp.AE)
        self.sum_loc += loc
        self.sum_scale += scale
        self.sum_mu += s.mu
        self.n += 1

    def dump(self):
        return dict(n=self.n, iters=self.iters, trace_iters=self.trace_iters,
                    draws={k: np.asarray(v).tolist() for k, v in self.draws.items()},
                    trace={k: list(map(float, v)) for k, v in self.trace.items()},
                    sum_scalar=self.sum_scalar, sum_mu=self.sum_mu.tolist(),
                    sum_loc=self.sum_loc.tolist(), sum_scale=self.sum_scale.tolist())

    def restore(self, d):
        if not d:
            return
        self.n = d["n"]
        self.iters = list(d["iters"])
        self.trace_iters = list(d["trace_iters"])
        for k, v in d["draws"].items():
            self.draws[k] = [np.asarray(x) if isinstance(x, list) else x for x in v]
        self.trace = {k: list(v) for k, v in d["trace"].items()}
        self.sum_scalar = dict(d["sum_scalar"])
        self.sum_mu = np.asarray(d["sum_mu"])
        self.sum_loc = np.asarray(d["sum_loc"]).reshape(self.sum_loc.shape)
        self.sum_scale = np.asarray(d["sum_scale"]).reshape(self.sum_scale.shape)

    def finish(self):
        smp = self.sampler
        s = smp.state
        samples = {k: np.asarray(v, dtype=float) for k, v in self.draws.items()}
        means = {}
        dic_out = {}
        if self.n:
            means = {k: v / self.n for k, v in self.sum_scalar.items()}
            means.update(mu=self.sum_mu / self.n, loc=self.sum_loc / self.n,
                         scale=self.sum_scale / self.n)
            dic_out = dic(samples["deviance"], smp.data, means)
        acceptance = {k: s.accepted[k] / s.proposed[k] for k in s.proposed if s.proposed[k]}
        log_step = {k: (v.copy() if isinstance(v, np.ndarray) else v) for k, v in s.log_step.items()}
        return ChainResult(samples=samples, iterations=np.asarray(self.iters), acceptance=acceptance,
                           log_step=log_step, means=means, dic=dic_out, config=self.config,
                           timings={}, state=s,
                           trace=dict({k: np.asarray(v) for k, v in self.trace.items()},
                                      iteration=np.asarray(self.trace_iters)))


def dic(deviances, data, means):
    """Deviance information criterion from stored deviances and posterior means.

    ``p_D = mean deviance - deviance at the posterior means``.  Given the
    latents, each cell is a censored Normal, so the plug-in uses the posterior
    means of every cell's location and scale (``means["loc"]``,
    ``means["scale"]``, both (N, T)).  This is the same functional for every
    model, whatever product of latents builds the location.  The scaled value
    divides by the number of observations ``N T``.
    """
    deviances = np.asarray(deviances, dtype=float)
    if deviances.size == 0:
        raise DataError("no stored deviances")
    for key in ("loc", "scale"):
        if key not in means:
            raise DataError(f"posterior mean of {key!r} missing")
    dbar = float(deviances.mean())
    dhat = -2.0 * censored_loglik_cells(data.Y, data.censored, data.thresholds, means["loc"],
                                        means["scale"])
    p_d = dbar - dhat
    value = dbar + p_d
    return dict(dic=value, p_d=p_d, dbar=dbar, dhat=dhat, scaled=value / (data.N * data.T))
