"""Posterior post-processing: summaries, marginal quantiles, chi curves, return levels.

All simulation-based outputs come from streams keyed by (seed, draw index),
so results do not depend on the number of worker threads.  Quantiles use
linear interpolation between order statistics throughout.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import rng as _rng
from .errors import DataError, ParameterError
from .mesh import SpdeOperator
from .model import MixParams, sample_scale
from .tail import chi_X_matrix, chi_u_empirical, distance_bins

__all__ = ["PosteriorSummary", "summarize", "effective_sample_size", "FittedModel",
           "marginal_quantiles", "return_levels", "regional_aggregate_return",
           "fitted_chi_curve", "return_probability", "DAYS_PER_SEASON"]

DAYS_PER_SEASON = 122


@dataclass(frozen=True)
class PosteriorSummary:
    mean: float
    sd: float
    q025: float
    q975: float
    ess: float
    n_draws: int


def effective_sample_size(x):
    """ESS from the initial monotone positive-sequence estimator of the autocorrelation sum."""
    x = np.asarray(x, dtype=float)
    n = x.size
    if n < 4:
        return float(n)
    xc = x - x.mean()
    var = xc @ xc / n
    if var == 0:
        return float(n)
    m = 1 << int(np.ceil(np.log2(2 * n)))
    f = np.fft.rfft(xc, m)
    acf = np.fft.irfft(f * np.conj(f), m)[:n] / (n * var)
    pairs = acf[0:n - 1:2] + acf[1:n:2]
    pos = np.flatnonzero(pairs <= 0)
    pairs = pairs[:pos[0]] if pos.size else pairs
    pairs = np.minimum.accumulate(pairs)
    tau = -1.0 + 2.0 * pairs.sum()
    return float(n / max(tau, 1e-12)) if tau > 0 else float(n)


def summarize(samples, min_draws=100):
    """Mean, SD, 2.5/97.5 percentiles and ESS of each parameter.

    ``samples`` maps a name to a 1-D array of draws, or to a 2-D (draws x
    components) array, which is expanded to ``name[j]`` entries.
    """
    if not isinstance(samples, dict):
        samples = {"x": samples}
    out = {}
    for name, v in samples.items():
        v = np.asarray(v, dtype=float)
        cols = [(name, v)] if v.ndim == 1 else [(f"{name}[{j}]", v[:, j]) for j in range(v.shape[1])]
        for key, x in cols:
            if x.size < min_draws:
                raise DataError(f"{key}: {x.size} draws, need at least {min_draws}")
            q025, q975 = np.quantile(x, [0.025, 0.975])
            sd = float(x.std(ddof=1)) if np.ptp(x) > 0 else 0.0
            out[key] = PosteriorSummary(mean=float(x.mean()), sd=sd, q025=float(q025),
                                        q975=float(q975), ess=effective_sample_size(x),
                                        n_draws=int(x.size))
    return out


def return_probability(m):
    """Non-exceedance probability of the ``m``-season return level."""
    m = np.asarray(m, dtype=float)
    if np.any(m < 1):
        raise ParameterError("return periods must be >= 1")
    return 1.0 - 1.0 / (DAYS_PER_SEASON * m)


@dataclass
class FittedModel:
    """Posterior draws plus the fixed structure needed to simulate from them.

    Attributes
    ----------
    draws : dict
        ``tau``, ``psi``, ``r`` (n,), ``gamma`` (n,) unless Gaussian, ``mu`` (n, N).
    basis : BasisSystem or None
        None means the Gaussian model (``R = 1``).
    scaling : Scaling or None
        Maps back to original units.
    """

    fem: object
    A: object
    sites: np.ndarray
    draws: dict
    basis: object = None
    scaling: object = None

    @classmethod
    def from_result(cls, result, fem, A, sites, basis=None, scaling=None):
        model = result.config.model
        d = {k: np.asarray(result.samples[k]) for k in ("tau", "psi", "r", "mu")}
        if model != "gmrf":
            d["gamma"] = np.asarray(result.samples["gamma"])
        return cls(fem=fem, A=A, sites=np.asarray(sites), draws=d,
                   basis=None if model == "gmrf" else basis, scaling=scaling)

    @property
    def n_draws(self):
        return len(self.draws["tau"])

    @property
    def gaussian(self):
        return self.basis is None

    def draw(self, j):
        return {k: (v[j] if np.ndim(v) else v) for k, v in self.draws.items()}

    def posterior_mean(self):
        return {k: np.mean(v, axis=0) for k, v in self.draws.items()}

    def subsample(self, n_draws, seed=0):
        """Indices of at most ``n_draws`` draws, evenly spaced."""
        n = self.n_draws
        if n_draws is None or n_draws >= n:
            return np.arange(n)
        return np.unique(np.linspace(0, n - 1, n_draws).round().astype(int))

    def site_covariance(self, psi, r):
        op = SpdeOperator(self.fem, self.A, psi, r)
        return r * op.site_covariance() + (1.0 - r) * np.eye(self.A.shape[0])

    def to_original(self, values, sites=None):
        if self.scaling is None:
            return values
        return self.scaling.inverse(values, sites)


def _map(fn, items, threads):
    items = list(items)
    if threads is None or threads <= 1 or len(items) < 2:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=int(threads)) as ex:
        return list(ex.map(fn, items))


def _marginal_sample(fit, params, sites, n_sim, g):
    """Draws of ``Y_i`` at each site in ``sites`` (len(sites) x n_sim), model scale."""
    sites = np.asarray(sites)
    C = fit.site_covariance(params["psi"], params["r"])
    sd = np.sqrt(np.diag(C)[sites])
    z = g.standard_normal((sites.size, n_sim))
    if fit.gaussian:
        X = sd[:, None] * z
    else:
        u = g.random((fit.basis.K, n_sim))
        Rs = sample_scale(MixParams(0.0, params["gamma"]), u)
        X = (fit.basis.weights(params["gamma"])[sites] @ Rs) * sd[:, None] * z
    return params["mu"][sites, None] + X / np.sqrt(params["tau"])


def marginal_quantiles(fit, site, levels, n_sim=100_000, n_draws=200, seed=0, threads=1):
    """Posterior median and 95% band of marginal quantiles at one site.

    Returns rows with ``level``, ``median``, ``q025``, ``q975`` in original units.
    """
    levels = np.asarray(levels, dtype=float)
    if np.any((levels <= 0) | (levels >= 1)):
        raise ParameterError("levels must lie in (0, 1)")
    idx = fit.subsample(n_draws)

    def one(j):
        g = _rng.stream(seed, _rng.DIAGNOSTICS, 1, j)
        y = _marginal_sample(fit, fit.draw(j), [site], n_sim, g)[0]
        return np.quantile(y, levels)

    q = np.asarray(fit.to_original(np.array(_map(one, idx, threads)), [site]))
    med, lo, hi = np.quantile(q, [0.5, 0.025, 0.975], axis=0)
    return [dict(level=float(l), median=float(a), q025=float(b), q975=float(c))
            for l, a, b, c in zip(levels, med, lo, hi)]


def _quantiles_with_se(y, p):
    """Empirical quantiles along the last axis and their asymptotic standard errors.

    The density at each quantile is estimated from the spacing of two
    neighbouring quantiles ``p +- delta`` with ``delta = (1 - p) / 4``.
    """
    n = y.shape[-1]
    delta = 0.25 * np.minimum(p, 1.0 - p)
    allp = np.concatenate([p, p - delta, p + delta])
    qs = np.quantile(y, allp, axis=-1)
    k = p.size
    q, lo, hi = qs[:k], qs[k:2 * k], qs[2 * k:]
    dens = 2.0 * delta[:, None] / np.maximum(hi - lo, 1e-300)
    se = np.sqrt(p * (1 - p) / n)[:, None] / dens
    return q.T, se.T


def return_levels(fit, m_list, n_sim=100_000, n_draws=200, seed=0, threads=1):
    """Per-site ``m``-season return levels by posterior-predictive simulation.

    Returns
    -------
    dict with arrays of shape (N, len(m_list)): ``mean`` and ``sd`` across
    draws, ``plugin`` (simulated at the posterior-mean parameters) and
    ``mc_se`` (Monte-Carlo SE of a single draw's estimate, averaged).
    """
    m_list = np.atleast_1d(np.asarray(m_list, dtype=float))
    p = return_probability(m_list)
    N = fit.sites.shape[0]
    sites = np.arange(N)
    idx = fit.subsample(n_draws)

    def levels_for(params, g):
        return _quantiles_with_se(_marginal_sample(fit, params, sites, n_sim, g), p)

    res = _map(lambda j: levels_for(fit.draw(j), _rng.stream(seed, _rng.DIAGNOSTICS, 2, j)),
               idx, threads)
    Q = np.array([r[0] for r in res])
    SE = np.array([r[1] for r in res])
    pm = fit.posterior_mean()
    q_plug, _ = levels_for(pm, _rng.stream(seed, _rng.DIAGNOSTICS, 3))
    if fit.scaling is not None:
        c, sc = fit.scaling.center[:, None], fit.scaling.scale[:, None]
        Q = Q * sc + c
        q_plug = q_plug * sc + c
        SE = SE * sc
    return dict(m=m_list, probability=p, mean=Q.mean(axis=0),
                sd=Q.std(axis=0, ddof=1) if len(idx) > 1 else np.zeros(Q.shape[1:]),
                plugin=q_plug, mc_se=SE.mean(axis=0), n_draws=len(idx))


def _joint_sample(fit, params, n_sim, g, chunk=10_000):
    """Yield chunks of joint draws of ``Y`` at all sites (N x n), model scale."""
    C = fit.site_covariance(params["psi"], params["r"])
    L = np.linalg.cholesky(C)
    N = C.shape[0]
    Bw = None if fit.gaussian else fit.basis.weights(params["gamma"])
    for s in range(0, n_sim, chunk):
        n = min(chunk, n_sim - s)
        X = L @ g.standard_normal((N, n))
        if Bw is not None:
            X *= Bw @ sample_scale(MixParams(0.0, params["gamma"]), g.random((Bw.shape[1], n)))
        yield params["mu"][:, None] + X / np.sqrt(params["tau"])


def regional_aggregate_return(fit, regions, m_list, n_sim=100_000, n_draws=200, seed=0,
                              threads=1, region_names=None):
    """Return levels of the within-region spatial average.

    ``regions`` assigns each site an integer or string label.  Averages are
    taken in original units.
    """
    regions = np.asarray(regions)
    N = fit.sites.shape[0]
    if regions.shape != (N,):
        raise DataError("every site needs exactly one region")
    labels = list(dict.fromkeys(regions.tolist())) if region_names is None else list(region_names)
    members = [np.flatnonzero(regions == lab) for lab in labels]
    if any(mb.size == 0 for mb in members):
        raise DataError("empty region")
    m_list = np.atleast_1d(np.asarray(m_list, dtype=float))
    p = return_probability(m_list)
    idx = fit.subsample(n_draws)
    W = np.zeros((len(labels), N))
    for r, mb in enumerate(members):
        W[r, mb] = 1.0 / mb.size

    def one(j, params=None, key=None):
        params = fit.draw(j) if params is None else params
        g = _rng.stream(seed, _rng.DIAGNOSTICS, *(key or (4, j)))
        parts = []
        for Y in _joint_sample(fit, params, n_sim, g):
            parts.append(W @ fit.to_original(Y))
        return np.quantile(np.concatenate(parts, axis=1), p, axis=1).T

    Q = np.array(_map(one, idx, threads))
    plug = one(None, fit.posterior_mean(), (5,))
    return dict(regions=labels, m=m_list, probability=p, mean=Q.mean(axis=0),
                sd=Q.std(axis=0, ddof=1) if len(idx) > 1 else np.zeros(Q.shape[1:]),
                plugin=plug, n_draws=len(idx))


def fitted_chi_curve(fit, Y, u, bin_width, max_distance=None, n_sim=100_000, seed=0):
    """Empirical chi_u boxes per distance bin with model-based and limiting curves.

    The model-based ``chi_u`` is simulated at the posterior-mean parameters;
    the limiting curve is the analytic chi of the core field (zero for the
    Gaussian model).
    """
    if not 0 < u < 1:
        raise ParameterError("u must lie in (0, 1)")
    Y = np.asarray(Y, dtype=float)
    N = fit.sites.shape[0]
    pairs = np.column_stack(np.triu_indices(N, k=1))
    emp = np.array([chi_u_empirical(Y[a], Y[b], u).value for a, b in pairs])
    pm = fit.posterior_mean()
    g = _rng.stream(seed, _rng.DIAGNOSTICS, 6)
    sim = np.concatenate(list(_joint_sample(fit, pm, n_sim, g)), axis=1)
    model = np.array([chi_u_empirical(sim[a], sim[b], u).value for a, b in pairs])
    if fit.gaussian:
        limit = np.zeros(len(pairs))
    else:
        C = fit.site_covariance(pm["psi"], pm["r"])
        corr = C / np.sqrt(np.outer(np.diag(C), np.diag(C)))
        limit = chi_X_matrix(fit.basis, corr, pm["gamma"], pairs)
    d = np.linalg.norm(fit.sites[pairs[:, 0]] - fit.sites[pairs[:, 1]], axis=1)
    edges, which = distance_bins(d, bin_width, max_distance)
    rows = []
    for b in range(len(edges) - 1):
        sel = which == b
        if not sel.any():
            continue
        e = emp[sel]
        q25, q50, q75 = np.quantile(e, [0.25, 0.5, 0.75])
        rows.append(dict(distance_bin_center=0.5 * (edges[b] + edges[b + 1]),
                         emp_q25=float(q25), emp_median=float(q50), emp_q75=float(q75),
                         emp_min=float(e.min()), emp_max=float(e.max()),
                         model_chi_u=float(model[sel].mean()), limit_chi=float(limit[sel].mean()),
                         n_pairs=int(sel.sum())))
    return rows
