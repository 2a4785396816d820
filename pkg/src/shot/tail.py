"""Extremal dependence: empirical chi / chi-bar and closed-form limits.

Closed forms cover the single-scale mixture (one random scale for the whole
domain) and, for ``beta = 0``, the low-rank scale field and the full core
field.  All Student-t tail probabilities go through the regularized
incomplete beta function so that non-integer degrees of freedom work.
"""

import csv
from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import pdist
from scipy.special import betainc
from scipy.stats import rankdata

from .errors import ParameterError, UndefinedEstimateError

__all__ = ["ChiEstimate", "t_sf", "chi_u_empirical", "chibar_u_empirical", "hot_chi",
           "hot_chibar", "chi_R", "chi_X", "chi_X_matrix", "chi_curve", "bin_pairs",
           "write_curve_csv"]


@dataclass(frozen=True)
class ChiEstimate:
    value: float
    u: float
    standard_error: float
    n_pairs: int


def t_sf(x, df):
    """Student-t survival function ``P(T > x)``."""
    x = np.asarray(x, dtype=float)
    df = np.asarray(df, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        tail = 0.5 * betainc(df / 2.0, 0.5, df / (df + x * x))
    tail = np.where(np.isinf(x), 0.0, tail)
    return np.where(x >= 0, tail, 1.0 - tail)


def _pseudo_uniform(x):
    x = np.asarray(x, dtype=float)
    return rankdata(x, method="average") / (x.size + 1.0)


def _check_pair(x1, x2, u):
    x1 = np.asarray(x1, dtype=float).ravel()
    x2 = np.asarray(x2, dtype=float).ravel()
    if x1.shape != x2.shape:
        raise ParameterError("samples must have equal length")
    if not 0 < u < 1:
        raise ParameterError("u must lie in (0, 1)")
    if x1.size < 1.0 / (1.0 - u):
        raise ParameterError(f"need at least {int(np.ceil(1 / (1 - u)))} observations for u={u}")
    return x1, x2


def chi_u_empirical(x1, x2, u):
    """Rank-based ``P(U1 > u | U2 > u)`` with a binomial standard error.

    Ranks use midranks, so tied values (e.g. many zeros) share a level.
    """
    x1, x2 = _check_pair(x1, x2, u)
    e1 = _pseudo_uniform(x1) > u
    e2 = _pseudo_uniform(x2) > u
    n2 = int(e2.sum())
    if n2 == 0:
        raise UndefinedEstimateError(f"no marginal exceedances of level u={u}")
    value = float(np.sum(e1 & e2)) / n2
    se = np.sqrt(value * (1.0 - value) / n2)
    return ChiEstimate(value=value, u=float(u), standard_error=float(se), n_pairs=x1.size)


def chibar_u_empirical(x1, x2, u):
    """Plug-in ``2 log(1-u) / log C_bar(u, u) - 1``, clamped to [-1, 1].

    The marginal exceedance proportion replaces ``1 - u`` so that the
    estimate is exactly 1 for identical samples despite rank discreteness.
    """
    x1, x2 = _check_pair(x1, x2, u)
    e1 = _pseudo_uniform(x1) > u
    e2 = _pseudo_uniform(x2) > u
    n = x1.size
    joint = float(np.sum(e1 & e2)) / n
    if joint == 0:
        raise UndefinedEstimateError(f"no joint exceedances of level u={u}")
    p = 0.5 * (e1.mean() + e2.mean())
    if joint >= 1.0:
        return ChiEstimate(value=1.0, u=float(u), standard_error=0.0, n_pairs=n)
    value = 2.0 * np.log(p) / np.log(joint) - 1.0
    se = abs(2.0 * np.log(p)) / (joint * np.log(joint) ** 2) * np.sqrt(joint * (1 - joint) / n)
    return ChiEstimate(value=float(np.clip(value, -1.0, 1.0)), u=float(u),
                       standard_error=float(se), n_pairs=n)


def hot_chi(gamma, rho):
    """Limiting chi of the single-scale mixture with Pareto scale (``beta = 0``)."""
    gamma = np.asarray(gamma, dtype=float)
    rho = np.asarray(rho, dtype=float)
    if np.any(gamma <= 0):
        raise ParameterError("gamma must be positive")
    if np.any((rho < -1) | (rho > 1)):
        raise ParameterError("rho must lie in [-1, 1]")
    with np.errstate(divide="ignore"):
        arg = np.sqrt((gamma + 1.0) * (1.0 - rho) / (1.0 + rho))
    out = 2.0 * t_sf(arg, gamma + 1.0)
    return out if out.ndim else float(out)


def hot_chibar(beta, rho):
    """Limiting chi-bar of the single-scale mixture with Weibull-type scale (``beta > 0``)."""
    rho = np.asarray(rho, dtype=float)
    if not beta > 0:
        raise ParameterError("beta must be positive")
    out = 2.0 * ((1.0 + rho) / 2.0) ** (beta / (beta + 2.0)) - 1.0
    return out if np.ndim(out) else float(out)


def _rows(basis, i, j):
    B = basis.B if hasattr(basis, "B") else np.asarray(basis, dtype=float)
    if B.ndim == 1:
        return np.asarray(i, dtype=float), np.asarray(j, dtype=float)
    return B[i], B[j]


def chi_R(basis, i, j):
    """Tail correlation of the scale field: ``sum_k min(B_k(s_i), B_k(s_j))``.

    ``basis`` is a BasisSystem (``i``, ``j`` site indices) or, for direct
    use, ``i`` and ``j`` may be weight rows when ``basis`` is None.
    """
    b1, b2 = (np.asarray(i, float), np.asarray(j, float)) if basis is None else _rows(basis, i, j)
    return float(np.minimum(b1, b2).sum())


def _chi_x_terms(b1, b2, rho, gamma):
    """Sum over jointly covering bases; arrays broadcast over leading axes, K last."""
    both = (b1 > 0) & (b2 > 0)
    s1 = np.where(both, b1, 1.0)
    s2 = np.where(both, b2, 1.0)
    # both ratios from the signed log difference so that swapping sites is exact
    dlog = (np.log(s1) - np.log(s2)) / gamma
    with np.errstate(over="ignore"):
        ratio12, ratio21 = np.exp(dlog), np.exp(-dlog)
    rho = np.asarray(rho, dtype=float)[..., None]
    denom = np.sqrt(np.maximum(1.0 - rho ** 2, 0.0))
    c = np.sqrt(gamma + 1.0)

    def arg(ratio):
        num = ratio - rho
        with np.errstate(divide="ignore", invalid="ignore"):
            a = c * num / denom
        # rho == 1: 0/0 -> 0 (equal weights), otherwise +-inf
        a = np.where(denom == 0, np.where(num == 0, 0.0, np.where(num > 0, np.inf, -np.inf)), a)
        return a

    term = s1 * t_sf(arg(ratio12), gamma + 1.0) + s2 * t_sf(arg(ratio21), gamma + 1.0)
    return np.where(both, term, 0.0).sum(axis=-1)


def chi_X(basis, rho, gamma, i, j):
    """Limiting chi of the core field between sites ``i`` and ``j`` (``beta = 0``).

    ``rho`` is the correlation of the Gaussian component between the two
    sites.
    """
    if not gamma > 0:
        raise ParameterError("gamma must be positive")
    if not -1 < rho <= 1:
        raise ParameterError("rho must lie in (-1, 1]")
    b1, b2 = (np.asarray(i, float), np.asarray(j, float)) if basis is None else _rows(basis, i, j)
    return float(_chi_x_terms(b1, b2, rho, gamma))


def chi_X_matrix(basis, corr, gamma, pairs=None):
    """Vectorized ``chi_X`` over site pairs (all pairs ``i < j`` by default)."""
    B = basis.B if hasattr(basis, "B") else np.asarray(basis, dtype=float)
    corr = np.asarray(corr, dtype=float)
    if pairs is None:
        pairs = np.column_stack(np.triu_indices(B.shape[0], k=1))
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    out = np.empty(pairs.shape[0])
    for s in range(0, pairs.shape[0], 4096):
        p = pairs[s:s + 4096]
        out[s:s + 4096] = _chi_x_terms(B[p[:, 0]], B[p[:, 1]], corr[p[:, 0], p[:, 1]], gamma)
    return out


def distance_bins(d, bin_width, max_distance=None):
    """Bin edges from 0 and the bin index of each distance (-1 beyond ``max_distance``)."""
    if not bin_width > 0:
        raise ParameterError("bin_width must be positive")
    top = d.max() if max_distance is None else max_distance
    n_bins = int(np.floor(top / bin_width)) + 1
    edges = bin_width * np.arange(n_bins + 1)
    return edges, np.where(d <= top, np.digitize(d, edges) - 1, -1)


def bin_pairs(sites, values, bin_width, max_distance=None, pairs=None):
    """Summaries of pairwise ``values`` in distance bins.

    Returns a list of dicts with keys ``distance_bin_center``, ``chi_mean``,
    ``chi_q025``, ``chi_q975``, ``n_pairs`` (empty bins omitted).
    """
    sites = np.asarray(sites, dtype=float)
    if pairs is None:
        d = pdist(sites)
    else:
        pairs = np.asarray(pairs)
        d = np.linalg.norm(sites[pairs[:, 0]] - sites[pairs[:, 1]], axis=1)
    values = np.asarray(values, dtype=float)
    edges, which = distance_bins(d, bin_width, max_distance)
    rows = []
    for b in range(len(edges) - 1):
        v = values[which == b]
        if v.size == 0:
            continue
        rows.append(dict(distance_bin_center=0.5 * (edges[b] + edges[b + 1]),
                         chi_mean=float(v.mean()),
                         chi_q025=float(np.quantile(v, 0.025)),
                         chi_q975=float(np.quantile(v, 0.975)),
                         n_pairs=int(v.size)))
    return rows


def chi_curve(basis, op, mix, bin_width, max_distance=None, simulated=None, u=None):
    """Analytic chi_X (and optionally simulated chi_u) of all site pairs, binned by distance.

    Parameters
    ----------
    basis : BasisSystem
    op : SpdeOperator
        Supplies the Gaussian correlation between sites.
    mix : MixParams
        Must have ``beta == 0`` for the analytic curve.
    simulated : (N, T) array, optional
        Core-field replicates; if given, empirical chi_u at level ``u`` is
        binned too (keys prefixed ``sim_``).
    """
    if mix.beta != 0:
        raise ParameterError("analytic chi_X requires beta = 0")
    corr = op.site_correlation()
    chi = chi_X_matrix(basis, corr, mix.gamma)
    rows = bin_pairs(basis.sites, chi, bin_width, max_distance)
    if simulated is not None:
        pairs = np.column_stack(np.triu_indices(basis.N, k=1))
        sim = np.array([chi_u_empirical(simulated[a], simulated[b], u).value for a, b in pairs])
        srows = bin_pairs(basis.sites, sim, bin_width, max_distance)
        lookup = {round(r["distance_bin_center"], 12): r for r in srows}
        for r in rows:
            s = lookup.get(round(r["distance_bin_center"], 12))
            if s is not None:
                for key in ("chi_mean", "chi_q025", "chi_q975"):
                    r["sim_" + key] = s[key]
    return rows


def write_curve_csv(rows, path):
    if not rows:
        raise ParameterError("empty curve")
    keys = list(rows[0].keys())
    for r in rows[1:]:
        for k in r:
            if k not in keys:
                keys.append(k)
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.DictWriter(f, fieldnames=keys)
        w.writeheader()
        for r in rows:
            w.writerow(r)
