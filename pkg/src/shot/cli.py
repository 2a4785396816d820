"""Command-line interface: ``shot mesh|simulate|fit|chi|diagnose|return-levels``.

Every command accepts ``--config FILE`` (JSON object keyed by option name,
dashes or underscores) whose values are overridden by explicit flags, and
writes a ``manifest.json`` next to its outputs.
"""

import argparse
import logging
import os
import sys

import numpy as np

from . import io as sio
from .basis import KnotSet, basis_system, default_phi_grid
from .diagnostics import (FittedModel, fitted_chi_curve, marginal_quantiles,
                          regional_aggregate_return, return_levels, summarize)
from .errors import DataError, ParameterError, ShotError
from .inference import ChainConfig, Scaling, make_dataset, preprocess, run_chain
from .mesh import SpdeOperator, fem_matrices, load_mesh, projection_matrix, save_mesh
from .model import MixParams, simulate_core
from .study import design_from_sites, design_on_mesh, grid_design, simulate_dataset
from .tail import chi_curve, write_curve_csv

log = logging.getLogger("shot")

# synthetic 13 x 15 grid whose diameter matches psi = 0.946 = 0.15 * diameter
DEFAULT_SPACING = 0.946 / 0.15 / np.hypot(12, 14)

DEFAULTS = {
    "mesh": dict(sites=None, bbox=None, edge=None, extension=None, K=25, c=0.05, out=None),
    "simulate": dict(out=None, nx=13, ny=15, spacing=DEFAULT_SPACING, origin="88.0,20.6",
                     t=2440, seed=0, tau=10.0, psi=None, psi_frac=0.15, r=0.9, gamma=5.0,
                     beta=0.0, K=25, c=0.05, phi=None, phi_frac=0.25, edge=None, extension=None,
                     threshold_quantile=0.95),
    "fit": dict(data=None, sites=None, mesh=None, edge=None, extension=None, out=None,
                iters=20000, burnin=10000, thin=5, seed=0, K="25", phi=None, phi_frac="0.25",
                c=0.05, model="shot", threshold_quantile=0.95, preprocess=False,
                checkpoint_every=0, resume=False),
    "chi": dict(fit=None, tag=None, truth=None, sites=None, mesh=None, knots=None, out=None,
                bin_width=None, max_distance=None,
                simulate=0, u=0.99, seed=0),
    "diagnose": dict(fit=None, tag=None, out=None, u=0.99, bin_width=None, qq_sites="0",
                     levels="0.95,0.96,0.97,0.98,0.99,0.995", n_sim=100000, draws=200, seed=0),
    "return-levels": dict(fit=None, tag=None, out=None, m="1,5,10", n_sim=100000, draws=200,
                          regions=None, seed=0),
}


class UsageError(ShotError):
    exit_code = 2


def _floats(s):
    if s is None:
        return None
    if isinstance(s, (int, float)):
        return [float(s)]
    if isinstance(s, (list, tuple)):
        return [float(x) for x in s]
    return [float(x) for x in str(s).split(",") if x.strip()]


def _threads(opts):
    t = opts.get("threads")
    if t is None:
        t = os.environ.get("SHOT_THREADS", 1)
    try:
        t = int(t)
    except ValueError:
        raise UsageError(f"invalid thread count {t!r}")
    if t < 1:
        raise UsageError("thread count must be >= 1")
    return t


def _require(opts, *names):
    for n in names:
        if opts.get(n) in (None, ""):
            raise UsageError(f"--{n.replace('_', '-')} is required")


def _input(path):
    if not os.path.exists(path):
        raise UsageError(f"no such file or directory: {path}")
    return path


def _mesh_params(sites, edge, extension):
    from scipy.spatial import cKDTree
    d, _ = cKDTree(sites).query(sites, k=2)
    spacing = float(np.median(d[:, 1])) if len(sites) > 1 else 1.0
    edge = spacing if edge is None else float(edge)
    extension = 2.0 * spacing if extension is None else float(extension)
    return edge, extension


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_mesh(o, man):
    _require(o, "out")
    if o["sites"]:
        man.add_input(_input(o["sites"]))
        _, sites, elev = sio.read_sites(o["sites"])
    elif o["bbox"]:
        b = _floats(o["bbox"])
        if len(b) != 4:
            raise UsageError("--bbox needs xmin,ymin,xmax,ymax")
        sites = np.array([[b[0], b[1]], [b[2], b[3]]])
        elev = None
    else:
        raise UsageError("give --sites or --bbox")
    edge, ext = _mesh_params(sites, o["edge"], o["extension"])
    des = design_from_sites(sites, edge, ext, K=int(o["K"]), c=float(o["c"]), elev=elev)
    os.makedirs(o["out"], exist_ok=True)
    save_mesh(des.mesh, o["out"])
    des.knots.to_csv(os.path.join(o["out"], "knots.csv"))
    sio.write_json(dict(phi_min=des.phi_min, phi_max=des.phi_max,
                        phi_grid=default_phi_grid(des.phi_min, des.phi_max),
                        n_nodes=des.fem.n, n_triangles=des.mesh.n_triangles,
                        edge=edge, extension=ext), os.path.join(o["out"], "mesh_info.json"))
    for f in ("vertices.csv", "triangles.csv", "knots.csv", "mesh_info.json"):
        man.add_output(f)
    print(f"mesh: {des.fem.n} nodes, {des.mesh.n_triangles} triangles -> {o['out']}")
    return o["out"]


def cmd_simulate(o, man):
    _require(o, "out")
    origin = _floats(o["origin"])
    des = grid_design(int(o["nx"]), int(o["ny"]), float(o["spacing"]), edge=o["edge"],
                      extension=o["extension"], K=int(o["K"]), c=float(o["c"]),
                      origin=tuple(origin))
    if o["phi"] is not None:
        phi_frac = (float(o["phi"]) - des.phi_min) / (des.phi_max - des.phi_min)
    else:
        phi_frac = float(o["phi_frac"])
    psi_frac = float(o["psi"]) / des.delta if o["psi"] is not None else float(o["psi_frac"])
    data, truth = simulate_dataset(des, T=int(o["t"]), seed=int(o["seed"]), tau=float(o["tau"]),
                                   psi_frac=psi_frac, r=float(o["r"]), gamma=float(o["gamma"]),
                                   beta=float(o["beta"]), phi_frac=phi_frac,
                                   quantile=float(o["threshold_quantile"]))
    out = o["out"]
    elev = des.covariates[:, 3]
    sio.write_dataset(out, data.Y, des.sites, elev=elev)
    mesh_dir = os.path.join(out, "mesh")
    save_mesh(des.mesh, mesh_dir)
    des.knots.to_csv(os.path.join(out, "knots.csv"))
    real = truth["realization"]
    p = truth["params"]
    sio.write_json(dict(
        mu_formula="5 + 0.25 lon^2 + 0.25 lat^2 + 0.25 elev^2 (lon, lat, elev centered)",
        tau=p.tau, psi=p.psi, r=p.r, gamma=p.mix.gamma, beta=p.mix.beta, phi=truth["phi"],
        K=des.knots.K, theta=p.theta, mu=real.mu, thresholds=data.thresholds,
        delta=des.delta, phi_min=des.phi_min, phi_max=des.phi_max,
        latent=dict(R_star_mean=float(real.R_star.mean()), R_star_max=float(real.R_star.max()),
                    R_mean_by_site=real.R.mean(axis=1), censored_fraction=float(data.censored.mean())),
    ), os.path.join(out, "truth.json"))
    for f in ("dataset.csv", "sites.csv", "knots.csv", "truth.json", "mesh"):
        man.add_output(f)
    print(f"simulate: {data.N} sites x {data.T} replicates -> {out}")
    return out


def _load_inputs(o, man):
    _require(o, "data", "sites")
    man.add_input(_input(o["data"]))
    man.add_input(_input(o["sites"]))
    Y, ids, sites, elev = sio.read_dataset(o["data"], o["sites"])
    if elev is None:
        log.warning("no elevation column; using zeros")
        elev = np.zeros(len(ids))
    return Y, ids, sites, elev


def cmd_fit(o, man):
    _require(o, "out")
    Y, ids, sites, elev = _load_inputs(o, man)
    threads = _threads(o)
    scaling = None
    if o["preprocess"]:
        Y, scaling = preprocess(Y)
    if o["mesh"]:
        mesh = load_mesh(_input(o["mesh"]))
        edge = ext = None
    else:
        edge, ext = _mesh_params(sites, o["edge"], o["extension"])
        mesh = None
    Ks = [int(k) for k in _floats(o["K"])]
    model = o["model"]
    if model != "shot":
        Ks = Ks[:1]
    os.makedirs(o["out"], exist_ok=True)
    mesh_dir = os.path.join(o["out"], "mesh")
    rows, fits = [], []
    for K in Ks:
        des = (design_on_mesh(mesh, sites, K=K, c=float(o["c"]), elev=elev) if mesh is not None
               else design_from_sites(sites, edge, ext, K=K, c=float(o["c"]), elev=elev))
        if not os.path.exists(mesh_dir):
            save_mesh(des.mesh, mesh_dir)
        if o["phi"] == "grid" or o["phi_frac"] == "grid":
            phis = default_phi_grid(des.phi_min, des.phi_max)
        elif o["phi"] is not None:
            phis = _floats(o["phi"])
        else:
            phis = [des.phi_at(f) for f in _floats(o["phi_frac"])]
        if model != "shot":
            phis = phis[:1]
        data = make_dataset(Y, sites, des.covariates, threshold_quantile=float(o["threshold_quantile"]),
                            scaling=scaling)
        for j, phi in enumerate(phis):
            tag = f"K{K}_phi{j}" if model == "shot" else model
            cfg = ChainConfig(n_iter=int(o["iters"]), n_burnin=int(o["burnin"]), thin=int(o["thin"]),
                              seed=int(o["seed"]), phi=float(phi), K=K, c=float(o["c"]), model=model,
                              threads=threads,
                              checkpoint_path=os.path.join(o["out"], f"state_{tag}.npz"),
                              checkpoint_every=int(o["checkpoint_every"]))
            ckpt = cfg.checkpoint_path if o["resume"] and os.path.exists(cfg.checkpoint_path) else None
            man.phase(f"fit_{tag}")
            res = run_chain(data, cfg, des.mesh, knots=des.knots, resume_from=ckpt)
            spath = os.path.join(o["out"], f"samples_{tag}.csv")
            sio.write_samples(res.samples, res.iterations, spath)
            des.knots.to_csv(os.path.join(o["out"], f"knots_{tag}.csv"))
            info = dict(tag=tag, K=K, phi=float(phi), model=model, c=float(o["c"]),
                        phi_min=des.phi_min, phi_max=des.phi_max,
                        data=os.path.abspath(o["data"]), sites=os.path.abspath(o["sites"]),
                        threshold_quantile=float(o["threshold_quantile"]),
                        thresholds=data.thresholds, dic=res.dic, acceptance=res.acceptance,
                        scaling=None if scaling is None else dict(center=scaling.center,
                                                                  scale=scaling.scale),
                        seconds=res.timings["total_seconds"])
            sio.write_json(info, os.path.join(o["out"], f"fit_{tag}.json"))
            for f in (spath, f"fit_{tag}.json", f"knots_{tag}.csv"):
                man.add_output(f)
            rows.append(dict(K=K, phi_index=j, phi=float(phi), dic_scaled=res.dic["scaled"],
                             dic=res.dic["dic"], p_d=res.dic["p_d"]))
            fits.append(tag)
            print(f"fit {tag}: scaled DIC {res.dic['scaled']:.6f}")
    if len(rows) > 1:
        # K rows x phi columns, as in a model-comparison table
        nphi = max(r["phi_index"] for r in rows) + 1
        table = []
        for K in Ks:
            row = dict(K=K)
            for j in range(nphi):
                hit = [r for r in rows if r["K"] == K and r["phi_index"] == j]
                row[f"phi{j}"] = hit[0]["dic_scaled"] if hit else ""
            table.append(row)
        sio.write_rows(table, os.path.join(o["out"], "dic_table.csv"))
        sio.write_rows(rows, os.path.join(o["out"], "dic_long.csv"))
        man.add_output("dic_table.csv")
    return fits


def _load_fit(o, man):
    """Rebuild a FittedModel (and its data) from a fit directory."""
    _require(o, "fit")
    d = _input(o["fit"])
    tag = o.get("tag")
    if tag is None:
        tags = sorted(f[4:-5] for f in os.listdir(d) if f.startswith("fit_") and f.endswith(".json"))
        if not tags:
            raise DataError(f"{d}: no fit_*.json files")
        tag = tags[0]
    info = sio.read_json(os.path.join(d, f"fit_{tag}.json"))
    spath = os.path.join(d, f"samples_{tag}.csv")
    man.add_input(spath)
    samples, iters = sio.read_samples(spath)
    mesh = load_mesh(os.path.join(d, "mesh"))
    Y, ids, sites, elev = sio.read_dataset(info["data"], info["sites"])
    scaling = None
    if info.get("scaling"):
        scaling = Scaling(center=np.asarray(info["scaling"]["center"]),
                          scale=np.asarray(info["scaling"]["scale"]))
        Y = scaling.transform(Y)
    fem = fem_matrices(mesh)
    A = projection_matrix(mesh, sites)
    basis = None
    if info["model"] == "shot":
        knots = KnotSet.from_csv(os.path.join(d, f"knots_{tag}.csv"), c=info["c"])
        basis = basis_system(sites, knots, info["phi"])
    elif info["model"] == "hot":
        from .inference import single_basis
        basis = single_basis(sites)
    draws = {k: samples[k] for k in ("tau", "psi", "r", "mu")}
    if basis is not None:
        draws["gamma"] = samples["gamma"]
    fit = FittedModel(fem=fem, A=A, sites=sites, draws=draws, basis=basis, scaling=scaling)
    return fit, samples, iters, info, Y, ids, tag


def _bin_width(o, sites):
    if o.get("bin_width") is not None:
        return float(o["bin_width"])
    from scipy.spatial.distance import pdist
    return float(pdist(sites).max()) / 10.0


def cmd_chi(o, man):
    _require(o, "out")
    if o["truth"]:
        _require(o, "sites")
        man.add_input(_input(o["truth"]))
        tr = sio.read_json(o["truth"])
        _, sites, _ = sio.read_sites(_input(o["sites"]))
        mesh = load_mesh(_input(o["mesh"])) if o.get("mesh") else None
        if mesh is None:
            raise UsageError("--mesh is required with --truth")
        knots = KnotSet.from_csv(_input(o["knots"]))
        basis = basis_system(sites, knots, tr["phi"])
        op = SpdeOperator(fem_matrices(mesh), projection_matrix(mesh, sites), tr["psi"], tr["r"])
        mix = MixParams(0.0, tr["gamma"])
    elif o["fit"]:
        fit, samples, _, info, _, _, _ = _load_fit(o, man)
        if fit.gaussian:
            raise ParameterError("the Gaussian model has no limiting chi curve")
        pm = fit.posterior_mean()
        sites, basis = fit.sites, fit.basis
        op = SpdeOperator(fit.fem, fit.A, pm["psi"], pm["r"])
        mix = MixParams(0.0, float(pm["gamma"]))
    else:
        raise UsageError("give --truth (with --sites, --mesh, --knots) or --fit")
    simulated = None
    if int(o["simulate"]):
        simulated = simulate_core(op, basis, mix, int(o["simulate"]), int(o["seed"]),
                                  keep_latent=False).X
    rows = chi_curve(basis, op, mix, _bin_width(o, sites), o["max_distance"], simulated=simulated,
                     u=float(o["u"]))
    write_curve_csv(rows, o["out"])
    man.add_output(o["out"])
    print(f"chi: {len(rows)} distance bins -> {o['out']}")


def cmd_diagnose(o, man):
    _require(o, "out")
    fit, samples, iters, info, Y, ids, tag = _load_fit(o, man)
    os.makedirs(o["out"], exist_ok=True)
    threads = _threads(o)
    names = ["tau", "psi", "r", "gamma", "tau_mu", "theta"]
    summ = summarize({k: samples[k] for k in names if k in samples})
    rows = [dict(parameter=k, mean=s.mean, sd=s.sd, q025=s.q025, q975=s.q975, ess=s.ess)
            for k, s in summ.items()]
    sio.write_rows(rows, os.path.join(o["out"], "summary.csv"))
    trace = []
    for k, it in enumerate(iters):
        row = dict(iteration=int(it))
        for n in ("tau", "psi", "r", "gamma", "tau_mu", "deviance"):
            if n in samples:
                row[n] = float(samples[n][k])
        trace.append(row)
    sio.write_rows(trace, os.path.join(o["out"], "trace.csv"))
    levels = _floats(o["levels"])
    for site in [int(s) for s in _floats(o["qq_sites"])]:
        q = marginal_quantiles(fit, site, levels, n_sim=int(o["n_sim"]), n_draws=int(o["draws"]),
                               seed=int(o["seed"]), threads=threads)
        orig = fit.to_original(Y[site], [site]) if fit.scaling is not None else Y[site]
        emp = np.quantile(np.asarray(orig).ravel(), levels)
        for r, e in zip(q, emp):
            r["empirical"] = float(e)
        sio.write_rows(q, os.path.join(o["out"], f"qq_site{site}.csv"))
    curve = fitted_chi_curve(fit, Y, float(o["u"]), _bin_width(o, fit.sites),
                             n_sim=int(o["n_sim"]), seed=int(o["seed"]))
    sio.write_rows(curve, os.path.join(o["out"], "chi_curve.csv"))
    for f in ("summary.csv", "trace.csv", "chi_curve.csv"):
        man.add_output(f)
    print(f"diagnose {tag}: summary of {len(rows)} parameters -> {o['out']}")


def cmd_return_levels(o, man):
    _require(o, "out")
    fit, samples, iters, info, Y, ids, tag = _load_fit(o, man)
    os.makedirs(o["out"], exist_ok=True)
    threads = _threads(o)
    ms = _floats(o["m"])
    rl = return_levels(fit, ms, n_sim=int(o["n_sim"]), n_draws=int(o["draws"]),
                       seed=int(o["seed"]), threads=threads)
    rows = []
    for i, sid in enumerate(ids):
        row = dict(site_id=sid, lon=float(fit.sites[i, 0]), lat=float(fit.sites[i, 1]))
        for k, m in enumerate(ms):
            lab = f"{m:g}"
            row[f"rl{lab}_mean"] = float(rl["mean"][i, k])
            row[f"rl{lab}_sd"] = float(rl["sd"][i, k])
            row[f"rl{lab}_plugin"] = float(rl["plugin"][i, k])
            row[f"rl{lab}_mcse"] = float(rl["mc_se"][i, k])
        rows.append(row)
    sio.write_rows(rows, os.path.join(o["out"], "return_levels.csv"))
    man.add_output("return_levels.csv")
    if o["regions"]:
        man.add_input(_input(o["regions"]))
        reg = sio.read_regions(o["regions"], ids)
        agg = regional_aggregate_return(fit, reg, ms, n_sim=int(o["n_sim"]), n_draws=int(o["draws"]),
                                        seed=int(o["seed"]), threads=threads)
        rrows = []
        for j, lab in enumerate(agg["regions"]):
            row = dict(region=lab)
            for k, m in enumerate(ms):
                row[f"rl{m:g}_mean"] = float(agg["mean"][j, k])
                row[f"rl{m:g}_sd"] = float(agg["sd"][j, k])
                row[f"rl{m:g}_plugin"] = float(agg["plugin"][j, k])
            rrows.append(row)
        sio.write_rows(rrows, os.path.join(o["out"], "regional_return_levels.csv"))
        man.add_output("regional_return_levels.csv")
    print(f"return-levels {tag}: {len(rows)} sites x {len(ms)} periods -> {o['out']}")


COMMANDS = {"mesh": cmd_mesh, "simulate": cmd_simulate, "fit": cmd_fit, "chi": cmd_chi,
            "diagnose": cmd_diagnose, "return-levels": cmd_return_levels}


def build_parser():
    S = argparse.SUPPRESS
    p = argparse.ArgumentParser(prog="shot", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", default=S)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", default=S, help="JSON file with option values")
        sp.add_argument("--threads", type=int, default=S,
                        help="worker threads (default: $SHOT_THREADS or 1)")
        return sp

    m = common(sub.add_parser("mesh", help="build a triangular mesh and knots", argument_default=S))
    m.add_argument("--sites", help="sites CSV (site_id, lon, lat[, elev])")
    m.add_argument("--bbox", help="xmin,ymin,xmax,ymax")
    m.add_argument("--edge", type=float, help="target edge length (default: site spacing)")
    m.add_argument("--extension", type=float, help="outer extension (default: twice the spacing)")
    m.add_argument("--K", type=int)
    m.add_argument("--c", type=float, help="knot candidate fraction")
    m.add_argument("--out")

    s = common(sub.add_parser("simulate", help="simulate a synthetic censored dataset",
                              argument_default=S))
    s.add_argument("--out")
    s.add_argument("--nx", type=int)
    s.add_argument("--ny", type=int)
    s.add_argument("--spacing", type=float)
    s.add_argument("--origin", help="lon,lat of the first grid site")
    s.add_argument("--t", type=int, help="number of replicates")
    s.add_argument("--seed", type=int)
    s.add_argument("--tau", type=float)
    s.add_argument("--psi", type=float, help="range (default: psi-frac times the site diameter)")
    s.add_argument("--psi-frac", dest="psi_frac", type=float)
    s.add_argument("--r", type=float)
    s.add_argument("--gamma", type=float)
    s.add_argument("--beta", type=float)
    s.add_argument("--K", type=int)
    s.add_argument("--c", type=float)
    s.add_argument("--phi", type=float)
    s.add_argument("--phi-frac", dest="phi_frac", type=float)
    s.add_argument("--edge", type=float)
    s.add_argument("--extension", type=float)
    s.add_argument("--threshold-quantile", dest="threshold_quantile", type=float)

    f = common(sub.add_parser("fit", help="run the MCMC sampler", argument_default=S))
    f.add_argument("--data", help="long-format dataset CSV (t, site_id, y)")
    f.add_argument("--sites", help="sites CSV")
    f.add_argument("--mesh", help="mesh directory (default: rectangular mesh around the sites)")
    f.add_argument("--edge", type=float)
    f.add_argument("--extension", type=float)
    f.add_argument("--out")
    f.add_argument("--iters", type=int)
    f.add_argument("--burnin", type=int)
    f.add_argument("--thin", type=int)
    f.add_argument("--seed", type=int)
    f.add_argument("--K", help="knot count(s), comma separated")
    f.add_argument("--phi", help="basis range(s), comma separated, or 'grid'")
    f.add_argument("--phi-frac", dest="phi_frac",
                   help="range(s) as fractions between phi_min and phi_max, or 'grid'")
    f.add_argument("--c", type=float)
    f.add_argument("--model", choices=["shot", "hot", "gmrf"])
    f.add_argument("--threshold-quantile", dest="threshold_quantile", type=float)
    f.add_argument("--preprocess", action="store_true", help="median/IQR scaling of positive values")
    f.add_argument("--checkpoint-every", dest="checkpoint_every", type=int)
    f.add_argument("--resume", action="store_true")

    def fitted(sp):
        sp.add_argument("--fit", help="output directory of 'shot fit'")
        sp.add_argument("--tag", help="which fit in the directory (default: first)")
        sp.add_argument("--out")
        sp.add_argument("--seed", type=int)
        return sp

    c = fitted(common(sub.add_parser("chi", help="analytic chi curve", argument_default=S)))
    c.add_argument("--truth", help="truth.json written by 'shot simulate'")
    c.add_argument("--sites")
    c.add_argument("--mesh")
    c.add_argument("--knots")
    c.add_argument("--bin-width", dest="bin_width", type=float)
    c.add_argument("--max-distance", dest="max_distance", type=float)
    c.add_argument("--simulate", type=int, help="also bin empirical chi_u from this many replicates")
    c.add_argument("--u", type=float)

    d = fitted(common(sub.add_parser("diagnose", help="posterior summaries and checks",
                                     argument_default=S)))
    d.add_argument("--u", type=float)
    d.add_argument("--bin-width", dest="bin_width", type=float)
    d.add_argument("--qq-sites", dest="qq_sites")
    d.add_argument("--levels")
    d.add_argument("--n-sim", dest="n_sim", type=int)
    d.add_argument("--draws", type=int)

    r = fitted(common(sub.add_parser("return-levels", help="per-site and regional return levels",
                                     argument_default=S)))
    r.add_argument("--m", help="return periods in seasons, comma separated")
    r.add_argument("--n-sim", dest="n_sim", type=int)
    r.add_argument("--draws", type=int)
    r.add_argument("--regions", help="CSV with columns site_id, region")
    return p


def resolve_options(args):
    """Defaults, then the config file, then explicit flags."""
    given = vars(args).copy()
    cmd = given.pop("command")
    opts = dict(DEFAULTS[cmd])
    cfg_path = given.pop("config", None)
    if cfg_path:
        cfg = sio.read_json(_input(cfg_path))
        if not isinstance(cfg, dict):
            raise UsageError("config file must hold a JSON object")
        for k, v in cfg.items():
            key = k.replace("-", "_")
            if key not in opts and key not in ("threads", "verbose", "mesh", "knots", "sites"):
                raise UsageError(f"unknown option {k!r} in config file")
            opts[key] = v
    opts.update(given)
    return cmd, opts


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cmd, opts = resolve_options(args)
        opts.pop("verbose", None)
        man = sio.Manifest(cmd, opts, seed=opts.get("seed"))
        man.phase(cmd)
        COMMANDS[cmd](opts, man)
        out = opts.get("out")
        if out:
            mdir = out if os.path.isdir(out) else os.path.dirname(os.path.abspath(out))
            man.write(os.path.join(mdir, "manifest.json" if os.path.isdir(out)
                                   else os.path.basename(out) + ".manifest.json"))
    except ShotError as exc:
        print(f"shot {args.command}: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"shot {args.command}: error: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
