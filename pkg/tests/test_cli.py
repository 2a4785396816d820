import json
import os

import numpy as np
import pytest

from shot import io as sio
from shot.cli import main

SIM = ["--nx", "6", "--ny", "6", "--spacing", "0.5", "--K", "9", "--seed", "3"]
FIT = ["--iters", "60", "--burnin", "20", "--thin", "2", "--threshold-quantile", "0.8"]


@pytest.fixture(scope="module")
def sim(tmp_path_factory):
    out = tmp_path_factory.mktemp("sim")
    assert main(["simulate", "--out", str(out), "--t", "40", *SIM]) == 0
    return out


@pytest.fixture(scope="module")
def fitdir(sim, tmp_path_factory):
    out = tmp_path_factory.mktemp("fit")
    code = main(["fit", "--data", str(sim / "dataset.csv"), "--sites", str(sim / "sites.csv"),
                 "--mesh", str(sim / "mesh"), "--out", str(out), "--K", "9", *FIT])
    assert code == 0
    return out


def test_simulate_outputs_and_truth(sim):
    Y, ids, sites, elev = sio.read_dataset(sim / "dataset.csv", sim / "sites.csv")
    assert Y.shape == (36, 40) and elev is not None
    truth = sio.read_json(sim / "truth.json")
    assert (truth["tau"], truth["r"], truth["gamma"]) == (10.0, 0.9, 5.0)
    assert truth["mu_formula"].startswith("5 + 0.25 lon^2 + 0.25 lat^2 + 0.25 elev^2")
    man = sio.read_json(sim / "manifest.json")
    assert man["command"] == "simulate" and man["seed"] == 3


def test_simulate_t_flag(tmp_path):
    assert main(["simulate", "--out", str(tmp_path), "--t", "10", *SIM]) == 0
    Y, *_ = sio.read_dataset(tmp_path / "dataset.csv", tmp_path / "sites.csv")
    assert Y.shape[1] == 10


def test_simulate_deterministic(tmp_path):
    for d in ("a", "b"):
        assert main(["simulate", "--out", str(tmp_path / d), "--t", "10", *SIM]) == 0
    for f in ("dataset.csv", "sites.csv", "truth.json", "knots.csv"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_config_file_and_flag_precedence(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"t": 7, "nx": 4, "ny": 4, "spacing": 0.5, "K": 4, "seed": 1}))
    assert main(["simulate", "--config", str(cfg), "--out", str(tmp_path / "a")]) == 0
    assert main(["simulate", "--config", str(cfg), "--t", "5", "--out", str(tmp_path / "b")]) == 0
    ya, *_ = sio.read_dataset(tmp_path / "a" / "dataset.csv", tmp_path / "a" / "sites.csv")
    yb, *_ = sio.read_dataset(tmp_path / "b" / "dataset.csv", tmp_path / "b" / "sites.csv")
    assert ya.shape == (16, 7) and yb.shape == (16, 5)
    cfg.write_text(json.dumps({"bogus": 1}))
    assert main(["simulate", "--config", str(cfg), "--out", str(tmp_path / "c")]) == 2


def test_usage_and_data_exit_codes(tmp_path, sim, capsys):
    assert main(["fit", "--out", str(tmp_path)]) == 2
    assert "--data is required" in capsys.readouterr().err
    assert main(["fit", "--data", str(tmp_path / "nope.csv"), "--sites", str(sim / "sites.csv"),
                 "--out", str(tmp_path)]) == 2
    bad = tmp_path / "bad.csv"
    bad.write_text("t,site_id,y\n0,0,1.0\n")
    assert main(["fit", "--data", str(bad), "--sites", str(sim / "sites.csv"),
                 "--out", str(tmp_path)]) == 3
    with pytest.raises(SystemExit) as e:
        main([])
    assert e.value.code == 2
    assert main(["simulate", "--out", str(tmp_path / "s"), "--threads", "0", *SIM]) == 0
    assert main(["fit", "--data", str(sim / "dataset.csv"), "--sites", str(sim / "sites.csv"),
                 "--out", str(tmp_path / "f"), "--threads", "0", *FIT]) == 2


def test_single_fit_writes_samples_and_no_table(fitdir):
    names = sorted(os.listdir(fitdir))
    assert "samples_K9_phi0.csv" in names and "fit_K9_phi0.json" in names
    assert "dic_table.csv" not in names
    samples, iters = sio.read_samples(fitdir / "samples_K9_phi0.csv")
    np.testing.assert_array_equal(iters, np.arange(22, 61, 2))
    assert samples["mu"].shape == (20, 36)
    info = sio.read_json(fitdir / "fit_K9_phi0.json")
    assert np.isfinite(info["dic"]["scaled"])


def test_fit_deterministic_across_threads(sim, tmp_path):
    args = ["fit", "--data", str(sim / "dataset.csv"), "--sites", str(sim / "sites.csv"),
            "--mesh", str(sim / "mesh"), "--K", "9", *FIT]
    assert main([*args, "--out", str(tmp_path / "a"), "--threads", "1"]) == 0
    os.environ["SHOT_THREADS"] = "3"
    try:
        assert main([*args, "--out", str(tmp_path / "b")]) == 0
    finally:
        del os.environ["SHOT_THREADS"]
    f = "samples_K9_phi0.csv"
    assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_fit_grid_comparison_table(sim, tmp_path):
    code = main(["fit", "--data", str(sim / "dataset.csv"), "--sites", str(sim / "sites.csv"),
                 "--mesh", str(sim / "mesh"), "--out", str(tmp_path), "--K", "4,9,16,25",
                 "--phi-frac", "grid", "--iters", "4", "--burnin", "2", "--thin", "1",
                 "--threshold-quantile", "0.8"])
    assert code == 0
    table = sio.read_rows(tmp_path / "dic_table.csv")
    assert [r["K"] for r in table] == [4, 9, 16, 25]
    cells = [r[f"phi{j}"] for r in table for j in range(3)]
    assert len(cells) == 12 and all(np.isfinite(cells))


def test_gmrf_fit_and_chi_rejects_it(sim, tmp_path):
    code = main(["fit", "--data", str(sim / "dataset.csv"), "--sites", str(sim / "sites.csv"),
                 "--mesh", str(sim / "mesh"), "--out", str(tmp_path), "--model", "gmrf", *FIT])
    assert code == 0
    assert "samples_gmrf.csv" in os.listdir(tmp_path)
    assert main(["chi", "--fit", str(tmp_path), "--out", str(tmp_path / "c.csv")]) == 2


def test_chi_from_truth(sim, tmp_path):
    out = tmp_path / "chi.csv"
    code = main(["chi", "--truth", str(sim / "truth.json"), "--sites", str(sim / "sites.csv"),
                 "--mesh", str(sim / "mesh"), "--knots", str(sim / "knots.csv"),
                 "--out", str(out), "--bin-width", "0.5"])
    assert code == 0
    rows = sio.read_rows(out)
    assert list(rows[0]) == ["distance_bin_center", "chi_mean", "chi_q025", "chi_q975", "n_pairs"]
    assert sum(r["n_pairs"] for r in rows) == 36 * 35 // 2
    assert all(0 <= r["chi_mean"] <= 1 for r in rows)
    assert main(["chi", "--out", str(out)]) == 2


def test_chi_from_fit(fitdir, tmp_path):
    out = tmp_path / "chi.csv"
    assert main(["chi", "--fit", str(fitdir), "--out", str(out), "--simulate", "500"]) == 0
    assert "sim_chi_mean" in sio.read_rows(out)[0]


def test_diagnose_needs_enough_draws(fitdir, tmp_path):
    code = main(["diagnose", "--fit", str(fitdir), "--out", str(tmp_path), "--n-sim", "2000",
                 "--draws", "5"])
    # 20 draws are fewer than the 100 a summary needs
    assert code == 3


def test_diagnose(sim, tmp_path):
    fit = tmp_path / "fit"
    assert main(["fit", "--data", str(sim / "dataset.csv"), "--sites", str(sim / "sites.csv"),
                 "--mesh", str(sim / "mesh"), "--out", str(fit), "--K", "9", "--iters", "220",
                 "--burnin", "20", "--thin", "2", "--threshold-quantile", "0.8"]) == 0
    out = tmp_path / "diag"
    code = main(["diagnose", "--fit", str(fit), "--out", str(out), "--n-sim", "2000",
                 "--draws", "5", "--qq-sites", "0,3", "--u", "0.9", "--bin-width", "0.75"])
    assert code == 0
    summary = sio.read_rows(out / "summary.csv")
    assert list(summary[0]) == ["parameter", "mean", "sd", "q025", "q975", "ess"]
    names = [r["parameter"] for r in summary]
    assert names[:4] == ["tau", "psi", "r", "gamma"] and "theta[3]" in names
    for r in summary:
        assert r["q025"] <= r["mean"] <= r["q975"] and r["sd"] >= 0
    assert len(sio.read_rows(out / "trace.csv")) == 100
    qq = sio.read_rows(out / "qq_site3.csv")
    assert [r["level"] for r in qq] == [0.95, 0.96, 0.97, 0.98, 0.99, 0.995]
    assert all(r["q025"] <= r["median"] <= r["q975"] for r in qq)
    curve = sio.read_rows(out / "chi_curve.csv")
    assert sum(r["n_pairs"] for r in curve) == 36 * 35 // 2


def test_return_levels_and_regions(fitdir, sim, tmp_path):
    regions = tmp_path / "regions.csv"
    ids, _, _ = sio.read_sites(sim / "sites.csv")
    sio.write_rows([dict(site_id=s, region="A" if i < 18 else "B") for i, s in enumerate(ids)],
                   regions)
    code = main(["return-levels", "--fit", str(fitdir), "--out", str(tmp_path / "rl"),
                 "--m", "1,5,10", "--n-sim", "5000", "--draws", "4", "--regions", str(regions)])
    assert code == 0
    rows = sio.read_rows(tmp_path / "rl" / "return_levels.csv")
    assert len(rows) == 36
    assert [k for k in rows[0] if k.endswith("_mean")] == ["rl1_mean", "rl5_mean", "rl10_mean"]
    reg = sio.read_rows(tmp_path / "rl" / "regional_return_levels.csv")
    assert [r["region"] for r in reg] == ["A", "B"]
    assert (tmp_path / "rl" / "manifest.json").exists()


def test_mesh_command(sim, tmp_path):
    assert main(["mesh", "--sites", str(sim / "sites.csv"), "--K", "9", "--out", str(tmp_path)]) == 0
    info = sio.read_json(tmp_path / "mesh_info.json")
    assert info["phi_min"] < info["phi_max"] and len(info["phi_grid"]) == 3
    assert main(["mesh", "--out", str(tmp_path)]) == 2
