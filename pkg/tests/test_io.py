import shutil
import subprocess

import numpy as np
import pytest

from shot import io as sio
from shot.errors import DataError


def test_fmt_round_trips():
    for x in (0.1, 1 / 3, 1e-300, -2.5e17, np.float64(np.pi)):
        assert float(sio.fmt(x)) == x


@pytest.mark.skipif(shutil.which("git") is None, reason="git not available")
def test_file_hash_matches_git(tmp_path):
    f = tmp_path / "a.txt"
    f.write_bytes(b"hello\nworld\n")
    ref = subprocess.run(["git", "hash-object", str(f)], capture_output=True, text=True).stdout
    assert sio.file_hash(f) == ref.strip()


def test_dataset_round_trip(tmp_path):
    g = np.random.default_rng(0)
    Y = g.standard_normal((4, 7))
    sites = g.uniform(0, 1, (4, 2))
    sio.write_dataset(tmp_path, Y, sites, elev=[1.0, 2.0, 3.0, 4.0], site_ids=["a", "b", "c", "d"])
    Y2, ids, ll, elev = sio.read_dataset(tmp_path / "dataset.csv", tmp_path / "sites.csv")
    assert Y2.tobytes() == Y.tobytes() and ll.tobytes() == sites.tobytes()
    assert ids == ["a", "b", "c", "d"] and elev.tolist() == [1, 2, 3, 4]


def test_dataset_errors(tmp_path):
    sio.write_dataset(tmp_path, np.ones((2, 3)), np.zeros((2, 2)))
    (tmp_path / "gap.csv").write_text("t,site_id,y\n0,0,1\n0,1,1\n1,0,1\n")
    with pytest.raises(DataError, match="incomplete"):
        sio.read_dataset(tmp_path / "gap.csv", tmp_path / "sites.csv")
    (tmp_path / "unk.csv").write_text("t,site_id,y\n0,9,1\n")
    with pytest.raises(DataError, match="unknown site"):
        sio.read_dataset(tmp_path / "unk.csv", tmp_path / "sites.csv")
    (tmp_path / "dup.csv").write_text("site_id,lon,lat\n1,0,0\n1,1,1\n")
    with pytest.raises(DataError, match="duplicate"):
        sio.read_sites(tmp_path / "dup.csv")
    (tmp_path / "nocol.csv").write_text("site_id,lon\n1,0\n")
    with pytest.raises(DataError, match="lat"):
        sio.read_sites(tmp_path / "nocol.csv")


def test_sites_without_elevation(tmp_path):
    (tmp_path / "s.csv").write_text("site_id,lon,lat\nx,0.5,1.5\n")
    ids, ll, elev = sio.read_sites(tmp_path / "s.csv")
    assert ids == ["x"] and ll.tolist() == [[0.5, 1.5]] and elev is None


def test_samples_round_trip(tmp_path):
    g = np.random.default_rng(1)
    s = {"tau": g.random(5), "mu": g.random((5, 3)), "theta": g.random((5, 4))}
    sio.write_samples(s, np.arange(10, 60, 10), tmp_path / "s.csv")
    back, iters = sio.read_samples(tmp_path / "s.csv")
    assert iters.tolist() == [10, 20, 30, 40, 50]
    for k in s:
        assert back[k].tobytes() == s[k].tobytes()


def test_rows_and_json_round_trip(tmp_path):
    rows = [dict(a=0.1, b="x"), dict(a=2.0, c=3)]
    sio.write_rows(rows, tmp_path / "r.csv")
    back = sio.read_rows(tmp_path / "r.csv")
    assert back == [dict(a=0.1, b="x", c=""), dict(a=2.0, b="", c=3.0)]
    obj = dict(x=np.arange(3), y=np.float64(0.5), z=float("inf"), n={"k": (1, 2)})
    sio.write_json(obj, tmp_path / "o.json")
    assert sio.read_json(tmp_path / "o.json") == dict(x=[0, 1, 2], y=0.5, z="inf", n={"k": [1, 2]})


def test_regions(tmp_path):
    (tmp_path / "r.csv").write_text("site_id,region\na,north\nb,south\n")
    assert sio.read_regions(tmp_path / "r.csv", ["b", "a"]).tolist() == ["south", "north"]
    with pytest.raises(DataError):
        sio.read_regions(tmp_path / "r.csv", ["a", "c"])


def test_manifest(tmp_path):
    (tmp_path / "in.csv").write_text("x\n")
    man = sio.Manifest("simulate", dict(t=5), seed=3)
    man.add_input(tmp_path / "in.csv")
    man.phase("work")
    man.add_output("out.csv")
    man.write(tmp_path / "m.json")
    m = sio.read_json(tmp_path / "m.json")
    assert m["command"] == "simulate" and m["seed"] == 3 and m["config"] == {"t": 5}
    assert m["inputs"] == {"in.csv": sio.file_hash(tmp_path / "in.csv")}
    assert set(m["run"]["timings"]) == {"work", "total"}
