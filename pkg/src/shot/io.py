"""CSV/JSON readers and writers, content hashes and run manifests."""

import csv
import hashlib
import json
import os
import platform
import time
from dataclasses import asdict, is_dataclass

import numpy as np

from .errors import DataError

__all__ = ["fmt", "file_hash", "write_dataset", "read_dataset", "write_samples", "read_samples",
           "write_rows", "read_rows", "write_json", "read_json", "Manifest", "read_regions"]

TOOL_VERSION = "0.1.0"


def fmt(x):
    """Shortest round-trip text for a float."""
    return repr(float(x))


def file_hash(path):
    """Git blob hash of a file's contents."""
    with open(path, "rb") as f:
        data = f.read()
    h = hashlib.sha1()
    h.update(b"blob %d\0" % len(data))
    h.update(data)
    return h.hexdigest()


def _jsonable(x):
    if is_dataclass(x):
        return _jsonable(asdict(x))
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, (np.floating,)):
        return float(x)
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, float) and not np.isfinite(x):
        return str(x)
    return x


def write_json(obj, path):
    with open(path, "w", encoding="utf-8") as f:
        json.dump(_jsonable(obj), f, indent=2, sort_keys=True)
        f.write("\n")


def read_json(path):
    with open(path, encoding="utf-8") as f:
        return json.load(f)


def write_rows(rows, path, columns=None):
    """Write a list of dicts as CSV; floats in round-trip form."""
    if columns is None:
        columns = []
        for r in rows:
            for k in r:
                if k not in columns:
                    columns.append(k)
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(columns)
        for r in rows:
            w.writerow([fmt(v) if isinstance(v, (float, np.floating)) else v
                        for v in (r.get(c, "") for c in columns)])


def read_rows(path):
    """Read a CSV into a list of dicts, converting numeric fields to float."""
    out = []
    with open(path, newline="", encoding="utf-8") as f:
        for r in csv.DictReader(f):
            row = {}
            for k, v in r.items():
                try:
                    row[k] = float(v)
                except (TypeError, ValueError):
                    row[k] = v
            out.append(row)
    return out


def write_dataset(directory, Y, sites, elev=None, site_ids=None):
    """Long-format ``dataset.csv`` (t, site_id, y) and ``sites.csv`` (site_id, lon, lat, elev)."""
    os.makedirs(directory, exist_ok=True)
    Y = np.asarray(Y, dtype=float)
    N, T = Y.shape
    ids = np.arange(N) if site_ids is None else np.asarray(site_ids)
    elev = np.zeros(N) if elev is None else np.asarray(elev, dtype=float)
    with open(os.path.join(directory, "sites.csv"), "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["site_id", "lon", "lat", "elev"])
        for i in range(N):
            w.writerow([ids[i], fmt(sites[i, 0]), fmt(sites[i, 1]), fmt(elev[i])])
    with open(os.path.join(directory, "dataset.csv"), "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["t", "site_id", "y"])
        for t in range(T):
            for i in range(N):
                w.writerow([t, ids[i], fmt(Y[i, t])])


def read_sites(path):
    """Returns ``(site_ids, lonlat (N,2), elev or None)``."""
    with open(path, newline="", encoding="utf-8") as f:
        rd = csv.DictReader(f)
        cols = rd.fieldnames or []
        for c in ("site_id", "lon", "lat"):
            if c not in cols:
                raise DataError(f"{path}: missing column {c!r}")
        rows = list(rd)
    if not rows:
        raise DataError(f"{path}: no sites")
    try:
        ids = [r["site_id"] for r in rows]
        ll = np.array([[float(r["lon"]), float(r["lat"])] for r in rows])
        elev = np.array([float(r["elev"]) for r in rows]) if "elev" in cols else None
    except ValueError as exc:
        raise DataError(f"{path}: {exc}") from exc
    if len(set(ids)) != len(ids):
        raise DataError(f"{path}: duplicate site ids")
    return ids, ll, elev


def read_dataset(dataset_path, sites_path):
    """Read the long-format dataset into an (N, T) matrix ordered as in the sites file.

    Returns ``(Y, site_ids, lonlat, elev)``; ``elev`` is None if absent.
    """
    ids, ll, elev = read_sites(sites_path)
    pos = {sid: i for i, sid in enumerate(ids)}
    ts, ii, ys = [], [], []
    with open(dataset_path, newline="", encoding="utf-8") as f:
        rd = csv.DictReader(f)
        for c in ("t", "site_id", "y"):
            if c not in (rd.fieldnames or []):
                raise DataError(f"{dataset_path}: missing column {c!r}")
        for r in rd:
            if r["site_id"] not in pos:
                raise DataError(f"{dataset_path}: unknown site {r['site_id']!r}")
            try:
                ts.append(int(r["t"]))
                ys.append(float(r["y"]))
            except ValueError as exc:
                raise DataError(f"{dataset_path}: {exc}") from exc
            ii.append(pos[r["site_id"]])
    if not ts:
        raise DataError(f"{dataset_path}: no observations")
    tvals = np.unique(ts)
    tpos = np.searchsorted(tvals, ts)
    Y = np.full((len(ids), tvals.size), np.nan)
    Y[ii, tpos] = ys
    if np.isnan(Y).any():
        raise DataError(f"{dataset_path}: incomplete site x replicate grid")
    return Y, ids, ll, elev


def read_regions(path, site_ids):
    """Site-to-region map (columns site_id, region) aligned to ``site_ids``."""
    with open(path, newline="", encoding="utf-8") as f:
        m = {r["site_id"]: r["region"] for r in csv.DictReader(f)}
    missing = [s for s in site_ids if s not in m]
    if missing:
        raise DataError(f"{path}: no region for sites {missing[:5]}")
    return np.array([m[s] for s in site_ids])


def sample_columns(samples):
    """Flatten a samples dict into ordered (name, 1-D array) pairs."""
    cols = []
    for name, v in samples.items():
        v = np.asarray(v)
        if v.ndim == 1:
            cols.append((name, v))
        else:
            cols.extend((f"{name}[{j}]", v[:, j]) for j in range(v.shape[1]))
    return cols


def write_samples(samples, iterations, path):
    """Long-format draws: iteration, parameter, value."""
    cols = sample_columns(samples)
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["iteration", "parameter", "value"])
        for k, it in enumerate(iterations):
            for name, v in cols:
                w.writerow([int(it), name, fmt(v[k])])


def read_samples(path):
    """Inverse of ``write_samples``; indexed names are regrouped into 2-D arrays."""
    iters, vals = [], {}
    with open(path, newline="", encoding="utf-8") as f:
        for r in csv.DictReader(f):
            it = int(r["iteration"])
            if not iters or iters[-1] != it:
                iters.append(it)
            vals.setdefault(r["parameter"], []).append(float(r["value"]))
    out, grouped = {}, {}
    for name, v in vals.items():
        if name.endswith("]") and "[" in name:
            base, j = name[:-1].split("[")
            grouped.setdefault(base, {})[int(j)] = v
        else:
            out[name] = np.asarray(v)
    for base, d in grouped.items():
        out[base] = np.column_stack([d[j] for j in sorted(d)])
    return out, np.asarray(iters)


class Manifest:
    """Run manifest: tool version, config snapshot, input hashes, seed and timings.

    Wall-clock information is kept apart from the reproducible fields.
    """

    def __init__(self, command, config, seed=None):
        self.command = command
        self.config = config
        self.seed = seed
        self.inputs = {}
        self.outputs = []
        self.timings = {}
        self._t0 = time.perf_counter()
        self._phase = None

    def add_input(self, path):
        self.inputs[os.path.basename(path)] = file_hash(path)

    def add_output(self, path):
        self.outputs.append(os.path.basename(path))

    def phase(self, name):
        now = time.perf_counter()
        if self._phase is not None:
            self.timings[self._phase] = now - self._pt
        self._phase, self._pt = name, now

    def write(self, path):
        self.phase(None)
        self.timings["total"] = time.perf_counter() - self._t0
        write_json(dict(tool="shot", version=TOOL_VERSION, command=self.command,
                        config=self.config, seed=self.seed, inputs=self.inputs,
                        outputs=self.outputs,
                        run=dict(timings=self.timings, python=platform.python_version(),
                                 finished=time.strftime("%Y-%m-%dT%H:%M:%S"))), path)
