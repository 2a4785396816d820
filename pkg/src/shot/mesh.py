"""Triangulated meshes, finite-element matrices and the SPDE precision operator.

The Gaussian component of the model is a Matern field with smoothness 1,
approximated on a triangulation by piecewise-linear hat functions.  With the
lumped mass matrix ``D`` and stiffness matrix ``G1`` the precision of the node
weights is::

    Q = psi**2 / (4 pi) * (psi**-4 D + 2 psi**-2 G1 + G1 D^-1 G1)
      = psi**2 / (4 pi) * M D^-1 M,          M = psi**-2 D + G1

The second form is used for all numerics: ``M`` is sparse and symmetric
positive definite with the same pattern as ``G1``, so a single sparse LU of
``M`` gives exact samples, solves and log-determinants for ``Q``.
"""

import csv
import os
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import (GeometryError, MeshLoadError, NumericError,
                     OutOfDomainError, ParameterError, SizeError)

FOUR_PI = 4.0 * np.pi

__all__ = [
    "TriMesh", "FemMatrices", "SpdeOperator", "build_rect_mesh", "load_mesh",
    "save_mesh", "fem_matrices", "precision_matrix", "projection_matrix",
    "implied_covariance", "write_coo", "read_coo", "splu_spd",
]


def splu_spd(M):
    """Sparse LU of a symmetric positive-definite matrix.

    Uses a symmetric fill-reducing ordering with diagonal pivoting so that the
    factor is (up to the diagonal scaling in ``U``) a Cholesky factor.
    """
    try:
        return spla.splu(sp.csc_matrix(M), permc_spec="MMD_AT_PLUS_A",
                         diag_pivot_thresh=0.0,
                         options=dict(SymmetricMode=True))
    except RuntimeError as exc:  # singular factor
        raise NumericError(f"sparse factorization failed: {exc}") from exc


def _logdet_from_lu(lu):
    d = lu.U.diagonal()
    if np.any(d <= 0) or not np.all(np.isfinite(d)):
        raise NumericError("matrix is not positive definite")
    return float(np.sum(np.log(d)))


@dataclass
class TriMesh:
    """A conforming planar triangulation.

    Attributes
    ----------
    vertices : (n, 2) array
        Node coordinates (the mesh-node set).
    triangles : (m, 3) int array
        Vertex indices, stored counter-clockwise after validation.
    extension : float
        Width by which the mesh extends beyond the data domain.
    """

    vertices: np.ndarray
    triangles: np.ndarray
    extension: float = 0.0

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=float).reshape(-1, 2)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        self.validate()

    @property
    def n_vertices(self):
        return self.vertices.shape[0]

    @property
    def n_triangles(self):
        return self.triangles.shape[0]

    def signed_areas(self):
        p = self.vertices[self.triangles]
        e1 = p[:, 1] - p[:, 0]
        e2 = p[:, 2] - p[:, 0]
        return 0.5 * (e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])

    @property
    def area(self):
        return float(np.abs(self.signed_areas()).sum())

    def validate(self):
        """Check indices, orient triangles counter-clockwise and check conformity."""
        n = self.n_vertices
        tri = self.triangles
        if tri.size == 0:
            raise GeometryError("mesh has no triangles")
        if tri.min() < 0 or tri.max() >= n:
            bad = int(np.nonzero((tri < 0) | (tri >= n))[0][0])
            raise GeometryError(f"triangle {bad} references a vertex index out of range")
        if np.any((tri[:, 0] == tri[:, 1]) | (tri[:, 1] == tri[:, 2])
                  | (tri[:, 0] == tri[:, 2])):
            raise GeometryError("triangle with repeated vertex index")
        areas = self.signed_areas()
        span = np.ptp(self.vertices, axis=0).max() if n > 1 else 1.0
        tol = 1e-12 * max(span, 1e-300) ** 2
        if np.any(np.abs(areas) <= tol):
            bad = int(np.nonzero(np.abs(areas) <= tol)[0][0])
            raise GeometryError(f"triangle {bad} is degenerate (zero area)")
        flip = areas < 0
        if np.any(flip):
            tri = tri.copy()
            tri[flip, 1], tri[flip, 2] = tri[flip, 2].copy(), tri[flip, 1].copy()
            self.triangles = tri
        edges = np.sort(np.concatenate([tri[:, [0, 1]], tri[:, [1, 2]],
                                        tri[:, [2, 0]]]), axis=1)
        _, counts = np.unique(edges, axis=0, return_counts=True)
        if np.any(counts > 2):
            raise GeometryError("nonconforming mesh: an edge is shared by more than two triangles")
        return self


def build_rect_mesh(bounding_box, target_edge_length, extension=0.0):
    """Structured right-triangle mesh over an (optionally extended) rectangle.

    Parameters
    ----------
    bounding_box : (xmin, ymin, xmax, ymax)
    target_edge_length : float
        Upper bound on the grid spacing in each direction.
    extension : float
        The box is enlarged by this amount on every side.
    """
    xmin, ymin, xmax, ymax = map(float, bounding_box)
    if not target_edge_length > 0:
        raise ParameterError("target_edge_length must be positive")
    if extension < 0:
        raise ParameterError("extension must be non-negative")
    if not (xmax > xmin and ymax > ymin):
        raise GeometryError("degenerate bounding box (zero width or height)")
    xmin, ymin = xmin - extension, ymin - extension
    xmax, ymax = xmax + extension, ymax + extension
    nx = max(1, int(np.ceil((xmax - xmin) / target_edge_length - 1e-9)))
    ny = max(1, int(np.ceil((ymax - ymin) / target_edge_length - 1e-9)))
    xs = np.linspace(xmin, xmax, nx + 1)
    ys = np.linspace(ymin, ymax, ny + 1)
    gx, gy = np.meshgrid(xs, ys)
    vertices = np.column_stack([gx.ravel(), gy.ravel()])
    idx = np.arange((nx + 1) * (ny + 1)).reshape(ny + 1, nx + 1)
    v00 = idx[:-1, :-1].ravel()
    v10 = idx[:-1, 1:].ravel()
    v01 = idx[1:, :-1].ravel()
    v11 = idx[1:, 1:].ravel()
    lower = np.column_stack([v00, v10, v11])
    upper = np.column_stack([v00, v11, v01])
    triangles = np.empty((2 * v00.size, 3), dtype=np.int64)
    triangles[0::2] = lower
    triangles[1::2] = upper
    return TriMesh(vertices, triangles, extension=float(extension))


def save_mesh(mesh, directory):
    """Write ``vertices.csv`` and ``triangles.csv`` into ``directory``."""
    os.makedirs(directory, exist_ok=True)
    with open(os.path.join(directory, "vertices.csv"), "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["id", "x", "y"])
        for i, (x, y) in enumerate(mesh.vertices):
            w.writerow([i, repr(float(x)), repr(float(y))])
    with open(os.path.join(directory, "triangles.csv"), "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["id", "v1", "v2", "v3"])
        for i, (a, b, c) in enumerate(mesh.triangles):
            w.writerow([i, int(a), int(b), int(c)])


def _read_table(path, columns, dtype):
    try:
        with open(path, newline="", encoding="utf-8") as f:
            reader = csv.DictReader(f)
            if reader.fieldnames is None or any(c not in reader.fieldnames for c in columns):
                raise MeshLoadError(f"{path}: header must contain {','.join(columns)}")
            rows = [[dtype(row[c]) for c in columns] for row in reader]
    except FileNotFoundError as exc:
        raise MeshLoadError(f"{path}: file not found") from exc
    except (TypeError, ValueError) as exc:
        raise MeshLoadError(f"{path}: could not parse ({exc})") from exc
    rows.sort(key=lambda r: r[0])
    ids = [int(r[0]) for r in rows]
    if ids != list(range(len(ids))):
        raise MeshLoadError(f"{path}: ids must be 0..n-1")
    return np.array([r[1:] for r in rows], dtype=float if dtype is float else np.int64)


def load_mesh(path):
    """Read a mesh from a directory holding ``vertices.csv`` and ``triangles.csv``."""
    vertices = _read_table(os.path.join(path, "vertices.csv"), ["id", "x", "y"], float)
    triangles = _read_table(os.path.join(path, "triangles.csv"), ["id", "v1", "v2", "v3"], int)
    try:
        return TriMesh(vertices, triangles)
    except GeometryError as exc:
        raise MeshLoadError(f"{path}: {exc}") from exc


@dataclass
class FemMatrices:
    D: sp.csc_matrix
    G1: sp.csc_matrix
    G2: sp.csc_matrix

    @property
    def n(self):
        return self.D.shape[0]


def fem_matrices(mesh):
    """Lumped mass matrix ``D``, stiffness ``G1`` and ``G2 = G1 D^-1 G1``."""
    tri = mesh.triangles
    p = mesh.vertices[tri]                       # (m, 3, 2)
    area = np.abs(mesh.signed_areas())
    # gradients of the barycentric coordinates: rotate the opposite edge
    e = np.stack([p[:, 2] - p[:, 1], p[:, 0] - p[:, 2], p[:, 1] - p[:, 0]], axis=1)
    grad = np.stack([-e[..., 1], e[..., 0]], axis=-1) / (2.0 * area[:, None, None])
    local = area[:, None, None] * np.einsum("tik,tjk->tij", grad, grad)
    rows = np.repeat(tri, 3, axis=1).ravel()
    cols = np.tile(tri, (1, 3)).ravel()
    n = mesh.n_vertices
    G1 = sp.coo_matrix((local.ravel(), (rows, cols)), shape=(n, n)).tocsc()
    G1 = 0.5 * (G1 + G1.T)
    d = np.bincount(tri.ravel(), weights=np.repeat(area / 3.0, 3), minlength=n)
    if np.any(d <= 0):
        raise GeometryError("mesh has vertices not attached to any triangle")
    D = sp.diags(d).tocsc()
    G2 = (G1 @ sp.diags(1.0 / d) @ G1).tocsc()
    G2 = 0.5 * (G2 + G2.T)
    return FemMatrices(D=D, G1=G1.tocsc(), G2=G2.tocsc())


def precision_matrix(fem, psi):
    """SPDE precision for range ``psi`` (smoothness fixed to 1)."""
    if not psi > 0:
        raise ParameterError("psi must be positive")
    Q = psi ** 2 / FOUR_PI * (fem.D / psi ** 4 + 2.0 * fem.G1 / psi ** 2 + fem.G2)
    return sp.csc_matrix(Q)


def projection_matrix(mesh, sites, chunk=512):
    """Sparse matrix of hat-function values at ``sites`` (barycentric weights)."""
    sites = np.asarray(sites, dtype=float).reshape(-1, 2)
    p = mesh.vertices[mesh.triangles]
    v0 = p[:, 0]
    E = np.stack([p[:, 1] - v0, p[:, 2] - v0], axis=-1)   # (m, 2, 2) columns e1, e2
    det = E[:, 0, 0] * E[:, 1, 1] - E[:, 0, 1] * E[:, 1, 0]
    inv = np.empty_like(E)
    inv[:, 0, 0] = E[:, 1, 1] / det
    inv[:, 0, 1] = -E[:, 0, 1] / det
    inv[:, 1, 0] = -E[:, 1, 0] / det
    inv[:, 1, 1] = E[:, 0, 0] / det
    lo = p.min(axis=1)
    hi = p.max(axis=1)
    span = np.ptp(mesh.vertices, axis=0).max()
    tol = 1e-10
    rows, cols, vals = [], [], []
    for start in range(0, sites.shape[0], chunk):
        s = sites[start:start + chunk]
        pad = tol * span
        cand = np.all((s[:, None, :] >= lo[None] - pad) & (s[:, None, :] <= hi[None] + pad), axis=2)
        d = s[:, None, :] - v0[None]                                   # (c, m, 2)
        lam = np.einsum("mij,cmj->cmi", inv, d)                         # (c, m, 2)
        bary = np.concatenate([1.0 - lam.sum(axis=2, keepdims=True), lam], axis=2)
        inside = cand & np.all(bary >= -tol, axis=2)
        found = inside.any(axis=1)
        if not np.all(found):
            i = int(np.nonzero(~found)[0][0])
            raise OutOfDomainError(start + i, s[i])
        t = np.argmax(inside, axis=1)                                   # lowest index
        w = np.clip(bary[np.arange(s.shape[0]), t], 0.0, None)
        w /= w.sum(axis=1, keepdims=True)
        rows.append(np.repeat(np.arange(start, start + s.shape[0]), 3))
        cols.append(mesh.triangles[t].ravel())
        vals.append(w.ravel())
    A = sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                      shape=(sites.shape[0], mesh.n_vertices)).tocsr()
    A.eliminate_zeros()
    return A


class SpdeOperator:
    """GMRF on the mesh plus its projection to the observation sites.

    Holds a sparse factorization of ``M = psi**-2 D + G1`` which serves every
    computation involving ``Q``.

    Parameters
    ----------
    fem : FemMatrices
    A : sparse (N, N*) projection matrix
    psi : float
        Correlation range.
    r : float
        Ratio of spatial to total variance (the rest is nugget).
    """

    nu = 1

    def __init__(self, fem, A, psi, r=1.0):
        if not psi > 0:
            raise ParameterError("psi must be positive")
        if not 0.0 <= r <= 1.0:
            raise ParameterError("r must lie in [0, 1]")
        self.fem = fem
        self.A = sp.csr_matrix(A)
        self.psi = float(psi)
        self.r = float(r)
        self._d = fem.D.diagonal()
        self.M = sp.csc_matrix(fem.D / self.psi ** 2 + fem.G1)
        self._lu = splu_spd(self.M)
        self._Q = None
        self._site_cov = None

    @property
    def n_nodes(self):
        return self.fem.n

    @property
    def n_sites(self):
        return self.A.shape[0]

    @property
    def Q(self):
        if self._Q is None:
            self._Q = precision_matrix(self.fem, self.psi)
        return self._Q

    def with_params(self, psi=None, r=None):
        """Operator with updated range and/or variance ratio; reuses the factor if psi is unchanged."""
        psi = self.psi if psi is None else float(psi)
        r = self.r if r is None else float(r)
        if psi == self.psi:
            new = object.__new__(SpdeOperator)
            new.__dict__.update(self.__dict__)
            if not 0.0 <= r <= 1.0:
                raise ParameterError("r must lie in [0, 1]")
            new.r = r
            return new
        return SpdeOperator(self.fem, self.A, psi, r)

    def logdet_Q(self):
        n = self.n_nodes
        return (n * np.log(self.psi ** 2 / FOUR_PI) + 2.0 * _logdet_from_lu(self._lu)
                - float(np.sum(np.log(self._d))))

    def solve_Q(self, b):
        """``Q^-1 b``."""
        b = np.asarray(b, dtype=float)
        x = self._lu.solve(b)
        x = self._lu.solve(self._d.reshape((-1,) + (1,) * (x.ndim - 1)) * x)
        return FOUR_PI / self.psi ** 2 * x

    def sqrt_Q_T(self, z):
        """``H' z`` for the square-root factor ``Q = H'H``, ``H = psi/sqrt(4pi) D^-1/2 M``."""
        z = np.asarray(z, dtype=float)
        scale = 1.0 / np.sqrt(self._d).reshape((-1,) + (1,) * (z.ndim - 1))
        return self.psi / np.sqrt(FOUR_PI) * (self.M @ (scale * z))

    def sample_prior(self, z):
        """Map standard normals ``z`` (N* x ...) to draws from ``N(0, Q^-1)``."""
        z = np.asarray(z, dtype=float)
        scale = np.sqrt(self._d).reshape((-1,) + (1,) * (z.ndim - 1))
        return np.sqrt(FOUR_PI) / self.psi * self._lu.solve(scale * z)

    def site_covariance(self):
        """Dense ``A Q^-1 A'`` (N x N), cached."""
        if self._site_cov is None:
            if self.n_sites > 5000:
                raise SizeError("site covariance requested for more than 5000 sites")
            V = self._lu.solve(self.A.T.toarray())
            C = FOUR_PI / self.psi ** 2 * (V.T @ (self._d[:, None] * V))
            self._site_cov = 0.5 * (C + C.T)
        return self._site_cov

    def site_correlation(self):
        """Correlation matrix of the GMRF-plus-nugget field at the sites."""
        S = self.r * self.site_covariance() + (1.0 - self.r) * np.eye(self.n_sites)
        sd = np.sqrt(np.diag(S))
        return S / np.outer(sd, sd)

    def conditional_precision(self, c):
        """``Q + c A'A``."""
        return sp.csc_matrix(self.Q + c * (self.A.T @ self.A))


def implied_covariance(op, guard=2000):
    """Dense covariance ``r A Q^-1 A' + (1-r) I`` of the field at the sites."""
    if op.n_sites > guard:
        raise SizeError(f"{op.n_sites} sites exceeds the dense-output guard of {guard}")
    return op.r * op.site_covariance() + (1.0 - op.r) * np.eye(op.n_sites)


def write_coo(matrix, path):
    """Write a matrix as ``row,col,value`` text."""
    m = sp.coo_matrix(matrix)
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["row", "col", "value"])
        for i, j, v in zip(m.row, m.col, m.data):
            w.writerow([int(i), int(j), repr(float(v))])


def read_coo(path, shape=None):
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    if data.size == 0:
        return sp.csr_matrix(shape)
    return sp.coo_matrix((data[:, 2], (data[:, 0].astype(int), data[:, 1].astype(int))),
                         shape=shape).tocsr()
