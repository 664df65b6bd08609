"""Truncated Karhunen-Loeve expansion of Gaussian fields on a quad mesh.

One basis is built on a reference (finest) mesh and evaluated anywhere in the
domain by bilinear interpolation of its nodal eigenvectors, so the same
coefficients give the same realization on every level of a hierarchy.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
from scipy.spatial import cKDTree

from .errors import ExtrapolationError
from .meshfem import COORD_TOL, GAUSS_XI, Mesh2D, shape_derivatives, shape_functions

FIELD_COUNT = 6


@dataclass(frozen=True)
class CovarianceKernel:
    """Squared-exponential kernel ``variance * exp(-(dx/lx)^2 - (dy/ly)^2)``."""

    lx: float
    ly: float
    variance: float = 1.0

    def __post_init__(self):
        if not (self.lx > 0 and self.ly > 0):
            raise ValueError(f"correlation lengths must be positive, got lx={self.lx}, ly={self.ly}")
        if not self.variance > 0:
            raise ValueError(f"kernel variance must be positive, got {self.variance}")

    def __call__(self, p, q) -> np.ndarray:
        p, q = np.asarray(p, dtype=float), np.asarray(q, dtype=float)
        dx = (p[..., 0] - q[..., 0]) / self.lx
        dy = (p[..., 1] - q[..., 1]) / self.ly
        return self.variance * np.exp(-(dx * dx + dy * dy))

    def matrix(self, points: np.ndarray) -> np.ndarray:
        return self(points[:, None, :], points[None, :, :])


def lumped_mass(mesh: Mesh2D) -> np.ndarray:
    """Row-sum lumped mass weights: the integral of each nodal shape function."""
    g = mesh.geometry
    N = shape_functions(GAUSS_XI)  # (4g, 4n)
    contrib = np.einsum("gn,eg->en", N, g.wdet)
    return np.bincount(mesh.elements.ravel(), weights=contrib.ravel(), minlength=mesh.n_nodes)


def locate(mesh: Mesh2D, points: np.ndarray, tol: float = 1e-10, candidates: int = 8) -> sp.csr_matrix:
    """Sparse bilinear interpolation matrix (n_points, n_nodes) on ``mesh``.

    Points that coincide with a mesh node get weight exactly 1 on that node.
    Raises ``ExtrapolationError`` for points outside every element.
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    n_pts = len(points)
    cols = np.zeros((n_pts, 4), dtype=int)
    vals = np.zeros((n_pts, 4))
    done = np.zeros(n_pts, dtype=bool)

    dist, nearest = cKDTree(mesh.nodes).query(points)
    snap = dist <= COORD_TOL
    cols[snap, 0] = nearest[snap]
    vals[snap, 0] = 1.0
    done |= snap

    xy = mesh.nodes[mesh.elements]
    k = min(candidates, mesh.n_elements)
    _, cand = cKDTree(xy.mean(axis=1)).query(points, k=k)
    cand = cand.reshape(n_pts, k)
    for c in range(k):
        todo = np.flatnonzero(~done)
        if len(todo) == 0:
            break
        e = cand[todo, c]
        exy = xy[e]
        p = points[todo]
        xi = np.zeros((len(todo), 2))
        for _ in range(25):
            r = np.einsum("pn,pnc->pc", shape_functions(xi), exy) - p
            J = np.einsum("pan,pnb->pab", shape_derivatives(xi), exy)  # d x_b / d xi_a
            step = np.linalg.solve(np.swapaxes(J, 1, 2), r[..., None])[..., 0]
            xi -= step
            if np.abs(step).max() < 1e-14:
                break
        inside = np.all(np.abs(xi) <= 1.0 + tol, axis=1)
        hit = todo[inside]
        cols[hit] = mesh.elements[e[inside]]
        vals[hit] = shape_functions(np.clip(xi[inside], -1.0, 1.0))
        done[hit] = True
    if not done.all():
        i = int(np.flatnonzero(~done)[0])
        raise ExtrapolationError(
            f"point {i} at ({points[i, 0]:.12g}, {points[i, 1]:.12g}) lies outside the reference mesh"
        )
    rows = np.repeat(np.arange(n_pts), 4)
    P = sp.csr_matrix((vals.ravel(), (rows, cols.ravel())), shape=(n_pts, mesh.n_nodes))
    P.eliminate_zeros()
    return P


@dataclass(frozen=True, eq=False)
class KleBasis:
    eigenvalues: np.ndarray  # (M,) non-increasing
    modes: np.ndarray  # (n_nodes, M) nodal eigenfunction values, W-orthonormal
    mesh: Mesh2D
    weights: np.ndarray  # lumped mass weights of the reference mesh
    captured_fraction: float

    @property
    def M(self) -> int:
        return len(self.eigenvalues)

    def scaled_modes(self, points) -> np.ndarray:
        """(n_points, M) matrix of sqrt(lambda_k) * phi_k(x)."""
        P = locate(self.mesh, points)
        return np.ascontiguousarray(P @ (self.modes * np.sqrt(self.eigenvalues)))

    def evaluator(self, points) -> "FieldEvaluator":
        return FieldEvaluator(self.scaled_modes(points))

    def covariance(self, i, j) -> np.ndarray:
        """Truncated covariance between reference nodes ``i`` and ``j``."""
        return np.einsum("...k,...k,k->...", self.modes[i], self.modes[j], self.eigenvalues)


@dataclass(frozen=True, eq=False)
class FieldEvaluator:
    """KLE evaluation at a fixed point set.

    The per-point reduction over modes does not depend on which other points are
    in the set, so coordinate-identical points give bitwise-identical values.
    """

    values: np.ndarray  # (n_points, M)

    def __call__(self, xi: np.ndarray) -> np.ndarray:
        xi = np.asarray(xi, dtype=float)
        if xi.shape[-1] != self.values.shape[1]:
            raise ValueError(f"expected {self.values.shape[1]} coefficients, got {xi.shape[-1]}")
        if xi.ndim == 1:
            return np.einsum("pm,m->p", self.values, xi)
        return np.einsum("pm,km->pk", self.values, xi)


def build_kle(kernel: CovarianceKernel, reference_mesh: Mesh2D, M: int) -> KleBasis:
    """Top-``M`` eigenpairs of the mass-weighted (Nystrom) covariance operator."""
    n = reference_mesh.n_nodes
    if not 1 <= M <= n:
        raise ValueError(f"KLE order M={M} must be between 1 and the node count {n}")
    w = lumped_mass(reference_mesh)
    sw = np.sqrt(w)
    A = kernel.matrix(reference_mesh.nodes) * sw[:, None] * sw[None, :]
    A = 0.5 * (A + A.T)
    lam, V = sla.eigh(A, subset_by_index=[n - M, n - 1])
    lam, V = lam[::-1], V[:, ::-1]
    top = max(lam[0], 0.0)
    if lam.min() < -1e-8 * top:
        raise np.linalg.LinAlgError(
            f"covariance matrix is not positive semidefinite (eigenvalue {lam.min():.3g}, largest {top:.3g})"
        )
    lam = np.where(lam < 0.0, 0.0, lam)
    phi = V / sw[:, None]
    for k in range(M):
        col = phi[:, k]
        first = np.flatnonzero(np.abs(col) > 1e-8 * np.abs(col).max())[0]
        if col[first] < 0:
            phi[:, k] = -col
    trace = kernel.variance * w.sum()
    return KleBasis(
        eigenvalues=lam,
        modes=np.ascontiguousarray(phi),
        mesh=reference_mesh,
        weights=w,
        captured_fraction=float(lam.sum() / trace),
    )


def evaluate_field(basis: KleBasis, xi_row, points) -> np.ndarray:
    """g(x) = sum_k sqrt(lambda_k) phi_k(x) xi_k at each point."""
    xi_row = np.asarray(xi_row, dtype=float)
    if xi_row.shape != (basis.M,):
        raise ValueError(f"xi_row must have length {basis.M}, got shape {xi_row.shape}")
    return basis.evaluator(points)(xi_row)


@dataclass(frozen=True)
class GaussianDraw:
    xi: np.ndarray  # (FIELD_COUNT, M)
    sample_id: int
    seed_path: tuple[int, int]


def draw(master_seed: int, sample_id: int, M: int, field_count: int = FIELD_COUNT) -> GaussianDraw:
    """Standard normal KLE coefficients for one sample.

    Each (master_seed, sample_id) pair keys its own Philox stream, so samples can
    be generated in any order or in parallel.
    """
    ss = np.random.SeedSequence(int(master_seed), spawn_key=(int(sample_id),))
    rng = np.random.Generator(np.random.Philox(ss))
    return GaussianDraw(
        xi=rng.standard_normal((field_count, M)), sample_id=int(sample_id), seed_path=(int(master_seed), int(sample_id))
    )


# ---------------------------------------------------------------------------
# cache file: header (M, node count, captured_fraction), eigenvalues, row-major
# eigenvector block, all little-endian float64

def save_kle(basis: KleBasis, path) -> None:
    header = struct.pack("<3d", float(basis.M), float(basis.mesh.n_nodes), basis.captured_fraction)
    body = np.concatenate([basis.eigenvalues, basis.modes.ravel(order="C")]).astype("<f8").tobytes()
    Path(path).write_bytes(header + body)


def load_kle(path, reference_mesh: Mesh2D) -> KleBasis:
    raw = Path(path).read_bytes()
    M, n, captured = struct.unpack("<3d", raw[:24])
    M, n = int(M), int(n)
    if n != reference_mesh.n_nodes:
        raise ValueError(f"basis cache has {n} nodes but the reference mesh has {reference_mesh.n_nodes}")
    data = np.frombuffer(raw[24:], dtype="<f8")
    if len(data) != M + M * n:
        raise ValueError(f"basis cache {path} is truncated or corrupt")
    return KleBasis(
        eigenvalues=data[:M].copy(),
        modes=data[M:].reshape(n, M).copy(),
        mesh=reference_mesh,
        weights=lumped_mass(reference_mesh),
        captured_fraction=captured,
    )
