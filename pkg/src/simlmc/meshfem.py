"""Nested quadrilateral meshes and a bilinear plane-stress elasticity solver.

Conventions: coordinates in cm, forces in N, tractions in N/cm (unit thickness),
elasticity matrices in N/cm^2 in Voigt order (xx, yy, xy) with engineering shear
strain. Element nodes are counter-clockwise; local edge ``k`` joins local nodes
``k`` and ``(k + 1) % 4``.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
import scipy.sparse as sp
import scipy.linalg as sla
import scipy.sparse.linalg as spla
from scipy.sparse.csgraph import reverse_cuthill_mckee
from scipy.spatial import cKDTree

from .errors import MeshError, MeshFormatError, NestingError, MaterialError, SolverError

COORD_TOL = 1e-10
RESIDUAL_TOL = 1e-10

_G = 1.0 / np.sqrt(3.0)
# 2x2 Gauss points, same ordering as the element corners
GAUSS_XI = np.array([[-_G, -_G], [_G, -_G], [_G, _G], [-_G, _G]])
GAUSS_W = np.ones(4)
_CORNERS = np.array([[-1.0, -1.0], [1.0, -1.0], [1.0, 1.0], [-1.0, 1.0]])


def shape_functions(xi: np.ndarray) -> np.ndarray:
    """Bilinear shape functions at local points ``xi`` (..., 2) -> (..., 4)."""
    xi = np.asarray(xi, dtype=float)
    return 0.25 * (1.0 + xi[..., None, 0] * _CORNERS[:, 0]) * (1.0 + xi[..., None, 1] * _CORNERS[:, 1])


def shape_derivatives(xi: np.ndarray) -> np.ndarray:
    """Local derivatives (..., 2, 4): row 0 is d/dxi, row 1 is d/deta."""
    xi = np.asarray(xi, dtype=float)
    dxi = 0.25 * _CORNERS[:, 0] * (1.0 + xi[..., None, 1] * _CORNERS[:, 1])
    deta = 0.25 * _CORNERS[:, 1] * (1.0 + xi[..., None, 0] * _CORNERS[:, 0])
    return np.stack([dxi, deta], axis=-2)


@dataclass(frozen=True)
class ElementGeometry:
    """Per-element quantities at the 2x2 Gauss points that do not depend on material."""

    B: np.ndarray  # (M, 4, 3, 8) strain-displacement matrices
    wdet: np.ndarray  # (M, 4) Gauss weight times Jacobian determinant
    points: np.ndarray  # (M, 4, 2) physical Gauss point coordinates
    detJ: np.ndarray  # (M, 4)


@dataclass(frozen=True, eq=False)
class Mesh2D:
    level: int
    nodes: np.ndarray  # (N, 2)
    elements: np.ndarray  # (M, 4) int
    dirichlet: np.ndarray  # sorted node ids with u = 0
    neumann_edges: np.ndarray = field(default_factory=lambda: np.zeros((0, 2), dtype=int))  # (J, 2) [elem, edge]
    neumann_traction: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))  # (J, 2) N/cm

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def n_elements(self) -> int:
        return len(self.elements)

    @property
    def n_dofs(self) -> int:
        return 2 * len(self.nodes)

    @cached_property
    def element_dofs(self) -> np.ndarray:
        e = self.elements
        return np.stack([2 * e, 2 * e + 1], axis=-1).reshape(len(e), 8)

    @cached_property
    def geometry(self) -> ElementGeometry:
        xy = self.nodes[self.elements]  # (M, 4, 2)
        dN = shape_derivatives(GAUSS_XI)  # (4g, 2, 4)
        J = np.einsum("gan,enb->egab", dN, xy)  # (M, 4g, 2, 2)
        detJ = J[..., 0, 0] * J[..., 1, 1] - J[..., 0, 1] * J[..., 1, 0]
        Jinv = np.empty_like(J)
        Jinv[..., 0, 0] = J[..., 1, 1]
        Jinv[..., 1, 1] = J[..., 0, 0]
        Jinv[..., 0, 1] = -J[..., 0, 1]
        Jinv[..., 1, 0] = -J[..., 1, 0]
        Jinv /= detJ[..., None, None]
        dNdx = np.einsum("egab,gbn->egan", Jinv, dN)  # physical derivatives
        M = len(self.elements)
        B = np.zeros((M, 4, 3, 8))
        B[:, :, 0, 0::2] = dNdx[:, :, 0]
        B[:, :, 1, 1::2] = dNdx[:, :, 1]
        B[:, :, 2, 0::2] = dNdx[:, :, 1]
        B[:, :, 2, 1::2] = dNdx[:, :, 0]
        N = shape_functions(GAUSS_XI)  # (4g, 4)
        points = np.einsum("gn,enc->egc", N, xy)
        return ElementGeometry(B=B, wdet=detJ * GAUSS_W, points=points, detJ=detJ)

    @cached_property
    def sparsity(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """CSR pattern of the global stiffness and the slot of every element-matrix entry."""
        dofs = self.element_dofs
        rows = np.repeat(dofs, 8, axis=1).ravel()
        cols = np.tile(dofs, (1, 8)).ravel()
        key = rows * self.n_dofs + cols
        uniq, slot = np.unique(key, return_inverse=True)
        r, c = np.divmod(uniq, self.n_dofs)
        indptr = np.searchsorted(r, np.arange(self.n_dofs + 1))
        return indptr, c, slot.ravel()

    @cached_property
    def element_size(self) -> float:
        """Largest element edge length."""
        xy = self.nodes[self.elements]
        edges = np.roll(xy, -1, axis=1) - xy
        return float(np.sqrt((edges**2).sum(-1)).max())

    @property
    def gauss_points(self) -> np.ndarray:
        return self.geometry.points.reshape(-1, 2)

    def neumann_nodes(self) -> np.ndarray:
        if len(self.neumann_edges) == 0:
            return np.zeros(0, dtype=int)
        e, k = self.neumann_edges[:, 0], self.neumann_edges[:, 1]
        return np.unique(np.concatenate([self.elements[e, k], self.elements[e, (k + 1) % 4]]))

    def validate(self) -> None:
        n = len(self.nodes)
        if self.nodes.ndim != 2 or self.nodes.shape[1] != 2:
            raise MeshError("nodes must be an (N, 2) array")
        if self.elements.ndim != 2 or self.elements.shape[1] != 4:
            raise MeshError("elements must be an (M, 4) array")
        for i, conn in enumerate(self.elements):
            bad = [int(v) for v in conn if v < 0 or v >= n]
            if bad:
                raise MeshError(f"element {i} references node {bad[0]} outside 0..{n - 1}")
            if len(set(conn.tolist())) != 4:
                raise MeshError(f"element {i} has repeated node ids {conn.tolist()}")
        if len(self.elements):
            detJ = self.geometry.detJ
            if np.any(detJ <= 0.0):
                i = int(np.argwhere(detJ <= 0.0)[0, 0])
                raise MeshError(f"element {i} has non-positive Jacobian (clockwise or degenerate)")
        if np.any((self.dirichlet < 0) | (self.dirichlet >= n)):
            raise MeshError("dirichlet set references a node outside the mesh")
        if len(self.neumann_edges):
            e, k = self.neumann_edges[:, 0], self.neumann_edges[:, 1]
            if np.any((e < 0) | (e >= len(self.elements))):
                raise MeshError("neumann edge references an element outside the mesh")
            if np.any((k < 0) | (k > 3)):
                raise MeshError("neumann edge index must be in 0..3")
            shared = np.intersect1d(self.neumann_nodes(), self.dirichlet)
            if len(shared):
                raise MeshError(f"dirichlet and neumann boundaries overlap at node {int(shared[0])}")


@dataclass(frozen=True, eq=False)
class MeshHierarchy:
    meshes: list[Mesh2D]
    common_nodes: list[np.ndarray]  # common_nodes[l][i] = level-l id of level-0 node i

    @property
    def L(self) -> int:
        return len(self.meshes) - 1

    @property
    def h(self) -> np.ndarray:
        return np.array([m.element_size for m in self.meshes])

    @property
    def n_common(self) -> int:
        return self.meshes[0].n_nodes

    @property
    def common_coordinates(self) -> np.ndarray:
        return self.meshes[0].nodes

    def __getitem__(self, level: int) -> Mesh2D:
        return self.meshes[level]

    def __len__(self) -> int:
        return len(self.meshes)

    @classmethod
    def from_meshes(cls, meshes: list[Mesh2D]) -> "MeshHierarchy":
        for m in meshes:
            m.validate()
        return cls(meshes=list(meshes), common_nodes=[match_common_nodes(meshes[0], m) for m in meshes])


def match_common_nodes(coarse: Mesh2D, fine: Mesh2D, tol: float = COORD_TOL) -> np.ndarray:
    """Map every node of ``coarse`` to the coordinate-identical node of ``fine``."""
    dist, idx = cKDTree(fine.nodes).query(coarse.nodes)
    missing = np.flatnonzero(dist > tol)
    if len(missing):
        i = int(missing[0])
        x, y = coarse.nodes[i]
        raise NestingError(
            f"level-{coarse.level} node {i} at ({x:.12g}, {y:.12g}) has no counterpart on level {fine.level}"
        )
    return idx.astype(int)


def _plate_mesh(level: int, width: float, height: float, nx: int, ny: int) -> Mesh2D:
    # width * (i / nx) keeps nested coordinates bitwise identical across levels
    xs = width * (np.arange(nx + 1) / nx)
    ys = height * (np.arange(ny + 1) / ny)
    X, Y = np.meshgrid(xs, ys)
    nodes = np.column_stack([X.ravel(), Y.ravel()])
    i, j = np.meshgrid(np.arange(nx), np.arange(ny))
    n0 = (j * (nx + 1) + i).ravel()
    elements = np.column_stack([n0, n0 + 1, n0 + nx + 2, n0 + nx + 1])
    top = np.arange((ny - 1) * nx, ny * nx)
    return Mesh2D(
        level=level,
        nodes=nodes,
        elements=elements,
        dirichlet=np.arange(nx + 1),
        neumann_edges=np.column_stack([top, np.full(nx, 2)]),
        neumann_traction=np.tile([0.0, -1.0], (nx, 1)),
    )


def build_plate_hierarchy(
    width: float = 7.0, height: float = 21.7, nx0: int = 2, ny0: int = 6, L: int = 3
) -> MeshHierarchy:
    """Structured plate: clamped bottom edge, unit downward traction on the top edge.

    Level ``l`` has ``nx0 * 2**l`` by ``ny0 * 2**l`` elements.
    """
    if not (width > 0 and height > 0):
        raise MeshError(f"invalid geometry: width={width}, height={height} must be positive")
    if nx0 < 1 or ny0 < 1:
        raise MeshError(f"invalid geometry: nx0={nx0}, ny0={ny0} must be >= 1")
    if L < 0:
        raise MeshError(f"invalid number of levels L={L}")
    meshes = [_plate_mesh(l, width, height, nx0 * 2**l, ny0 * 2**l) for l in range(L + 1)]
    return MeshHierarchy.from_meshes(meshes)


# ---------------------------------------------------------------------------
# text format

def write_mesh(mesh: Mesh2D, path) -> None:
    lines = [f"nodes {mesh.n_nodes}"]
    lines += [f"{i} {x!r} {y!r}" for i, (x, y) in enumerate(mesh.nodes.tolist())]
    lines.append(f"elements {mesh.n_elements}")
    lines += [f"{i} " + " ".join(str(v) for v in conn) for i, conn in enumerate(mesh.elements.tolist())]
    lines.append(f"dirichlet {len(mesh.dirichlet)}")
    lines += [str(int(v)) for v in mesh.dirichlet]
    lines.append(f"neumann {len(mesh.neumann_edges)}")
    for (e, k), (tx, ty) in zip(mesh.neumann_edges.tolist(), mesh.neumann_traction.tolist()):
        lines.append(f"{e} {k} {tx!r} {ty!r}")
    Path(path).write_text("\n".join(lines) + "\n")


def write_mesh_hierarchy(hierarchy: MeshHierarchy, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for m in hierarchy.meshes:
        write_mesh(m, d / f"mesh_l{m.level}.txt")


class _LineReader:
    def __init__(self, path: Path):
        self.path = path
        self.rows = [
            (no, line.split()) for no, line in enumerate(path.read_text().splitlines(), start=1) if line.strip()
        ]
        self.pos = 0

    def next(self, what: str) -> tuple[int, list[str]]:
        if self.pos >= len(self.rows):
            last = self.rows[-1][0] if self.rows else 0
            raise MeshFormatError(self.path, last + 1, f"unexpected end of file, expected {what}")
        row = self.rows[self.pos]
        self.pos += 1
        return row

    def header(self, keyword: str) -> int:
        no, tok = self.next(f"'{keyword} <count>'")
        if len(tok) != 2 or tok[0] != keyword:
            raise MeshFormatError(self.path, no, f"expected '{keyword} <count>', got {' '.join(tok)!r}")
        return self.number(tok[1], int, no)

    def number(self, token: str, kind, no: int):
        try:
            return kind(token)
        except ValueError:
            raise MeshFormatError(self.path, no, f"cannot parse {token!r} as {kind.__name__}") from None

    def record(self, n_fields: int, kinds) -> tuple[int, list]:
        no, tok = self.next(f"{n_fields} fields")
        if len(tok) != n_fields:
            raise MeshFormatError(self.path, no, f"expected {n_fields} fields, got {len(tok)}")
        return no, [self.number(t, k, no) for t, k in zip(tok, kinds)]


def read_mesh(path, level: int = 0) -> Mesh2D:
    path = Path(path)
    r = _LineReader(path)
    n = r.header("nodes")
    nodes = np.zeros((n, 2))
    seen = np.zeros(n, dtype=bool)
    for _ in range(n):
        no, (i, x, y) = r.record(3, (int, float, float))
        if not 0 <= i < n or seen[i]:
            raise MeshFormatError(path, no, f"node id {i} out of range or duplicated")
        seen[i] = True
        nodes[i] = x, y
    m = r.header("elements")
    elements = np.zeros((m, 4), dtype=int)
    for _ in range(m):
        no, (i, *conn) = r.record(5, (int,) * 5)
        if not 0 <= i < m:
            raise MeshFormatError(path, no, f"element id {i} out of range")
        elements[i] = conn
    k = r.header("dirichlet")
    dirichlet = np.array([r.record(1, (int,))[1][0] for _ in range(k)], dtype=int)
    j = r.header("neumann")
    edges = np.zeros((j, 2), dtype=int)
    traction = np.zeros((j, 2))
    for q in range(j):
        _, (e, edge, tx, ty) = r.record(4, (int, int, float, float))
        edges[q] = e, edge
        traction[q] = tx, ty
    if r.pos < len(r.rows):
        raise MeshFormatError(path, r.rows[r.pos][0], "trailing content after neumann block")
    mesh = Mesh2D(level, nodes, elements, np.unique(dirichlet), edges, traction)
    try:
        mesh.validate()
    except MeshError as exc:
        raise MeshError(f"{path}: {exc}") from None
    return mesh


def load_mesh_hierarchy(directory) -> MeshHierarchy:
    """Read ``mesh_l0.txt``, ``mesh_l1.txt``, ... from ``directory`` and check nesting."""
    d = Path(directory)
    if not d.is_dir():
        raise FileNotFoundError(f"mesh directory not found: {d}")
    found = {}
    for p in d.iterdir():
        mt = re.fullmatch(r"mesh_l(\d+)\.txt", p.name)
        if mt:
            found[int(mt.group(1))] = p
    if not found:
        raise FileNotFoundError(f"no mesh_l<l>.txt files in {d}")
    levels = sorted(found)
    if levels != list(range(len(levels))):
        raise MeshError(f"mesh levels in {d} are not contiguous from 0: {levels}")
    return MeshHierarchy.from_meshes([read_mesh(found[l], level=l) for l in levels])


# ---------------------------------------------------------------------------
# elasticity

@dataclass(frozen=True)
class DisplacementField:
    level: int
    u: np.ndarray  # (N, 2) cm
    total: np.ndarray  # (N,) cm


def isotropic_plane_stress(E: float, nu: float) -> np.ndarray:
    c = E / (1.0 - nu**2)
    return c * np.array([[1.0, nu, 0.0], [nu, 1.0, 0.0], [0.0, 0.0, 0.5 * (1.0 - nu)]])


def orthotropic_plane_stress(E1: float, E2: float, nu21: float, G12: float) -> np.ndarray:
    """Plane-stress stiffness with axis 1 = x, axis 2 = y and nu21/E2 = nu12/E1."""
    nu12 = nu21 * E1 / E2
    S = np.array([[1.0 / E1, -nu21 / E2, 0.0], [-nu12 / E1, 1.0 / E2, 0.0], [0.0, 0.0, 1.0 / G12]])
    C = np.linalg.inv(S)
    return 0.5 * (C + C.T)


def check_material(C: np.ndarray) -> None:
    C = np.asarray(C)
    asym = np.abs(C - np.swapaxes(C, -1, -2)).max()
    if asym > 1e-12 * np.abs(C).max():
        raise MaterialError(f"elasticity matrix not symmetric (max asymmetry {asym:.3g})")
    lam = np.linalg.eigvalsh(C)
    if not np.all(np.isfinite(lam)) or lam.min() <= 0.0:
        raise MaterialError(f"elasticity matrix not positive definite (min eigenvalue {lam.min():.3g})")


def _material_at_gauss(mesh: Mesh2D, material) -> np.ndarray:
    C = np.asarray(material, dtype=float)
    if C.shape == (3, 3):
        C = np.broadcast_to(C, (mesh.n_elements, 4, 3, 3))
    elif C.shape == (mesh.n_elements * 4, 3, 3):
        C = C.reshape(mesh.n_elements, 4, 3, 3)
    if C.shape != (mesh.n_elements, 4, 3, 3):
        raise MaterialError(f"material must be given at all 2x2 Gauss points, got shape {C.shape}")
    return C


def element_stiffness(mesh: Mesh2D, material) -> np.ndarray:
    """Element matrices (M, 8, 8) integrated with 2x2 Gauss quadrature."""
    C = _material_at_gauss(mesh, material)
    check_material(C)
    g = mesh.geometry
    CB = (C * g.wdet[..., None, None]) @ g.B  # (M, 4, 3, 8)
    Bt = np.swapaxes(g.B, -1, -2)
    return (Bt @ CB).sum(axis=1)


def assemble_stiffness(mesh: Mesh2D, material) -> sp.csr_matrix:
    """Global stiffness for ``material`` given per Gauss point (M, 4, 3, 3) or as one 3x3 matrix."""
    Ke = element_stiffness(mesh, material)
    indptr, indices, slot = mesh.sparsity
    data = np.bincount(slot, weights=Ke.ravel(), minlength=len(indices))
    return sp.csr_matrix((data, indices, indptr), shape=(mesh.n_dofs, mesh.n_dofs))


def load_vector(mesh: Mesh2D, load_resultant: float | None = None) -> np.ndarray:
    """Consistent nodal forces of the piecewise-constant edge tractions.

    With ``load_resultant`` the tractions are rescaled so the magnitude of their
    resultant equals it.
    """
    F = np.zeros(mesh.n_dofs)
    if len(mesh.neumann_edges) == 0:
        return F
    e, k = mesh.neumann_edges[:, 0], mesh.neumann_edges[:, 1]
    a, b = mesh.elements[e, k], mesh.elements[e, (k + 1) % 4]
    length = np.linalg.norm(mesh.nodes[b] - mesh.nodes[a], axis=1)
    force = mesh.neumann_traction * length[:, None]
    if load_resultant is not None:
        total = np.linalg.norm(force.sum(axis=0))
        if total > 0.0:
            force = force * (load_resultant / total)
    for c in range(2):
        np.add.at(F, 2 * a + c, 0.5 * force[:, c])
        np.add.at(F, 2 * b + c, 0.5 * force[:, c])
    return F


def solve_system(
    K: sp.spmatrix, F: np.ndarray, fixed_dofs: np.ndarray, fixed_values: np.ndarray | None = None
) -> np.ndarray:
    """Solve K u = F with prescribed values on ``fixed_dofs`` by row/column elimination."""
    n = K.shape[0]
    fixed_dofs = np.asarray(fixed_dofs, dtype=int)
    if len(fixed_dofs) == 0:
        raise SolverError("no Dirichlet constraints: stiffness matrix is singular")
    u = np.zeros(n)
    if fixed_values is not None:
        u[fixed_dofs] = fixed_values
    free = np.setdiff1d(np.arange(n), fixed_dofs)
    K = K.tocsr()
    Kff = K[free][:, free].tocsc()
    rhs = F[free] - K[free][:, fixed_dofs] @ u[fixed_dofs]
    scale = np.linalg.norm(rhs)
    if scale == 0.0:
        return u
    try:
        uf = spla.splu(Kff).solve(rhs)
    except RuntimeError as exc:
        raise SolverError(f"factorization failed: {exc}") from None
    if not np.all(np.isfinite(uf)):
        raise SolverError("non-finite displacement solution")
    res = np.linalg.norm(Kff @ uf - rhs) / scale
    if res > RESIDUAL_TOL:
        raise SolverError(f"relative residual {res:.3g} exceeds {RESIDUAL_TOL:g}")
    u[free] = uf
    return u


def dirichlet_dofs(mesh: Mesh2D) -> np.ndarray:
    return np.sort(np.concatenate([2 * mesh.dirichlet, 2 * mesh.dirichlet + 1]))


@dataclass(frozen=True)
class _BandedPlan:
    """Maps CSR slots of the global stiffness into upper banded storage of the
    RCM-reordered free-dof block."""

    free: np.ndarray
    perm: np.ndarray
    bandwidth: int
    csr_slots: np.ndarray
    band_index: np.ndarray

    @classmethod
    def build(cls, mesh: Mesh2D) -> "_BandedPlan":
        fixed = dirichlet_dofs(mesh)
        if len(fixed) == 0:
            raise SolverError("no Dirichlet constraints: stiffness matrix is singular")
        free = np.setdiff1d(np.arange(mesh.n_dofs), fixed)
        indptr, indices, _ = mesh.sparsity
        rows = np.repeat(np.arange(mesh.n_dofs), np.diff(indptr))
        pos = np.full(mesh.n_dofs, -1)
        pos[free] = np.arange(len(free))
        pattern = sp.csr_matrix(
            (np.ones(len(indices)), indices, indptr), shape=(mesh.n_dofs, mesh.n_dofs)
        )[free][:, free]
        perm = reverse_cuthill_mckee(pattern.tocsr(), symmetric_mode=True)
        rank = np.empty_like(perm)
        rank[perm] = np.arange(len(perm))
        keep = (pos[rows] >= 0) & (pos[indices] >= 0)
        i, j = rank[pos[rows[keep]]], rank[pos[indices[keep]]]
        upper = i <= j
        slots = np.flatnonzero(keep)[upper]
        i, j = i[upper], j[upper]
        bw = int((j - i).max()) if len(i) else 0
        return cls(free, perm, bw, slots, (bw + i - j) * len(free) + j)

    def solve(self, K: sp.csr_matrix, F: np.ndarray) -> np.ndarray:
        n = len(self.free)
        ab = np.zeros((self.bandwidth + 1) * n)
        ab[self.band_index] = K.data[self.csr_slots]
        try:
            x = sla.solveh_banded(ab.reshape(self.bandwidth + 1, n), F[self.free][self.perm], check_finite=False)
        except np.linalg.LinAlgError as exc:
            raise SolverError(f"stiffness matrix not positive definite: {exc}") from None
        u = np.zeros(len(F))
        u[self.free[self.perm]] = x
        return u


def _banded_plan(mesh: Mesh2D) -> _BandedPlan:
    plan = mesh.__dict__.get("_banded_plan")
    if plan is None:
        plan = _BandedPlan.build(mesh)
        mesh.__dict__["_banded_plan"] = plan
    return plan


def assemble_and_solve(mesh: Mesh2D, material, load_resultant: float | None = None) -> DisplacementField:
    """Solve the clamped problem (u = 0 on the Dirichlet nodes) for one material realization.

    Uses a banded Cholesky factorization of the RCM-reordered free-dof block and
    checks the relative residual against ``RESIDUAL_TOL``.
    """
    if len(mesh.dirichlet) == 0:
        raise SolverError("no Dirichlet constraints: stiffness matrix is singular")
    K = assemble_stiffness(mesh, material)
    F = load_vector(mesh, load_resultant)
    plan = _banded_plan(mesh)
    Ff = F[plan.free]
    scale = np.linalg.norm(Ff)
    if scale == 0.0:
        u = np.zeros(mesh.n_dofs)
    else:
        u = plan.solve(K, F)
        if not np.all(np.isfinite(u)):
            raise SolverError("non-finite displacement solution")
        res = np.linalg.norm((K @ u)[plan.free] - Ff) / scale
        if res > RESIDUAL_TOL:
            raise SolverError(f"relative residual {res:.3g} exceeds {RESIDUAL_TOL:g}")
    u = u.reshape(-1, 2)
    return DisplacementField(level=mesh.level, u=u, total=np.sqrt((u**2).sum(axis=1)))


def extract_qoi(field: DisplacementField, hierarchy: MeshHierarchy) -> np.ndarray:
    """Total displacement at the level-0 nodes, ordered by level-0 node id."""
    if not 0 <= field.level <= hierarchy.L:
        raise ValueError(f"field level {field.level} not in hierarchy levels 0..{hierarchy.L}")
    if len(field.total) != hierarchy[field.level].n_nodes:
        raise ValueError(
            f"field has {len(field.total)} nodes but level {field.level} mesh has {hierarchy[field.level].n_nodes}"
        )
    return field.total[hierarchy.common_nodes[field.level]]
