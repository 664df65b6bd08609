"""Fast self-checks of the numerical building blocks, shared by ``simlmc validate`` and the tests.

Each check returns a ``CheckResult``; none of them raises on a numerical
mismatch, so a caller can report every failure at once.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from . import meshfem, stats
from .matmodel import MeanElasticity, delta_C_from_delta_T, delta_T_from_delta_C, sampler_for


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    value: float
    tolerance: float

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name}: {self.value:.3e} (tolerance {self.tolerance:.1e})"


def _result(name, value, tol) -> CheckResult:
    return CheckResult(name, bool(value <= tol), float(value), float(tol))


def distorted_patch() -> meshfem.Mesh2D:
    """Four quads around an off-centre interior node of the unit square."""
    xs = [0.0, 0.5, 1.0]
    nodes = np.array([(x, y) for y in xs for x in xs])
    nodes[4] = (0.62, 0.41)
    nodes[1] = (0.45, 0.0)
    nodes[5] = (1.0, 0.57)
    elements = np.array([[0, 1, 4, 3], [1, 2, 5, 4], [3, 4, 7, 6], [4, 5, 8, 7]])
    boundary = np.array([0, 1, 2, 3, 5, 6, 7, 8])
    return meshfem.Mesh2D(level=0, nodes=nodes, elements=elements, dirichlet=boundary)


def patch_test(tol: float = 1e-10) -> CheckResult:
    """Linear boundary displacement on a distorted patch is reproduced exactly inside."""
    mesh = distorted_patch()
    C = meshfem.isotropic_plane_stress(2.1e6, 0.3)
    grad = np.array([[1.0e-3, 2.0e-4], [-3.0e-4, 5.0e-4]])
    exact = np.array([2.0e-3, -1.0e-3]) + mesh.nodes @ grad.T
    K = meshfem.assemble_stiffness(mesh, C)
    fixed = np.column_stack([2 * mesh.dirichlet, 2 * mesh.dirichlet + 1]).ravel()
    u = meshfem.solve_system(K, np.zeros(mesh.n_dofs), fixed, exact.ravel()[fixed])
    err = np.abs(u - exact.ravel()).max() / np.abs(exact).max()
    return _result("patch test", err, tol)


def uniaxial_test(tol: float = 1e-8) -> CheckResult:
    """Plate under uniform top pressure on rollers: u_y(top) = -p H / E."""
    E, nu, p = 1.0e6, 0.3, 100.0
    hierarchy = meshfem.build_plate_hierarchy(L=1)
    mesh = hierarchy[1]
    width, height = mesh.nodes.max(axis=0)
    K = meshfem.assemble_stiffness(mesh, meshfem.isotropic_plane_stress(E, nu))
    F = meshfem.load_vector(mesh, load_resultant=p * width)
    bottom = mesh.dirichlet
    fixed = np.concatenate([2 * bottom + 1, [2 * bottom[0]]])
    u = meshfem.solve_system(K, F, fixed)
    top = np.flatnonzero(np.abs(mesh.nodes[:, 1] - height) < meshfem.COORD_TOL)
    expected = -p * height / E
    err = np.abs(u[2 * top + 1] - expected).max() / abs(expected)
    return _result("uniaxial plate", err, tol)


def spd_sampling(mean: MeanElasticity, delta_C: float, n: int = 2000, seed: int = 0) -> CheckResult:
    sampler = sampler_for(mean, delta_C)
    g = np.random.default_rng(seed).standard_normal((n, sampler.field_count))
    C = mean.Q.T @ sampler.sample_T(g) @ mean.Q
    bad = np.count_nonzero(np.linalg.eigvalsh(C).min(axis=1) <= 0.0)
    return _result("SPD realizations", bad, 0)


def dispersion_round_trip(mean: MeanElasticity, delta_C: float, tol: float = 1e-14) -> CheckResult:
    back = delta_C_from_delta_T(delta_T_from_delta_C(delta_C, mean.C_bar), mean.C_bar)
    return _result("dispersion round trip", abs(back - delta_C) / delta_C, tol)


def enumeration_oracle(tol: float = 1e-12) -> CheckResult:
    """Average h2 over all size-3 draws from {0, 1, 2} equals the population variance."""
    values = [stats.h2(sum(s), sum(v * v for v in s), 3) for s in itertools.product((0, 1, 2), repeat=3)]
    return _result("h2 enumeration", abs(np.mean(values) - 2.0 / 3.0), tol)


def run_all(mean: MeanElasticity, delta_C: float) -> list[CheckResult]:
    return [
        patch_test(),
        uniaxial_test(),
        spd_sampling(mean, delta_C),
        dispersion_round_trip(mean, delta_C),
        enumeration_oracle(),
    ]
