from dataclasses import dataclass, field

import numpy as np
import pytest

from simlmc.matmodel import MeanElasticity
from simlmc.meshfem import build_plate_hierarchy

ORTHOTROPIC_MEAN = dict(E1=12000e2, E2=20000e2, nu21=0.371, G12=5610e2)


@dataclass(eq=False)
class SyntheticProblem:
    """Cheap stand-in for the plate: u_l(x) = s * (m(x) + a(x) xi_0 + h_l^2 b(x) xi_1 + h_l^2 c xi_2^2).

    Level differences shrink like h_l^2 and the cost grows 4x per level.
    """

    n_levels: int = 4
    n_nodes: int = 5
    scale: float = 1.0
    seed: int = 7
    solve_count: int = field(default=0, init=False)

    def __post_init__(self):
        rng = np.random.default_rng(1234)
        self.m = 1.0 + rng.random(self.n_nodes)
        self.a = 0.2 + 0.1 * rng.random(self.n_nodes)
        self.b = 0.5 * rng.random(self.n_nodes)
        self.h = 0.5 ** np.arange(1, self.n_levels + 1)

    def qoi(self, level, xi):
        h2 = self.h[level] ** 2
        self.solve_count += 1
        return self.scale * (self.m + self.a * xi[0] + h2 * self.b * xi[1] + h2 * 0.3 * xi[2] ** 2)

    def evaluate(self, level, index, stream=0, coupled=None):
        coupled = level > 0 if coupled is None else coupled
        ss = np.random.SeedSequence(self.seed, spawn_key=(stream, level, index))
        xi = np.random.default_rng(ss).standard_normal(3)
        fine = self.qoi(level, xi)
        coarse = self.qoi(level - 1, xi) if coupled else None
        cost = 4.0**level + (4.0 ** (level - 1) if coupled else 0.0)
        return fine, coarse, cost


@pytest.fixture
def synthetic():
    return SyntheticProblem()


@pytest.fixture(scope="session")
def ortho_mean():
    return MeanElasticity.orthotropic(**ORTHOTROPIC_MEAN)


@pytest.fixture(scope="session")
def plate():
    return build_plate_hierarchy()
