"""The random-material plate problem as a level-sample generator for the MLMC engine."""

from __future__ import annotations

import threading
import time
from dataclasses import dataclass, field

import numpy as np

from .matmodel import FluctuationSampler, MeanElasticity, sampler_for
from .meshfem import MeshHierarchy, assemble_and_solve, extract_qoi
from .randfield import CovarianceKernel, FieldEvaluator, KleBasis, build_kle, draw

COST_MODELS = ("time", "dof")
DOF_UNIT_COST = 1e-6  # seconds per degree of freedom in the "dof" cost model

MLMC_STREAM = 0
MC_STREAM = 1


def sample_key(stream: int, level: int, index: int) -> int:
    """Global sample id; distinct (stream, level, index) never share a random stream."""
    return (int(stream) << 48) | (int(level) << 32) | int(index)


@dataclass(eq=False)
class ElasticityProblem:
    """Total displacement at the common nodes for random elasticity fields.

    ``evaluate(level, index)`` draws the KLE coefficients of sample ``index``
    once and solves on mesh ``level`` and, for coupled levels, on mesh
    ``level - 1`` with the same coefficients.
    """

    hierarchy: MeshHierarchy
    mean: MeanElasticity
    sampler: FluctuationSampler
    basis: KleBasis
    load_resultant: float = 1500.0
    master_seed: int = 0
    cost_model: str = "time"
    solve_count: int = field(default=0, init=False)

    def __post_init__(self):
        if self.cost_model not in COST_MODELS:
            raise ValueError(f"cost_model must be one of {COST_MODELS}, got {self.cost_model!r}")
        self._evaluators: dict[int, FieldEvaluator] = {}
        self._lock = threading.Lock()

    @classmethod
    def build(
        cls,
        hierarchy: MeshHierarchy,
        mean: MeanElasticity,
        delta_C: float,
        kernel: CovarianceKernel,
        kle_modes: int,
        **kwargs,
    ) -> "ElasticityProblem":
        basis = build_kle(kernel, hierarchy[hierarchy.L], kle_modes)
        return cls(hierarchy, mean, sampler_for(mean, delta_C), basis, **kwargs)

    @property
    def n_levels(self) -> int:
        return len(self.hierarchy)

    @property
    def n_nodes(self) -> int:
        return self.hierarchy.n_common

    @property
    def h(self) -> np.ndarray:
        return self.hierarchy.h

    def evaluator(self, level: int) -> FieldEvaluator:
        ev = self._evaluators.get(level)
        if ev is None:
            ev = self.basis.evaluator(self.hierarchy[level].gauss_points)
            with self._lock:
                self._evaluators[level] = ev
        return ev

    def material(self, level: int, xi: np.ndarray) -> np.ndarray:
        germs = self.evaluator(level)(xi)  # (n_gauss, 6)
        T = self.sampler.sample_T(germs)
        C = self.mean.Q.T @ T @ self.mean.Q
        return C.reshape(self.hierarchy[level].n_elements, 4, 3, 3)

    def solve(self, level: int, xi: np.ndarray) -> np.ndarray:
        field_ = assemble_and_solve(self.hierarchy[level], self.material(level, xi), self.load_resultant)
        with self._lock:
            self.solve_count += 1
        return extract_qoi(field_, self.hierarchy)

    def _dof_cost(self, level: int, coupled: bool) -> float:
        dofs = self.hierarchy[level].n_dofs + (self.hierarchy[level - 1].n_dofs if coupled else 0)
        return DOF_UNIT_COST * dofs

    def evaluate(self, level: int, index: int, stream: int = MLMC_STREAM, coupled: bool | None = None):
        """(fine QoI, coarse QoI or None, cost) for one sample."""
        coupled = level > 0 if coupled is None else coupled
        t0 = time.perf_counter()
        xi = draw(self.master_seed, sample_key(stream, level, index), self.basis.M).xi
        fine = self.solve(level, xi)
        coarse = self.solve(level - 1, xi) if coupled else None
        elapsed = time.perf_counter() - t0
        cost = elapsed if self.cost_model == "time" else self._dof_cost(level, coupled)
        return fine, coarse, cost


@dataclass(eq=False)
class DeterministicProblem:
    """Same interface with the mean material everywhere (zero-variance limit)."""

    hierarchy: MeshHierarchy
    mean: MeanElasticity
    load_resultant: float = 1500.0
    solve_count: int = field(default=0, init=False)

    @property
    def n_levels(self) -> int:
        return len(self.hierarchy)

    @property
    def n_nodes(self) -> int:
        return self.hierarchy.n_common

    @property
    def h(self) -> np.ndarray:
        return self.hierarchy.h

    def solve(self, level: int) -> np.ndarray:
        self.solve_count += 1
        f = assemble_and_solve(self.hierarchy[level], self.mean.C_bar, self.load_resultant)
        return extract_qoi(f, self.hierarchy)

    def evaluate(self, level: int, index: int, stream: int = MLMC_STREAM, coupled: bool | None = None):
        coupled = level > 0 if coupled is None else coupled
        fine = self.solve(level)
        coarse = self.solve(level - 1) if coupled else None
        dofs = self.hierarchy[level].n_dofs + (self.hierarchy[level - 1].n_dofs if coupled else 0)
        return fine, coarse, DOF_UNIT_COST * dofs
