"""Random SPD elasticity-matrix field C(x) = Q^T T(x) Q with E[T] = I.

T is the maximum-entropy positive-definite ensemble built from an
upper-triangular Gaussian germ: off-diagonal entries are scaled normals, the
diagonal entries are square roots of Gamma variates obtained from the normals
through the probability integral transform.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
from scipy import special

from .errors import MaterialError
from .meshfem import orthotropic_plane_stress
from .randfield import GaussianDraw, KleBasis

N_DIM = 3
# germ ordering: upper triangle of a 3x3 matrix, row by row
GERM_INDEX = [(0, 0), (0, 1), (0, 2), (1, 1), (1, 2), (2, 2)]
DIAG_GERMS = [0, 3, 5]
OFFDIAG_GERMS = [1, 2, 4]


@dataclass(frozen=True)
class MeanElasticity:
    C_bar: np.ndarray
    Q: np.ndarray  # upper triangular, C_bar = Q^T Q

    @classmethod
    def from_matrix(cls, C_bar) -> "MeanElasticity":
        C = np.asarray(C_bar, dtype=float)
        if C.shape != (N_DIM, N_DIM):
            raise MaterialError(f"mean elasticity matrix must be 3x3, got {C.shape}")
        if np.abs(C - C.T).max() > 1e-12 * np.abs(C).max():
            raise MaterialError("mean elasticity matrix is not symmetric")
        try:
            Q = sla.cholesky(C, lower=False)
        except sla.LinAlgError:
            raise MaterialError("mean elasticity matrix is not positive definite") from None
        return cls(C_bar=C, Q=Q)

    @classmethod
    def orthotropic(cls, E1: float, E2: float, nu21: float, G12: float) -> "MeanElasticity":
        return cls.from_matrix(orthotropic_plane_stress(E1, E2, nu21, G12))


def trace_factor(C_bar) -> float:
    """[1 + (tr C)^2 / tr(C^2)]^(1/2); depends only on the spectrum shape of C."""
    C = np.asarray(C_bar, dtype=float)
    return float(np.sqrt(1.0 + np.trace(C) ** 2 / np.trace(C @ C)))


def delta_C_from_delta_T(delta_T: float, C_bar, n: int = N_DIM) -> float:
    return delta_T / np.sqrt(n + 1) * trace_factor(C_bar)


def delta_T_from_delta_C(delta_C: float, C_bar, n: int = N_DIM) -> float:
    """Dispersion of T that gives C = Q^T T Q the dispersion ``delta_C``."""
    if not 0.0 < delta_C < 1.0:
        raise MaterialError(f"delta_C must lie in (0, 1), got {delta_C}")
    delta_T = delta_C * np.sqrt(n + 1) / trace_factor(C_bar)
    if not 0.0 < delta_T < 1.0:
        raise MaterialError(f"calibration infeasible: delta_T = {delta_T} is outside (0, 1)")
    return float(delta_T)


def gamma_quantile(a, g) -> np.ndarray:
    """Gamma(a, 1) quantile of Phi(g), evaluated on the tail that keeps precision."""
    a, g = np.broadcast_arrays(np.asarray(a, dtype=float), np.asarray(g, dtype=float))
    out = np.empty(a.shape)
    lo = g <= 0.0
    out[lo] = special.gammaincinv(a[lo], special.ndtr(g[lo]))
    out[~lo] = special.gammainccinv(a[~lo], special.ndtr(-g[~lo]))
    return out


@dataclass(frozen=True)
class FluctuationSampler:
    delta_T: float
    n: int = N_DIM

    def __post_init__(self):
        if not 0.0 < self.delta_T < 1.0:
            raise MaterialError(f"delta_T must lie in (0, 1), got {self.delta_T}")
        if np.any(self.gamma_shape <= 0.0):
            raise MaterialError(f"delta_T = {self.delta_T} too large for n = {self.n}: non-positive Gamma shape")

    @property
    def sigma(self) -> float:
        return self.delta_T / np.sqrt(self.n + 1)

    @property
    def gamma_shape(self) -> np.ndarray:
        j = np.arange(1, self.n + 1)
        return (self.n + 1) / (2.0 * self.delta_T**2) + (1.0 - j) / 2.0

    @property
    def field_count(self) -> int:
        return self.n * (self.n + 1) // 2

    def factor(self, g) -> np.ndarray:
        """Upper-triangular L (..., 3, 3) from germs g (..., 6)."""
        g = np.asarray(g, dtype=float)
        if g.shape[-1] != self.field_count:
            raise ValueError(f"expected {self.field_count} germ values, got {g.shape[-1]}")
        if not np.all(np.isfinite(g)):
            raise MaterialError("non-finite Gaussian germ")
        s = self.sigma
        L = np.zeros(g.shape[:-1] + (N_DIM, N_DIM))
        for q in OFFDIAG_GERMS:
            j, k = GERM_INDEX[q]
            L[..., j, k] = s * g[..., q]
        for j, q in enumerate(DIAG_GERMS):
            L[..., j, j] = s * np.sqrt(2.0 * gamma_quantile(self.gamma_shape[j], g[..., q]))
        return L

    def sample_T(self, g) -> np.ndarray:
        L = self.factor(g)
        return np.swapaxes(L, -1, -2) @ L


def sample_T(sampler: FluctuationSampler, g) -> np.ndarray:
    return sampler.sample_T(g)


def sampler_for(mean: MeanElasticity, delta_C: float) -> FluctuationSampler:
    return FluctuationSampler(delta_T_from_delta_C(delta_C, mean.C_bar))


def C_from_germs(mean: MeanElasticity, sampler: FluctuationSampler, g) -> np.ndarray:
    T = sampler.sample_T(g)
    return mean.Q.T @ T @ mean.Q


def sample_C_field(
    mean: MeanElasticity, sampler: FluctuationSampler, basis: KleBasis, draw: GaussianDraw, points
) -> np.ndarray:
    """Elasticity matrices (n_points, 3, 3) of one realization at ``points``."""
    if draw.xi.shape != (sampler.field_count, basis.M):
        raise ValueError(f"draw must hold {sampler.field_count} x {basis.M} coefficients, got {draw.xi.shape}")
    germs = basis.evaluator(points)(draw.xi)  # (n_points, 6)
    return C_from_germs(mean, sampler, germs)


def dispersion(samples, mean) -> float:
    """sqrt(E||X - mean||_F^2) / ||mean||_F estimated from stacked samples (N, n, n)."""
    samples = np.asarray(samples)
    mean = np.asarray(mean)
    return float(np.sqrt(((samples - mean) ** 2).sum(axis=(-2, -1)).mean() / (mean**2).sum()))
