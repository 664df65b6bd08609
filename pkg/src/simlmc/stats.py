"""Unbiased moment estimators (h-statistics) from mergeable power sums.

Every estimator here is a U-statistic: a polynomial in population moments is
expanded into products of raw moments, and each product over distinct sample
indices is estimated by its augmented symmetric function divided by the falling
factorial of n. The result is the unique symmetric unbiased estimator, e.g. h2,
h4 and the polyache for sigma^4.

Level accumulators store bivariate power sums of the level difference
d = u_l - u_{l-1} and the level sum s = u_l + u_{l-1}. In these coordinates the
variance correction h2(u_l) - h2(u_{l-1}) is the sample covariance of (d, s),
which avoids subtracting two nearly equal fourth-moment quantities when the
levels are tightly coupled.
"""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass
from functools import lru_cache
from math import comb, factorial, prod

import numpy as np

from .errors import InsufficientSamplesError

log = logging.getLogger(__name__)

MAX_ORDER = 4
Part = tuple[int, int]
Poly = dict[tuple[Part, ...], float]


# ---------------------------------------------------------------------------
# U-statistic engine

@lru_cache(maxsize=None)
def _set_partitions(k: int) -> tuple[tuple[tuple[int, ...], ...], ...]:
    if k == 0:
        return ((),)
    out = []
    for part in _set_partitions(k - 1):
        for i in range(len(part)):
            out.append(part[:i] + (part[i] + (k - 1,),) + part[i + 1 :])
        out.append(part + ((k - 1,),))
    return tuple(out)


def augmented_sum(parts: tuple[Part, ...], S):
    """Sum over distinct ordered index tuples of prod_j x_{i_j}^{a_j} y_{i_j}^{b_j}.

    ``S(a, b)`` returns the power sum sum_i x_i^a y_i^b. Uses Moebius inversion
    over set partitions.
    """
    total = 0.0
    for partition in _set_partitions(len(parts)):
        coef = prod((-1) ** (len(B) - 1) * factorial(len(B) - 1) for B in partition)
        term = coef
        for B in partition:
            term = term * S(sum(parts[i][0] for i in B), sum(parts[i][1] for i in B))
        total = total + term
    return total


def falling(n: int, k: int) -> int:
    return prod(range(n - k + 1, n + 1))


def central(a: int, b: int = 0) -> Poly:
    """E[(X - EX)^a (Y - EY)^b] as a polynomial in raw moments."""
    poly: Counter = Counter()
    for i in range(a + 1):
        for j in range(b + 1):
            parts = ([(i, j)] if i or j else []) + [(1, 0)] * (a - i) + [(0, 1)] * (b - j)
            poly[tuple(sorted(parts))] += comb(a, i) * comb(b, j) * (-1) ** (a - i + b - j)
    return {k: v for k, v in poly.items() if v}


def poly_mul(p: Poly, q: Poly) -> Poly:
    out: Counter = Counter()
    for kp, vp in p.items():
        for kq, vq in q.items():
            out[tuple(sorted(kp + kq))] += vp * vq
    return {k: v for k, v in out.items() if v}


def poly_degree(p: Poly) -> int:
    return max((len(k) for k in p), default=0)


def ustat(poly: Poly, S, n: int):
    """Unbiased estimate of ``poly`` from power sums ``S`` of ``n`` samples."""
    k = poly_degree(poly)
    if n < max(k, 1):
        raise InsufficientSamplesError(f"estimator needs at least {k} samples, got n={n}")
    total = 0.0
    for parts, coef in poly.items():
        if parts:
            total = total + coef * augmented_sum(parts, S) / falling(n, len(parts))
        else:
            total = total + coef
    return total


MU2 = central(2)
MU4 = central(4)
SIGMA4 = poly_mul(central(2), central(2))
MU11 = central(1, 1)
MU22 = central(2, 2)
MU20_MU02 = poly_mul(central(2, 0), central(0, 2))
MU11_SQ = poly_mul(MU11, MU11)


def power_sums(x, y=None, order: int = MAX_ORDER) -> dict[Part, float]:
    x = np.asarray(x, dtype=float)
    y = np.zeros_like(x) if y is None else np.asarray(y, dtype=float)
    return {(a, b): float(np.sum(x**a * y**b)) for a in range(order + 1) for b in range(order + 1 - a)}


def _lookup(sums):
    return lambda a, b: sums[(a, b)]


# ---------------------------------------------------------------------------
# closed forms

def h2(s1, s2, n: int):
    """Unbiased sample variance from S1 = sum x, S2 = sum x^2."""
    if n < 2:
        raise InsufficientSamplesError(f"h2 needs at least 2 samples, got n={n}")
    return (s2 - s1 * s1 / n) / (n - 1)


def _clamp(value, name: str):
    v = np.asarray(value, dtype=float)
    if np.any(v < 0.0):
        log.warning("clamping %d negative %s estimate(s) to 0 (min %.3g)", int(np.sum(v < 0.0)), name, v.min())
        v = np.where(v < 0.0, 0.0, v)
    return v if v.ndim else float(v)


def var_of_h2(m2, m4, n: int, m2_sq=None, clamp: bool = True):
    """Var(h2) = mu4/n - sigma^4 (n-3)/(n(n-1)).

    ``m2_sq`` is an estimate of sigma^4; by default ``m2**2``. Pass the polyache
    h_{2,2} to make the plug-in unbiased.
    """
    if n < 4:
        raise InsufficientSamplesError(f"variance of h2 needs at least 4 samples, got n={n}")
    s4 = np.asarray(m2) ** 2 if m2_sq is None else m2_sq
    v = m4 / n - s4 * (n - 3) / (n * (n - 1))
    return _clamp(v, "Var(h2)") if clamp else v


def cov_of_h2_pair(m22, m20_m02, m11_sq, n: int):
    """Cov(h2(X), h2(Y)) = (mu22 - sx^2 sy^2)/n + 2 sxy^2/(n(n-1)) for paired samples."""
    if n < 4:
        raise InsufficientSamplesError(f"covariance of h2 needs at least 4 samples, got n={n}")
    return (m22 - m20_m02) / n + 2.0 * m11_sq / (n * (n - 1))


def var_of_cov(m22, m20_m02, m11_sq, n: int, clamp: bool = True):
    """Variance of the unbiased sample covariance of paired samples."""
    if n < 4:
        raise InsufficientSamplesError(f"variance of the sample covariance needs at least 4 samples, got n={n}")
    v = m22 / n - (n - 2) * m11_sq / (n * (n - 1)) + m20_m02 / (n * (n - 1))
    return _clamp(v, "Var(cov)") if clamp else v


def h_moments(sums, n: int) -> dict[str, float]:
    """Unbiased estimates of the moments entering the h2 (co)variance formulas."""
    S = _lookup(sums)
    return {
        "h2x": ustat(MU2, S, n),
        "h2y": ustat(central(0, 2), S, n),
        "h4x": ustat(MU4, S, n),
        "h4y": ustat(central(0, 4), S, n),
        "h22x": ustat(SIGMA4, S, n),
        "h22y": ustat(poly_mul(central(0, 2), central(0, 2)), S, n),
        "m11": ustat(MU11, S, n),
        "m22": ustat(MU22, S, n),
        "m20_m02": ustat(MU20_MU02, S, n),
        "m11_sq": ustat(MU11_SQ, S, n),
    }


def var_of_h2_difference(sums, n: int):
    """Unbiased estimate of Var(h2(X) - h2(Y)) for paired samples with power sums ``sums``."""
    m = h_moments(sums, n)
    vx = m["h4x"] / n - m["h22x"] * (n - 3) / (n * (n - 1))
    vy = m["h4y"] / n - m["h22y"] * (n - 3) / (n * (n - 1))
    return vx + vy - 2.0 * cov_of_h2_pair(m["m22"], m["m20_m02"], m["m11_sq"], n)


# ---------------------------------------------------------------------------
# level accumulator

def _shifted(P: np.ndarray, dd, ds) -> np.ndarray:
    """Power sums of (D - dd, S - ds) from those of (D, S)."""
    out = np.zeros_like(P)
    for a in range(MAX_ORDER + 1):
        for b in range(MAX_ORDER + 1 - a):
            acc = 0.0
            for i in range(a + 1):
                for j in range(b + 1):
                    acc = acc + comb(a, i) * comb(b, j) * (-dd) ** (a - i) * (-ds) ** (b - j) * P[i, j]
            out[a, b] = acc
    return out


def _rotated(P: np.ndarray) -> np.ndarray:
    """Power sums of (x, y) = ((S + D)/2, (S - D)/2) from those of (D, S)."""
    out = np.zeros_like(P)
    for a in range(MAX_ORDER + 1):
        for b in range(MAX_ORDER + 1 - a):
            # ((S + D)/2)^a ((S - D)/2)^b expanded in D^p S^q
            acc = 0.0
            for i in range(a + 1):
                for j in range(b + 1):
                    p = i + j
                    acc = acc + comb(a, i) * comb(b, j) * (-1) ** j * P[p, a + b - p]
            out[a, b] = acc / 2 ** (a + b)
    return out


def _two_sum(s, t, comp):
    new = s + t
    comp += np.where(np.abs(s) >= np.abs(t), (s - new) + t, (t - new) + s)
    return new


@dataclass(frozen=True)
class NodeStats:
    """Per-node level statistics; all arrays have one entry per common node."""

    n: int
    mean_Y: np.ndarray  # mean of u_l - u_{l-1}
    V_l: np.ndarray  # h2(u_l - u_{l-1})
    Z_l: np.ndarray  # h2(u_l) - h2(u_{l-1})
    V_l2: np.ndarray  # n * Var(Z_l estimator)
    mean_fine: np.ndarray
    h2_fine: np.ndarray
    V2_fine: np.ndarray  # n * Var(h2(u_l) estimator)
    cost: float  # average cost per sample


class LevelAccumulator:
    """Power sums of (d, s) = (u_l - u_{l-1}, u_l + u_{l-1}) up to total order 4 per node.

    At level 0 there is no coarse solution and d = s = u_0. Sums are taken about
    per-node shifts (the first sample unless given) with compensated addition.
    """

    def __init__(self, n_nodes: int, coupled: bool, shift: tuple[np.ndarray, np.ndarray] | None = None):
        self.n_nodes = int(n_nodes)
        self.coupled = bool(coupled)
        self.n = 0
        self.cost_sum = 0.0
        self.P = np.zeros((MAX_ORDER + 1, MAX_ORDER + 1, self.n_nodes))
        self.comp = np.zeros_like(self.P)
        self.shift = None if shift is None else (np.array(shift[0], dtype=float), np.array(shift[1], dtype=float))

    def empty_like(self) -> "LevelAccumulator":
        return LevelAccumulator(self.n_nodes, self.coupled, self.shift)

    def copy(self) -> "LevelAccumulator":
        out = self.empty_like()
        out.n, out.cost_sum = self.n, self.cost_sum
        out.P, out.comp = self.P.copy(), self.comp.copy()
        return out

    def _ds(self, fine, coarse):
        fine = np.atleast_2d(np.asarray(fine, dtype=float))
        if fine.shape[-1] != self.n_nodes:
            raise ValueError(f"fine QoI has {fine.shape[-1]} nodes, accumulator expects {self.n_nodes}")
        if coarse is None:
            if self.coupled:
                raise ValueError("coupled level requires a coarse QoI vector")
            return fine, fine
        if not self.coupled:
            raise ValueError("level-0 accumulator takes no coarse QoI")
        coarse = np.atleast_2d(np.asarray(coarse, dtype=float))
        if coarse.shape != fine.shape:
            raise ValueError(f"coarse QoI shape {coarse.shape} does not match fine shape {fine.shape}")
        return fine - coarse, fine + coarse

    def accumulate(self, fine, coarse=None, cost: float = 0.0) -> "LevelAccumulator":
        """Add one sample (vectors) or a batch (rows) of samples."""
        d, s = self._ds(fine, coarse)
        if self.shift is None:
            self.shift = (d[0].copy(), s[0].copy())
        D, S = d - self.shift[0], s - self.shift[1]
        for a in range(MAX_ORDER + 1):
            for b in range(MAX_ORDER + 1 - a):
                t = np.sum(D**a * S**b, axis=0)
                self.P[a, b] = _two_sum(self.P[a, b], t, self.comp[a, b])
        self.n += len(d)
        self.cost_sum += float(cost)
        return self

    def merge(self, other: "LevelAccumulator") -> "LevelAccumulator":
        """Combine with another accumulator of the same level into a new one."""
        if other.n_nodes != self.n_nodes or other.coupled != self.coupled:
            raise ValueError("cannot merge accumulators of different shape or level type")
        if self.n == 0:
            return other.copy()
        if other.n == 0:
            return self.copy()
        out = self.copy()
        P, comp = other.P, other.comp
        if not (np.array_equal(self.shift[0], other.shift[0]) and np.array_equal(self.shift[1], other.shift[1])):
            P = _shifted(other.sums, self.shift[0] - other.shift[0], self.shift[1] - other.shift[1])
            comp = np.zeros_like(P)
        for a in range(MAX_ORDER + 1):
            for b in range(MAX_ORDER + 1 - a):
                out.P[a, b] = _two_sum(out.P[a, b], P[a, b], out.comp[a, b])
        out.comp += comp
        out.n += other.n
        out.cost_sum += other.cost_sum
        return out

    @property
    def sums(self) -> np.ndarray:
        return self.P + self.comp

    def stats(self, clamp: bool = True) -> NodeStats:
        n = self.n
        if n == 0:
            raise InsufficientSamplesError("no samples accumulated")
        P = self.sums
        nan = np.full(self.n_nodes, np.nan)
        cd, cs = self.shift
        ds_sums = lambda a, b: P[a, b]
        R = _rotated(P)
        xy_sums = lambda a, b: R[a, b]
        cx = 0.5 * (cs + cd)
        mean_Y = cd + P[1, 0] / n
        mean_fine = cx + R[1, 0] / n
        if n >= 2:
            V_l = _clamp(ustat(MU2, ds_sums, n), "V_l")
            Z_l = ustat(MU11, ds_sums, n)
            h2_fine = _clamp(ustat(MU2, xy_sums, n), "h2")
        else:
            V_l = Z_l = h2_fine = nan
        if n >= 4:
            V_l2 = n * var_of_cov(
                ustat(MU22, ds_sums, n), ustat(MU20_MU02, ds_sums, n), ustat(MU11_SQ, ds_sums, n), n, clamp=clamp
            )
            V2_fine = n * var_of_h2(None, ustat(MU4, xy_sums, n), n, m2_sq=ustat(SIGMA4, xy_sums, n), clamp=clamp)
        else:
            V_l2 = V2_fine = nan
        return NodeStats(
            n=n,
            mean_Y=mean_Y,
            V_l=V_l,
            Z_l=Z_l,
            V_l2=V_l2,
            mean_fine=mean_fine,
            h2_fine=h2_fine,
            V2_fine=V2_fine,
            cost=self.cost_sum / n,
        )


def accumulate(acc: LevelAccumulator, fine, coarse=None, cost: float = 0.0) -> LevelAccumulator:
    return acc.accumulate(fine, coarse, cost)
