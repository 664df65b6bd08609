"""Scale-invariant multilevel Monte Carlo for the mean and variance of a nodal QoI.

Sampling errors are controlled through normalized MSEs

    e_s  = max_x sum_l V_l(x)   / N_l / kappa^2
    e_vs = max_x sum_l V_l2(x)  / N_l / kappa_v^2

with one normalization constant per estimand over the whole set of common
nodes. Two normalizations are available:

``"t"`` (default)
    kappa^2 = max_x h2(u_L)(x) and kappa_v^2 = max_x V2(u_L)(x), the per-sample
    variances of the mean and h2 estimators of the finest-level QoI, taken from
    the fine samples of the finest level in the run.
    For single-level MC this makes e_s = 1/N: the squared reciprocal t-statistic.
``"magnitude"``
    kappa = max_x |mu_ML(x)| and kappa_v = max_x h2_ML(x), a squared
    coefficient of variation of the estimates.

Both are invariant under rescaling the QoI.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Protocol

import numpy as np

from .errors import ConvergenceError, FitError, InsufficientSamplesError, NormalizationError
from .stats import LevelAccumulator, NodeStats

log = logging.getLogger(__name__)

MODES = ("mean", "variance", "both")
NORMALIZATIONS = ("t", "magnitude")
MLMC_STREAM = 0
MC_STREAM = 1


class Problem(Protocol):
    n_levels: int
    n_nodes: int
    h: np.ndarray

    def evaluate(self, level: int, index: int, stream: int = 0, coupled: bool | None = None): ...


@dataclass(frozen=True)
class Targets:
    eps_s_sq_half: float
    eps_vs_sq_half: float
    level_max: int

    def __post_init__(self):
        if not (self.eps_s_sq_half > 0 and self.eps_vs_sq_half > 0):
            raise ValueError("targets must be positive")
        if self.level_max < 0:
            raise ValueError("level_max must be >= 0")


# ---------------------------------------------------------------------------
# rates

def regime(beta: float, gamma: float) -> str:
    """Cost-complexity regime of the MLMC theorem."""
    if beta > gamma:
        return "first scenario"
    if beta == gamma:
        return "second scenario"
    return "third scenario"


def loglog_fit(h, y) -> tuple[float, float]:
    """Least-squares fit y = c * h**rate on the positive, finite points."""
    h, y = np.asarray(h, dtype=float), np.asarray(y, dtype=float)
    ok = np.isfinite(y) & (y > 0) & np.isfinite(h) & (h > 0)
    if ok.sum() < 2:
        raise FitError(f"need at least 2 positive points for a log-log fit, got {int(ok.sum())}")
    rate, logc = np.polyfit(np.log(h[ok]), np.log(y[ok]), 1)
    return float(rate), float(np.exp(logc))


@dataclass(frozen=True)
class RatesFit:
    alpha: float
    beta: float
    gamma: float
    alpha_v: float
    beta_v: float
    c2: float
    c3: float
    c6: float
    c8: float
    c9: float

    @property
    def alpha_condition(self) -> bool:
        return self.alpha >= 0.5 * min(self.beta, self.gamma)

    @property
    def alpha_v_condition(self) -> bool:
        return self.alpha_v >= 0.5 * min(self.beta_v, self.gamma)

    @property
    def regime(self) -> str:
        return regime(self.beta, self.gamma)

    @property
    def regime_v(self) -> str:
        return regime(self.beta_v, self.gamma)

    def as_dict(self) -> dict:
        return {
            "alpha": self.alpha, "beta": self.beta, "gamma": self.gamma,
            "alpha_v": self.alpha_v, "beta_v": self.beta_v,
            "c2": self.c2, "c3": self.c3, "c6": self.c6, "c8": self.c8, "c9": self.c9,
            "alpha_condition": self.alpha_condition, "alpha_v_condition": self.alpha_v_condition,
            "regime": self.regime, "regime_v": self.regime_v,
        }


def fit_rates(mean_Y, V, Z, V2, h, C) -> RatesFit:
    """Fit the decay/growth model to per-level scalars (index = level).

    Decay fits use levels >= 1 only; the cost fit uses every level.
    """
    h = np.asarray(h, dtype=float)
    if len(h) < 3:
        raise FitError("rate fitting needs at least two levels with l >= 1")
    fine = slice(1, None)
    alpha, c8 = loglog_fit(h[fine], np.abs(np.asarray(mean_Y, dtype=float)[fine]))
    beta, c2 = loglog_fit(h[fine], np.asarray(V, dtype=float)[fine])
    alpha_v, c9 = loglog_fit(h[fine], np.abs(np.asarray(Z, dtype=float)[fine]))
    beta_v, c6 = loglog_fit(h[fine], np.asarray(V2, dtype=float)[fine])
    neg_gamma, c3 = loglog_fit(h, np.asarray(C, dtype=float))
    return RatesFit(alpha, beta, -neg_gamma, alpha_v, beta_v, c2, c3, c6, c8, c9)


@dataclass(frozen=True)
class LevelSummary:
    """Max-over-common-nodes level quantities, as plotted in a screening test."""

    mean_Y: np.ndarray
    V_l: np.ndarray
    Z_l: np.ndarray
    V_l2: np.ndarray
    C_l: np.ndarray
    mean_u: np.ndarray
    h2_u: np.ndarray
    V2_u: np.ndarray


def summarize(stats: list[NodeStats]) -> LevelSummary:
    def mx(values):
        return np.array([np.nanmax(np.abs(v)) for v in values])

    return LevelSummary(
        mean_Y=mx([s.mean_Y for s in stats]),
        V_l=mx([s.V_l for s in stats]),
        Z_l=mx([s.Z_l for s in stats]),
        V_l2=mx([s.V_l2 for s in stats]),
        C_l=np.array([s.cost for s in stats]),
        mean_u=mx([s.mean_fine for s in stats]),
        h2_u=mx([s.h2_fine for s in stats]),
        V2_u=mx([s.V2_fine for s in stats]),
    )


def fit_summary(summary: LevelSummary, h) -> RatesFit:
    return fit_rates(summary.mean_Y, summary.V_l, summary.Z_l, summary.V_l2, h, summary.C_l)


# ---------------------------------------------------------------------------
# errors and allocation

def _per_node(values, N) -> np.ndarray:
    values = np.asarray(values, dtype=float)
    N = np.asarray(N, dtype=float)
    if np.any(N < 1):
        raise InsufficientSamplesError("every level needs at least one sample")
    if values.ndim == 1:
        values = values[:, None]
    return (values / N[:, None]).sum(axis=0)


def absolute_mse(values, N) -> float:
    """max over nodes of sum_l values_l(x) / N_l."""
    return float(np.max(_per_node(values, N)))


def normalized_mse_mean(V, N, kappa: float) -> float:
    if not kappa > 0:
        raise NormalizationError(f"normalization constant kappa={kappa} must be positive")
    return absolute_mse(V, N) / kappa**2


def normalized_mse_variance(V2, N, kappa_v: float) -> float:
    if not kappa_v > 0:
        raise NormalizationError(f"normalization constant kappa_v={kappa_v} must be positive")
    return absolute_mse(V2, N) / kappa_v**2


@dataclass(frozen=True)
class AllocationPlan:
    N: np.ndarray
    predicted_cost: float
    estimand: str = "mean"


def _lagrange(W: np.ndarray, C: np.ndarray, target: float) -> np.ndarray:
    root = np.sqrt(W * C[:, None]).sum(axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        N = np.sqrt(W / C[:, None]) * root / target
    return np.nan_to_num(N)


def allocate(W, C, target: float, min_samples: int = 2, estimand: str = "mean") -> AllocationPlan:
    """Cost-optimal N_l with sum_l W_l / N_l <= target.

    ``W`` is (levels,) or (levels, nodes); with nodes each node is allocated
    separately and the per-level maximum is taken, so the bound holds at every node.
    """
    W = np.asarray(W, dtype=float)
    C = np.asarray(C, dtype=float)
    if W.ndim == 1:
        W = W[:, None]
    if np.any(W < 0) or np.any(C <= 0) or not target > 0:
        raise ValueError("allocation needs W >= 0, C > 0 and target > 0")
    N = np.ceil(_lagrange(W, C, target)).max(axis=1)
    N = np.maximum(N, min_samples).astype(int)
    return AllocationPlan(N=N, predicted_cost=float(N @ C), estimand=estimand)


# ---------------------------------------------------------------------------
# sampling

class CachedProblem:
    """Memoizes samples so runs at several targets reuse identical draws."""

    def __init__(self, problem):
        self.problem = problem
        self._cache: dict = {}

    def __getattr__(self, name):
        return getattr(self.problem, name)

    def evaluate(self, level: int, index: int, stream: int = MLMC_STREAM, coupled: bool | None = None):
        key = (level, index, stream, coupled)
        hit = self._cache.get(key)
        if hit is None:
            hit = self.problem.evaluate(level, index, stream=stream, coupled=coupled)
            self._cache[key] = hit
        return hit


@dataclass(frozen=True)
class _LevelSpec:
    mesh_level: int
    coupled: bool


def _extend(problem, spec: _LevelSpec, acc: LevelAccumulator, n_total: int, stream: int, threads: int):
    indices = range(acc.n, n_total)
    if len(indices) == 0:
        return

    def one(i):
        return problem.evaluate(spec.mesh_level, i, stream=stream, coupled=spec.coupled)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(one, indices))
    else:
        results = [one(i) for i in indices]
    fine = np.array([r[0] for r in results])
    coarse = np.array([r[1] for r in results]) if spec.coupled else None
    acc.accumulate(fine, coarse, cost=sum(r[2] for r in results))


@dataclass
class ScreeningResult:
    accumulators: list[LevelAccumulator]
    h: np.ndarray
    n_solves: int

    @property
    def stats(self) -> list[NodeStats]:
        return [a.stats() for a in self.accumulators]

    @property
    def summary(self) -> LevelSummary:
        return summarize(self.stats)

    @property
    def costs(self) -> np.ndarray:
        return np.array([s.cost for s in self.stats])

    def rates(self) -> RatesFit:
        return fit_summary(self.summary, self.h)


def _specs(problem) -> list[_LevelSpec]:
    return [_LevelSpec(l, l > 0) for l in range(problem.n_levels)]


def screening(problem, n_screen: int = 50, threads: int = 1, stream: int = MLMC_STREAM) -> ScreeningResult:
    """``n_screen`` coupled samples on every level (single solves on level 0)."""
    if n_screen < 4:
        raise InsufficientSamplesError(f"screening needs n_screen >= 4, got {n_screen}")
    before = getattr(problem, "solve_count", 0)
    accs = []
    for spec in _specs(problem):
        acc = LevelAccumulator(problem.n_nodes, spec.coupled)
        _extend(problem, spec, acc, n_screen, stream, threads)
        accs.append(acc)
    return ScreeningResult(accs, np.asarray(problem.h, dtype=float), getattr(problem, "solve_count", 0) - before)


# ---------------------------------------------------------------------------
# adaptive runs

@dataclass
class RunReport:
    method: str
    mode: str
    targets: Targets
    levels: list[int]
    N: np.ndarray
    mean: np.ndarray
    variance: np.ndarray
    e_s: float
    e_vs: float
    abs_mse_mean: float
    abs_mse_var: float
    kappa: float
    kappa_v: float
    cost: float
    normalization: str
    iterations: int
    converged: bool
    history: list[np.ndarray] = field(default_factory=list)
    stats: list[NodeStats] = field(default_factory=list)
    reused_screening: bool = False

    @property
    def total_samples(self) -> int:
        return int(np.sum(self.N))

    def standard_error_mean(self) -> np.ndarray:
        V = np.array([s.V_l for s in self.stats])
        return np.sqrt(_per_node(V, self.N))

    def diagnostics(self) -> dict:
        return {
            "method": self.method,
            "mode": self.mode,
            "converged": self.converged,
            "iterations": self.iterations,
            "N": self.N.tolist(),
            "history": [h.tolist() for h in self.history],
            "e_s": self.e_s,
            "e_vs": self.e_vs,
            "targets": [self.targets.eps_s_sq_half, self.targets.eps_vs_sq_half],
            "kappa": self.kappa,
            "kappa_v": self.kappa_v,
        }


def normalization_constants(stats: list[NodeStats], normalization: str = "t") -> tuple[float, float]:
    if normalization == "t":
        finest = stats[-1]
        kappa_sq = float(np.nanmax(finest.h2_fine))
        kappa_v_sq = float(np.nanmax(finest.V2_fine)) if finest.n >= 4 else float("nan")
        return np.sqrt(kappa_sq), np.sqrt(kappa_v_sq)
    if normalization == "magnitude":
        mean = np.sum([s.mean_Y for s in stats], axis=0)
        var = np.sum([s.Z_l for s in stats], axis=0)
        return float(np.max(np.abs(mean))), float(np.max(var))
    raise ValueError(f"normalization must be one of {NORMALIZATIONS}, got {normalization!r}")


def _normalize(values, kappa: float, name: str):
    """values / kappa^2, where an all-zero error needs no normalization (zero-variance limit)."""
    values = np.asarray(values, dtype=float)
    if np.all(values == 0.0):
        return np.zeros_like(values)
    if not kappa > 0:
        raise NormalizationError(f"{name} normalization constant is {kappa}")
    return values / kappa**2


def _min_samples(mode: str) -> int:
    return 2 if mode == "mean" else 4


def _report(method, mode, targets, specs, accs, normalization, iterations, converged, history, reused):
    stats = [a.stats() for a in accs]
    N = np.array([a.n for a in accs])
    kappa, kappa_v = normalization_constants(stats, normalization)
    V = np.array([s.V_l for s in stats])
    V2 = np.array([s.V_l2 for s in stats])
    abs_s = absolute_mse(V, N)
    e_s = float(_normalize(abs_s, kappa, "mean"))
    abs_v = absolute_mse(V2, N) if np.all(np.isfinite(V2)) else float("nan")
    e_vs = float(_normalize(abs_v, kappa_v, "variance")) if np.isfinite(abs_v) else float("nan")
    return RunReport(
        method=method,
        mode=mode,
        targets=targets,
        levels=[s.mesh_level for s in specs],
        N=N,
        mean=np.sum([s.mean_Y for s in stats], axis=0),
        variance=np.sum([s.Z_l for s in stats], axis=0),
        e_s=e_s,
        e_vs=e_vs,
        abs_mse_mean=abs_s,
        abs_mse_var=abs_v,
        kappa=kappa,
        kappa_v=kappa_v,
        cost=float(sum(a.cost_sum for a in accs)),
        normalization=normalization,
        iterations=iterations,
        converged=converged,
        history=history,
        stats=stats,
        reused_screening=reused,
    )


def _adaptive(problem, specs, accs, targets, mode, normalization, max_iter, threads, stream, method, reused):
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    n_min = _min_samples(mode)
    for spec, acc in zip(specs, accs):
        _extend(problem, spec, acc, n_min, stream, threads)
    history = []
    for it in range(1, max_iter + 1):
        stats = [a.stats() for a in accs]
        kappa, kappa_v = normalization_constants(stats, normalization)
        C = np.array([s.cost for s in stats])
        C = np.where(C > 0, C, np.min(C[C > 0]) if np.any(C > 0) else 1.0)
        N_req = np.full(len(accs), n_min)
        if mode in ("mean", "both"):
            W = _normalize([s.V_l for s in stats], kappa, "mean")
            N_req = np.maximum(N_req, allocate(W, C, targets.eps_s_sq_half, n_min).N)
        if mode in ("variance", "both"):
            W2 = _normalize([s.V_l2 for s in stats], kappa_v, "variance")
            N_req = np.maximum(N_req, allocate(W2, C, targets.eps_vs_sq_half, n_min, "variance").N)
        history.append(N_req.copy())
        n_now = np.array([a.n for a in accs])
        log.info("%s iteration %d: n=%s required=%s", method, it, n_now.tolist(), N_req.tolist())
        if np.all(n_now >= N_req):
            report = _report(method, mode, targets, specs, accs, normalization, it, True, history, reused)
            ok_s = mode == "variance" or report.e_s <= targets.eps_s_sq_half
            ok_v = mode == "mean" or report.e_vs <= targets.eps_vs_sq_half
            if ok_s and ok_v:
                return report
            # plan met but estimate not (rounding at the bound): one more sample everywhere
            N_req = n_now + 1
        if it == max_iter:
            break
        for spec, acc, n in zip(specs, accs, N_req):
            _extend(problem, spec, acc, int(n), stream, threads)
    report = _report(method, mode, targets, specs, accs, normalization, max_iter, False, history, reused)
    raise ConvergenceError(
        f"{method} did not reach the targets within {max_iter} iterations "
        f"(e_s={report.e_s:.4g}, e_vs={report.e_vs:.4g})",
        report,
    )


def run_mlmc(
    problem,
    targets: Targets,
    mode: str = "both",
    screening_result: ScreeningResult | None = None,
    n_screen: int = 50,
    normalization: str = "t",
    max_iter: int = 20,
    threads: int = 1,
) -> RunReport:
    """Adaptive MLMC on levels 0..targets.level_max; L is fixed, only sampling error is controlled.

    Screening samples are reused as the first samples of every level.
    """
    L = targets.level_max
    if L >= problem.n_levels:
        raise ValueError(f"level_max={L} but the problem has levels 0..{problem.n_levels - 1}")
    specs = [_LevelSpec(l, l > 0) for l in range(L + 1)]
    if screening_result is None:
        accs = [LevelAccumulator(problem.n_nodes, s.coupled) for s in specs]
        for s, a in zip(specs, accs):
            _extend(problem, s, a, n_screen, MLMC_STREAM, threads)
    else:
        accs = [a.copy() for a in screening_result.accumulators[: L + 1]]
    return _adaptive(problem, specs, accs, targets, mode, normalization, max_iter, threads, MLMC_STREAM, "MLMC", True)


def run_mc(
    problem,
    targets: Targets,
    mode: str = "both",
    n_init: int = 50,
    normalization: str = "t",
    max_iter: int = 20,
    threads: int = 1,
) -> RunReport:
    """Single-level MC on mesh ``targets.level_max`` with the same stopping rule."""
    specs = [_LevelSpec(targets.level_max, False)]
    accs = [LevelAccumulator(problem.n_nodes, False)]
    _extend(problem, specs[0], accs[0], n_init, MC_STREAM, threads)
    return _adaptive(problem, specs, accs, targets, mode, normalization, max_iter, threads, MC_STREAM, "MC", False)
