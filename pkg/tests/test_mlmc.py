import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from simlmc import mlmc
from simlmc.errors import ConvergenceError, FitError, InsufficientSamplesError, NormalizationError
from simlmc.stats import LevelAccumulator

from conftest import SyntheticProblem

MEAN_RATES = dict(alpha=2.0594, beta=1.4238, gamma=1.5989, c8=0.0058, c2=6.7907e-07, c3=0.1265)
VARIANCE_RATES = dict(alpha_v=1.6911, beta_v=1.4741, c9=1.1058e-06, c6=1.1374e-11)
H = 3.6166666666666667 * 0.5 ** np.arange(4)


# ---------------------------------------------------------------------------
# allocation

def test_two_level_allocation_example():
    plan = mlmc.allocate([4.0, 1.0], [1.0, 4.0], 0.1)
    assert plan.N.tolist() == [80, 20]
    assert plan.predicted_cost == 80 + 4 * 20


def test_single_level_allocation():
    assert mlmc.allocate([1.0], [1.0], 0.01).N.tolist() == [100]


def test_allocation_ignores_cost_scale():
    W, C = [3.0, 0.4, 0.05], [1.0, 3.7, 15.2]
    a = mlmc.allocate(W, C, 0.003).N
    b = mlmc.allocate(W, 10 * np.array(C), 0.003).N
    assert a.tolist() == b.tolist()


def test_zero_variance_gives_minimum_plan():
    assert mlmc.allocate([0.0, 0.0], [1.0, 2.0], 0.1, min_samples=4).N.tolist() == [4, 4]


def test_allocation_rejects_bad_inputs():
    with pytest.raises(ValueError):
        mlmc.allocate([1.0], [0.0], 0.1)
    with pytest.raises(ValueError):
        mlmc.allocate([1.0], [1.0], 0.0)


def test_nodewise_allocation_meets_bound_everywhere():
    rng = np.random.default_rng(0)
    W = rng.random((3, 7)) * [[1.0], [0.1], [0.01]]
    C = np.array([1.0, 4.0, 16.0])
    plan = mlmc.allocate(W, C, 1e-3)
    assert np.all((W / plan.N[:, None]).sum(axis=0) <= 1e-3 * (1 + 1e-12))


def _grid_min_cost(W, C, target, nmax):
    best = np.inf
    grids = [range(1, nmax + 1)] * len(W)
    if len(W) == 3:
        # the constraint is monotone, so scan two levels and solve for the third
        for n0, n1 in itertools.product(range(1, nmax + 1), repeat=2):
            rest = target - W[0] / n0 - W[1] / n1
            if rest <= 0:
                continue
            n2 = max(1, int(np.ceil(W[2] / rest)))
            if n2 <= nmax:
                best = min(best, n0 * C[0] + n1 * C[1] + n2 * C[2])
        return best
    for ns in itertools.product(*grids):
        if sum(w / n for w, n in zip(W, ns)) <= target:
            best = min(best, sum(c * n for c, n in zip(C, ns)))
    return best


@pytest.mark.parametrize("seed", range(10))
def test_allocation_close_to_grid_optimum(seed):
    rng = np.random.default_rng(seed)
    L = int(rng.integers(1, 4))
    W = rng.uniform(0.1, 2.0, L) * 0.3 ** np.arange(L)
    C = rng.uniform(0.5, 2.0, L) * 4.0 ** np.arange(L)
    target = rng.uniform(0.02, 0.2)
    plan = mlmc.allocate(W, C, target, min_samples=1)
    assert np.sum(W / plan.N) <= target * (1 + 1e-12)
    best = _grid_min_cost(W, C, target, 200 if L < 3 else 150)
    assert plan.predicted_cost <= best + C.sum()


# ---------------------------------------------------------------------------
# rates

def test_fit_recovers_reference_rates():
    h = H
    r = mlmc.fit_rates(
        MEAN_RATES["c8"] * h ** MEAN_RATES["alpha"], MEAN_RATES["c2"] * h ** MEAN_RATES["beta"],
        VARIANCE_RATES["c9"] * h ** VARIANCE_RATES["alpha_v"], VARIANCE_RATES["c6"] * h ** VARIANCE_RATES["beta_v"],
        h, MEAN_RATES["c3"] * h ** -MEAN_RATES["gamma"],
    )
    for name, value in {**MEAN_RATES, **VARIANCE_RATES}.items():
        assert getattr(r, name) == pytest.approx(value, rel=1e-10)
    assert r.regime == "third scenario" and r.regime_v == "third scenario"
    assert r.alpha_condition and r.alpha_v_condition


def test_two_point_fit_is_exact():
    rate, c = mlmc.loglog_fit([2.0, 1.0], [12.0, 3.0])
    assert rate == pytest.approx(2.0, rel=1e-14) and c == pytest.approx(3.0, rel=1e-14)


def test_fit_excludes_non_positive_points():
    rate, _ = mlmc.loglog_fit([4.0, 2.0, 1.0], [0.0, 8.0, 2.0])
    assert rate == pytest.approx(2.0)
    with pytest.raises(FitError):
        mlmc.loglog_fit([2.0, 1.0], [-1.0, 1.0])


def test_regime_classifier():
    assert mlmc.regime(1.4238, 1.5989) == "third scenario"
    assert mlmc.regime(2.0, 2.0) == "second scenario"
    assert mlmc.regime(3.0, 2.0) == "first scenario"


# ---------------------------------------------------------------------------
# normalized errors

def test_normalized_error_examples():
    assert mlmc.normalized_mse_mean([4.0], [100], 2.0) == pytest.approx(0.01, rel=1e-15)
    assert mlmc.normalized_mse_variance([1e-8], [100], 1e-3) == pytest.approx(1e-4, rel=1e-12)


def test_doubling_samples_halves_error():
    V, N = np.array([[2.0, 3.0], [0.5, 0.1]]), np.array([10, 4])
    assert mlmc.normalized_mse_mean(V, 2 * N, 1.3) == pytest.approx(0.5 * mlmc.normalized_mse_mean(V, N, 1.3),
                                                                    rel=1e-15)
    assert mlmc.normalized_mse_variance(V, 2 * N, 0.7) == pytest.approx(
        0.5 * mlmc.normalized_mse_variance(V, N, 0.7), rel=1e-15)


@settings(max_examples=30, deadline=None)
@given(st.floats(1e-4, 1e4))
def test_error_scale_invariance(s):
    V, V2, N = np.array([1.0, 0.2, 0.01]), np.array([3.0, 0.5, 0.02]), np.array([100, 20, 5])
    assert mlmc.normalized_mse_mean(V * s**2, N, 0.8 * s) == pytest.approx(mlmc.normalized_mse_mean(V, N, 0.8),
                                                                          rel=1e-12)
    assert mlmc.normalized_mse_variance(V2 * s**4, N, 1.7 * s**2) == pytest.approx(
        mlmc.normalized_mse_variance(V2, N, 1.7), rel=1e-12)


def test_zero_kappa_is_degenerate():
    with pytest.raises(NormalizationError):
        mlmc.normalized_mse_mean([1.0], [10], 0.0)
    with pytest.raises(NormalizationError):
        mlmc.normalized_mse_variance([1.0], [10], 0.0)


def test_error_monotone_in_samples():
    V = np.array([1.0, 0.1])
    errs = [mlmc.normalized_mse_mean(V, [n, n // 4 + 1], 1.0) for n in range(4, 200, 7)]
    assert all(a >= b for a, b in zip(errs, errs[1:]))


# ---------------------------------------------------------------------------
# screening and runs on the synthetic problem

def test_screening_solve_count(synthetic):
    res = mlmc.screening(synthetic, 50)
    assert res.n_solves == 50 * (1 + 2 * 3)
    assert [a.n for a in res.accumulators] == [50] * 4


def test_screening_needs_four_samples(synthetic):
    with pytest.raises(InsufficientSamplesError):
        mlmc.screening(synthetic, 3)


def test_screening_shapes(synthetic):
    s = mlmc.screening(synthetic, 50).summary
    assert np.all(np.diff(s.mean_Y[1:]) < 0) and np.all(np.diff(s.V_l[1:]) < 0)
    assert np.ptp(s.mean_u) / s.mean_u.mean() < 0.1


def test_run_meets_targets(synthetic):
    t = mlmc.Targets(1e-3, 2e-3, 3)
    r = mlmc.run_mlmc(synthetic, t, "both", n_screen=20)
    assert r.converged and r.e_s <= 1e-3 and r.e_vs <= 2e-3
    assert r.reused_screening and r.levels == [0, 1, 2, 3]
    assert np.all(np.diff(r.N) <= 0)


def test_single_level_equals_plain_mc():
    p = SyntheticProblem(n_levels=1)
    r = mlmc.run_mlmc(p, mlmc.Targets(1e-2, 1e-2, 0), "mean", n_screen=10)
    samples = np.array([p.evaluate(0, i)[0] for i in range(r.N[0])])
    np.testing.assert_array_equal(r.mean, LevelAccumulator(p.n_nodes, False).accumulate(samples).stats().mean_Y)
    np.testing.assert_allclose(r.mean, samples.mean(axis=0), rtol=1e-13)


@pytest.mark.parametrize("normalization", ["t", "magnitude"])
def test_run_scale_invariant(normalization):
    t = mlmc.Targets(2e-3, 4e-3, 3)
    runs = [mlmc.run_mlmc(SyntheticProblem(scale=s), t, "both", n_screen=20, normalization=normalization)
            for s in (1e-3, 1.0, 1e3)]
    for r in runs[1:]:
        assert r.N.tolist() == runs[0].N.tolist()
        assert [h.tolist() for h in r.history] == [h.tolist() for h in runs[0].history]
        assert r.e_s == pytest.approx(runs[0].e_s, rel=1e-12)
        assert r.e_vs == pytest.approx(runs[0].e_vs, rel=1e-12)


def test_non_convergence_report(synthetic):
    with pytest.raises(ConvergenceError) as err:
        mlmc.run_mlmc(synthetic, mlmc.Targets(1e-7, 1e-7, 3), "mean", n_screen=10, max_iter=1)
    rep = err.value.report
    assert rep is not None and not rep.converged and rep.e_s > 1e-7
    d = rep.diagnostics()
    assert d["converged"] is False and len(d["history"]) == 1


def test_mc_and_mlmc_means_consistent(synthetic):
    t = mlmc.Targets(5e-4, 5e-4, 3)
    a = mlmc.run_mlmc(synthetic, t, "mean", n_screen=20)
    b = mlmc.run_mc(synthetic, t, "mean", n_init=20)
    se = np.sqrt(a.standard_error_mean() ** 2 + b.standard_error_mean() ** 2)
    assert np.all(np.abs(a.mean - b.mean) <= 3 * se)
    assert b.e_s <= 5e-4 and b.levels == [3]


def test_mc_t_normalization_is_reciprocal_sample_count(synthetic):
    b = mlmc.run_mc(synthetic, mlmc.Targets(1e-2, 1e-2, 3), "mean", n_init=10)
    assert b.e_s == pytest.approx(1.0 / b.N[0], rel=1e-12)


def test_variance_mode_needs_more_coarse_samples(synthetic):
    t = mlmc.Targets(1e-3, 1e-3, 3)
    a = mlmc.run_mlmc(synthetic, t, "mean", n_screen=20)
    b = mlmc.run_mlmc(synthetic, t, "variance", n_screen=20)
    assert b.N[0] >= a.N[0]


def test_cached_problem_reuses_samples(synthetic):
    cached = mlmc.CachedProblem(synthetic)
    t = mlmc.Targets(1e-3, 1e-3, 3)
    first = mlmc.run_mlmc(cached, t, "mean", n_screen=20)
    solves = synthetic.solve_count
    second = mlmc.run_mlmc(cached, t, "mean", n_screen=20)
    assert synthetic.solve_count == solves
    np.testing.assert_array_equal(first.mean, second.mean)
    assert first.cost == second.cost


def test_screening_reused_by_run(synthetic):
    cached = mlmc.CachedProblem(synthetic)
    scr = mlmc.screening(cached, 30)
    r = mlmc.run_mlmc(cached, mlmc.Targets(1e-3, 1e-3, 3), "mean", screening_result=scr)
    assert np.all(r.N >= 30)
    assert [a.n for a in scr.accumulators] == [30] * 4


def test_threads_match_serial():
    t = mlmc.Targets(1e-3, 1e-3, 3)
    a = mlmc.run_mlmc(SyntheticProblem(), t, "both", n_screen=20)
    b = mlmc.run_mlmc(SyntheticProblem(), t, "both", n_screen=20, threads=4)
    assert a.N.tolist() == b.N.tolist()
    np.testing.assert_array_equal(a.mean, b.mean)
    np.testing.assert_array_equal(a.variance, b.variance)


def test_deterministic_limit(plate, ortho_mean):
    from simlmc.problem import DeterministicProblem

    p = DeterministicProblem(plate, ortho_mean)
    s = mlmc.screening(p, 4).summary
    assert np.all(s.V_l == 0.0) and np.all(s.Z_l[1:] == 0.0)
    assert np.all(np.diff(s.mean_Y[1:]) < 0)
    t = mlmc.Targets(2e-4, 2e-4, 3)
    a = mlmc.run_mlmc(p, t, "both", n_screen=4)
    b = mlmc.run_mc(p, t, "both", n_init=4)
    assert a.N.tolist() == [4, 4, 4, 4] and b.N.tolist() == [4]
    assert 0.5 <= a.cost / b.cost <= 2.0


def test_invalid_arguments(synthetic):
    with pytest.raises(ValueError):
        mlmc.Targets(0.0, 1e-3, 1)
    with pytest.raises(ValueError):
        mlmc.run_mlmc(synthetic, mlmc.Targets(1e-3, 1e-3, 4), "mean")
    with pytest.raises(ValueError):
        mlmc.run_mlmc(synthetic, mlmc.Targets(1e-3, 1e-3, 3), "skewness", n_screen=5)
