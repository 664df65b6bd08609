"""Command-line front end: ``simlmc {screen,run,mc,validate}``.

Exit codes: 0 success, 1 usage error, 2 bad configuration or input,
3 adaptive loop did not converge (``diagnostics.json`` is written).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import checks, mlmc
from .config import ExperimentConfig, load_config
from .errors import ConfigError, ConvergenceError, MaterialError, MeshError
from .matmodel import MeanElasticity
from .meshfem import MeshHierarchy, build_plate_hierarchy, load_mesh_hierarchy
from .problem import ElasticityProblem
from .randfield import CovarianceKernel

log = logging.getLogger("simlmc")

EXIT_OK, EXIT_USAGE, EXIT_INPUT, EXIT_NONCONVERGENCE = 0, 1, 2, 3
RATE_KEYS = ("alpha", "beta", "gamma", "alpha_v", "beta_v", "c2", "c3", "c6", "c8", "c9")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# ---------------------------------------------------------------------------
# building blocks

def build_hierarchy(cfg: ExperimentConfig) -> MeshHierarchy:
    g = cfg.geometry
    if g.mesh_dir:
        return load_mesh_hierarchy(g.mesh_dir)
    return build_plate_hierarchy(g.width, g.height, g.nx0, g.ny0, g.levels)


def build_mean(cfg: ExperimentConfig) -> MeanElasticity:
    m = cfg.material
    if m.matrix:
        return MeanElasticity.from_matrix(np.reshape(m.matrix, (3, 3)))
    return MeanElasticity.orthotropic(m.E1, m.E2, m.nu21, m.G12)


def build_problem(cfg: ExperimentConfig) -> ElasticityProblem:
    m = cfg.material
    hierarchy = build_hierarchy(cfg)
    n_ref = hierarchy[hierarchy.L].n_nodes
    if m.kle_modes > n_ref:
        raise ConfigError(f"material.kle_modes={m.kle_modes} exceeds the finest-mesh node count {n_ref}")
    return ElasticityProblem.build(
        hierarchy,
        build_mean(cfg),
        m.delta_C,
        CovarianceKernel(m.corr_len_x, m.corr_len_y),
        m.kle_modes,
        load_resultant=cfg.load.resultant,
        master_seed=cfg.run.seed,
        cost_model=cfg.mlmc.cost_model,
    )


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.17g}"
    return str(v)


def write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def write_screening(out: Path, summary: mlmc.LevelSummary, h) -> None:
    rows = [
        (l, h[l], summary.mean_Y[l], summary.V_l[l], summary.Z_l[l], summary.V_l2[l], summary.C_l[l],
         summary.mean_u[l], summary.h2_u[l], summary.V2_u[l])
        for l in range(len(h))
    ]
    write_csv(out / "screening.csv",
              ["level", "h_l", "mean_Y", "V_l", "Z_l", "V_l2", "C_l", "mean_u", "h2_u", "V2_u"], rows)


def write_rates(out: Path, rates: mlmc.RatesFit) -> None:
    d = rates.as_dict()
    write_csv(out / "rates.csv", list(d), [list(d.values())])


def synthetic_summary(constants: dict, h) -> mlmc.LevelSummary:
    """Per-level data generated exactly from injected rate constants."""
    missing = [k for k in RATE_KEYS if k not in constants]
    if missing:
        raise ConfigError(f"synthetic rates file lacks {', '.join(missing)}")
    h = np.asarray(h, dtype=float)
    nan = np.full(len(h), np.nan)
    return mlmc.LevelSummary(
        mean_Y=constants["c8"] * h ** constants["alpha"],
        V_l=constants["c2"] * h ** constants["beta"],
        Z_l=constants["c9"] * h ** constants["alpha_v"],
        V_l2=constants["c6"] * h ** constants["beta_v"],
        C_l=constants["c3"] * h ** -constants["gamma"],
        mean_u=nan,
        h2_u=nan,
        V2_u=nan,
    )


def _estimand_values(report: mlmc.RunReport, estimand: str):
    if estimand == "mean":
        return report.targets.eps_s_sq_half, report.e_s, report.abs_mse_mean
    return report.targets.eps_vs_sq_half, report.e_vs, report.abs_mse_var


def _targets(target, L) -> mlmc.Targets:
    return mlmc.Targets(target, target, L)


def _write_diagnostics(out: Path, exc: ConvergenceError) -> None:
    payload = {"message": str(exc)}
    if exc.report is not None:
        payload.update(exc.report.diagnostics())
    (out / "diagnostics.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# subcommands

def cmd_screen(cfg: ExperimentConfig, out: Path, synthetic: str | None = None) -> int:
    if synthetic:
        path = Path(synthetic)
        if not path.is_file():
            raise ConfigError(f"synthetic rates file not found: {path}")
        h = build_hierarchy(cfg).h
        summary = synthetic_summary(json.loads(path.read_text()), h)
    else:
        problem = mlmc.CachedProblem(build_problem(cfg))
        result = mlmc.screening(problem, cfg.mlmc.n_screen, threads=cfg.run.threads)
        h, summary = result.h, result.summary
    write_screening(out, summary, h)
    rates = mlmc.fit_summary(summary, h)
    write_rates(out, rates)
    print(f"alpha={rates.alpha:.4f} beta={rates.beta:.4f} gamma={rates.gamma:.4f} "
          f"alpha_v={rates.alpha_v:.4f} beta_v={rates.beta_v:.4f} ({rates.regime})")
    return EXIT_OK


def _run_method(cfg, problem, method: str, screening_result=None):
    """Adaptive runs for every target and estimand; returns {(target, estimand): report}."""
    L = problem.n_levels - 1
    reports = {}
    for target in sorted(cfg.mlmc.targets):
        for estimand in ("mean", "variance"):
            tg = _targets(target, L)
            kw = dict(normalization=cfg.mlmc.normalization, max_iter=cfg.mlmc.max_iter, threads=cfg.run.threads)
            if method == "MLMC":
                rep = mlmc.run_mlmc(problem, tg, estimand, screening_result=screening_result, **kw)
            else:
                rep = mlmc.run_mc(problem, tg, estimand, n_init=cfg.mlmc.n_screen, **kw)
            reports[(target, estimand)] = rep
            log.info("%s %s target=%g N=%s cost=%.3f", method, estimand, target, rep.N.tolist(), rep.cost)
    return reports


def _write_results(out: Path, problem, reports_by_method: dict) -> None:
    alloc_rows, err_rows, cost_rows = [], [], []
    for method, reports in reports_by_method.items():
        for (target, estimand), rep in reports.items():
            specified, achieved, absolute = _estimand_values(rep, estimand)
            err_rows.append((method, estimand, target, specified, achieved, absolute))
            cost_rows.append((method, estimand, target, rep.cost))
            if method == "MLMC":
                alloc_rows += [(target, estimand, l, n) for l, n in zip(rep.levels, rep.N)]
    write_csv(out / "allocation.csv", ["target", "estimand", "level", "N_l"], alloc_rows)
    write_csv(out / "errors.csv",
              ["method", "estimand", "target", "specified", "achieved_normalized", "achieved_absolute"], err_rows)
    write_csv(out / "cost.csv", ["method", "estimand", "target", "cost_seconds"], cost_rows)

    method = "MLMC" if "MLMC" in reports_by_method else "MC"
    reports = reports_by_method[method]
    tightest = min(t for t, _ in reports)
    mean = reports[(tightest, "mean")].mean
    variance = reports[(tightest, "variance")].variance
    xy = problem.hierarchy.common_coordinates
    rows = [(i, xy[i, 0], xy[i, 1], mean[i], variance[i]) for i in range(len(mean))]
    write_csv(out / "estimates.csv", ["node_id", "x", "y", "mean", "variance"], rows)


def cmd_run(cfg: ExperimentConfig, out: Path) -> int:
    problem = mlmc.CachedProblem(build_problem(cfg))
    result = mlmc.screening(problem, cfg.mlmc.n_screen, threads=cfg.run.threads)
    write_screening(out, result.summary, result.h)
    write_rates(out, mlmc.fit_summary(result.summary, result.h))
    by_method = {"MLMC": _run_method(cfg, problem, "MLMC", result)}
    if cfg.mlmc.compare_mc:
        by_method["MC"] = _run_method(cfg, problem, "MC")
    _write_results(out, problem, by_method)
    _print_costs(by_method)
    return EXIT_OK


def cmd_mc(cfg: ExperimentConfig, out: Path) -> int:
    problem = mlmc.CachedProblem(build_problem(cfg))
    by_method = {"MC": _run_method(cfg, problem, "MC")}
    _write_results(out, problem, by_method)
    _print_costs(by_method)
    return EXIT_OK


def _print_costs(by_method) -> None:
    for method, reports in by_method.items():
        for (target, estimand), rep in sorted(reports.items()):
            value = rep.e_s if estimand == "mean" else rep.e_vs
            print(f"{method:4s} {estimand:8s} target={target:.3g} achieved={value:.4g} "
                  f"N={rep.N.tolist()} cost={rep.cost:.3f}s")


def cmd_validate(cfg: ExperimentConfig) -> int:
    results = checks.run_all(build_mean(cfg), cfg.material.delta_C)
    problem_ok = True
    try:
        problem = build_problem(cfg)
        captured = problem.basis.captured_fraction
        print(f"PASS hierarchy and KLE: {problem.n_levels} levels, {problem.n_nodes} common nodes, "
              f"captured variance fraction {captured:.6f}")
    except (MeshError, MaterialError, ConfigError, ValueError) as exc:
        print(f"FAIL hierarchy and KLE: {exc}")
        problem_ok = False
    for r in results:
        print(r.line())
    return EXIT_OK if problem_ok and all(r.passed for r in results) else EXIT_INPUT


# ---------------------------------------------------------------------------

def make_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="INI experiment file (defaults: desk-scale plate)")
    common.add_argument("--seed", type=int, help="master seed (unsigned 64-bit)")
    common.add_argument("--out", help="output directory")
    common.add_argument("--threads", type=int, help="worker threads for sampling")
    common.add_argument("-v", "--verbose", action="store_true")
    parser = _Parser(prog="simlmc", description="Scale-invariant MLMC for random-material plane elasticity.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    screen = sub.add_parser("screen", parents=[common], help="screening run and rate fit")
    screen.add_argument("--synthetic", help="JSON file of rate constants to fit instead of sampling")
    sub.add_parser("run", parents=[common], help="adaptive MLMC (and MC comparison) for every target")
    sub.add_parser("mc", parents=[common], help="single-level MC on the finest level")
    sub.add_parser("validate", parents=[common], help="configuration and fast invariant checks")
    return parser


def main(argv=None) -> int:
    try:
        args = make_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    out = None
    try:
        cfg = load_config(args.config) if args.config else ExperimentConfig().validate()
        cfg = cfg.with_overrides(seed=args.seed, out=args.out, threads=args.threads)
        if args.command == "validate":
            return cmd_validate(cfg)
        out = Path(cfg.run.out)
        out.mkdir(parents=True, exist_ok=True)
        if args.command == "screen":
            return cmd_screen(cfg, out, args.synthetic)
        if args.command == "run":
            return cmd_run(cfg, out)
        return cmd_mc(cfg, out)
    except ConvergenceError as exc:
        if out is not None:
            _write_diagnostics(out, exc)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NONCONVERGENCE
    except (ConfigError, MeshError, MaterialError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
