"""Command-line entry point: simulate, solve, decompose, hedge, mmm, validate.

    partial-bsde <subcommand> scenario.toml [--paths P] [--steps N] [--seed S]

Artifacts go to the scenario's run.output_dir with the scenario hash in
every filename.  The JSON report holds only deterministic content; wall-clock
timings are written next to it in a separate file so reports from equal-seed
runs are byte-identical.  Exit status: 0 if every check passed, 1 if some
check failed, 2 on scenario or numerical errors.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import checks
from .bsde import (
    BsdeSolution,
    Driver,
    reduce_full_to_partial,
    solve_bsde_delayed_blocks,
    solve_bsde_full,
    solve_bsde_partial,
)
from .checks import CheckResult, at_least, at_most
from .decomposition import fs_decompose, gkw_decompose
from .hedging import (
    mean_self_financing_strategy,
    mmm_density,
    mmm_price,
    optimal_strategy,
    perturbation_battery,
    risk_process,
    risk_quotient,
)
from .market import PathEnsemble, simulate_market
from .scenario import Scenario, ScenarioError, load_scenario

log = logging.getLogger("partial_bsde")

SUBCOMMANDS = ("simulate", "solve", "decompose", "hedge", "mmm", "validate")
# agreement between two solvers of the same equation
Y_AGREEMENT = 0.05
Z_AGREEMENT = 0.1
# identities that hold up to floating-point noise only
NUMERIC_TOL = 1e-8


@dataclass
class RunReport:
    scenario_hash: str
    subcommand: str
    checks: list[CheckResult] = field(default_factory=list)
    picard: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)
    diagnostics: dict = field(default_factory=dict)
    artifacts: list[str] = field(default_factory=list)
    notes: list[str] = field(default_factory=list)

    def add(self, *results: CheckResult) -> None:
        names = {c.name for c in self.checks}
        for r in results:
            if r.name in names:
                raise RuntimeError(f"check {r.name!r} reported twice")
            names.add(r.name)
            self.checks.append(r)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def failed(self) -> list[CheckResult]:
        return [c for c in self.checks if not c.passed]

    def to_dict(self) -> dict:
        return {
            "scenario_hash": self.scenario_hash,
            "subcommand": self.subcommand,
            "passed": self.passed,
            "checks": [c.as_dict() for c in self.checks],
            "picard": self.picard,
            "diagnostics": self.diagnostics,
            "artifacts": list(self.artifacts),
            "notes": list(self.notes),
        }


@contextmanager
def _timed(report: RunReport, key: str):
    t0 = time.perf_counter()
    yield
    report.timings[key] = round(time.perf_counter() - t0, 6)


# artifacts


def _write_csv(path: Path, header: str, columns: list[np.ndarray], fmts: list[str]) -> None:
    data = np.column_stack(columns)
    with open(path, "w", newline="") as fh:
        fh.write(header + "\n")
        np.savetxt(fh, data, fmt=",".join(fmts))


def export_ensemble(ens: PathEnsemble, path: Path) -> None:
    P, N1 = ens.M.shape
    path_idx = np.repeat(np.arange(P), N1)
    step_idx = np.tile(np.arange(N1), P)
    _write_csv(
        path, "path,step,M,bracket,S",
        [path_idx, step_idx, ens.M.ravel(), np.asarray(ens.bracket).ravel(), ens.S.ravel()],
        ["%d", "%d", "%.17g", "%.17g", "%.17g"],
    )


def export_solution(sol: BsdeSolution, path: Path) -> None:
    """Rows per (path, step); Z and dO at the last grid point are empty."""
    P, N1 = sol.Y.shape
    pad = np.full((P, 1), np.nan)
    Z = np.concatenate([sol.Z, pad], axis=1)
    dO = np.concatenate([sol.dO, pad], axis=1)
    path_idx = np.repeat(np.arange(P), N1)
    step_idx = np.tile(np.arange(N1), P)
    _write_csv(
        path, "path,step,Y,Z,dO",
        [path_idx, step_idx, sol.Y.ravel(), Z.ravel(), dO.ravel()],
        ["%d", "%d", "%.17g", "%.17g", "%.17g"],
    )


# stages


def _solution_checks(report, ens, info, sol: BsdeSolution, prefix: str) -> None:
    report.add(
        at_most(f"{prefix}.terminal_condition", sol.terminal_error(), 0.0),
        at_most(f"{prefix}.recursion_identity", sol.recursion_error(ens), 0.0),
        checks.orthogonality_check(ens, info, sol.dO, prefix),
        checks.martingale_increment_check(ens, sol.dO, f"{prefix}.f_martingale_residual"),
    )


def _picard_checks(report, sol: BsdeSolution, prefix: str) -> None:
    report.picard[prefix] = {
        "iterations": sol.iterations,
        "converged": sol.converged,
        "pnorm_history": [float(x) for x in sol.pnorm_history],
        "ratio_history": [float(x) for x in sol.ratio_history],
        "classical_history": [float(x) for x in sol.diagnostics.get("classical_history", ())],
        "m_hat": sol.diagnostics.get("m_hat"),
    }
    report.add(
        at_least(f"{prefix}.picard_converged", float(sol.converged), 1.0),
        at_most(f"{prefix}.picard_contraction", max(sol.ratio_history, default=0.0), 0.6),
    )


def stage_simulate(sc: Scenario, report: RunReport) -> PathEnsemble:
    with _timed(report, "simulate"):
        ens = simulate_market(sc.market, sc.grid)
    report.add(*checks.market_checks(ens))
    return ens


def stage_solve(sc: Scenario, ens, report: RunReport) -> BsdeSolution:
    driver, claim = sc.build_driver(), sc.build_claim()
    with _timed(report, "solve"):
        if sc.scheme == "blocks":
            sol = solve_bsde_delayed_blocks(ens, sc.info, driver, claim)
        else:
            sol = solve_bsde_partial(ens, sc.info, driver, claim, sc.tol, sc.max_iter, sc.scheme)
    _solution_checks(report, ens, sc.info, sol, "solve")
    if sc.scheme != "blocks":
        _picard_checks(report, sol, "solve")
    return sol


def stage_decompose(sc: Scenario, ens, report: RunReport):
    claim = sc.build_claim()
    scheme = "joint" if sc.scheme == "blocks" else sc.scheme
    with _timed(report, "decompose"):
        gkw = gkw_decompose(ens, sc.info, claim, scheme)
        fs = fs_decompose(ens, sc.info, claim, sc.tol, sc.max_iter, scheme)
    for name, dec in (("gkw", gkw), ("fs", fs)):
        report.add(
            at_most(f"decompose.{name}.reconstruction", dec.reconstruction_error(ens), 0.0),
            at_most(f"decompose.{name}.forward_sum", dec.forward_error(ens), dec.roundoff_bound(ens)),
            checks.orthogonality_check(ens, sc.info, dec.dA, f"decompose.{name}"),
            checks.martingale_increment_check(ens, dec.dA, f"decompose.{name}.residual_f_martingale"),
        )
    _picard_checks(report, fs.solution, "decompose.fs")
    if sc.market.alpha.kind == "constant" and sc.market.alpha.value == 0:
        diff = float(np.max(np.abs(fs.integrand - gkw.integrand)))
        report.add(at_most("collapse.fs_equals_gkw", diff, NUMERIC_TOL))
    return gkw, fs


def _is_brownian_square(sc: Scenario) -> bool:
    m, c = sc.market, sc.claim
    return (
        c["name"] == "power" and c.get("exponent") == 2.0 and c.get("underlying", "S") in ("M", "W")
        and m.sigma_bar == 1.0 and m.jump_intensity == 0.0 and m.m0 == 0.0
    )


def stage_hedge(sc: Scenario, ens, report: RunReport, fs=None, out_dir: Path | None = None):
    claim = sc.build_claim()
    info = sc.info
    scheme = "joint" if sc.scheme == "blocks" else sc.scheme
    with _timed(report, "hedge"):
        strat = optimal_strategy(ens, info, claim, sc.tol, sc.max_iter, scheme, decomposition=fs)
        risk = risk_process(strat, ens, info)
    report.add(
        at_most("hedge.replication", strat.replication_error(), 0.0),
        at_most("hedge.cost_identity", strat.cost_identity_error(), 0.0),
        checks.martingale_increment_check(ens, strat.d_cost, "hedge.mean_self_financing"),
        checks.orthogonality_check(ens, info, strat.d_cost, "hedge.cost"),
        at_most("hedge.risk_terminal_zero", float(np.max(np.abs(risk.values[:, -1]))), 0.0),
    )
    if _is_brownian_square(sc) and sc.market.alpha.kind == "constant" and sc.market.alpha.value == 0:
        L = info.lag_steps(sc.grid)
        W = ens.W
        lagged = W[:, np.maximum(np.arange(sc.grid.n_steps) - L, 0)]
        report.add(at_most("hedge.theta_oracle_rms", checks.rms(strat.theta, 2.0 * lagged), 0.1))

    partition = list(range(0, sc.grid.n_steps + 1, sc.run.partition_steps))
    with _timed(report, "risk_quotient"):
        battery = perturbation_battery(ens, info, partition, sc.run.perturbation_scale)
        worst = np.inf
        minima = {}
        for name, delta in battery.items():
            q = risk_quotient(strat, ens, info, delta, partition)
            z = q.min_value / q.pooled_se if q.pooled_se > 0 else 0.0
            minima[name] = round(float(z), 12)
            worst = min(worst, z)
        report.add(at_least("hedge.risk_quotient_optimal", worst, -checks.Z_LIMIT))
        d0 = battery["constant"]
        bad = mean_self_financing_strategy(ens, info, claim, strat.theta + d0)
        q = risk_quotient(bad, ens, info, -d0, partition)
        zbad = q.min_value / q.pooled_se if q.pooled_se > 0 else 0.0
        report.add(at_most("hedge.risk_quotient_falsifier", zbad, -checks.Z_LIMIT))
    report.diagnostics["risk_quotient_min_z"] = minima

    if info.is_full:
        price = mmm_price(ens, claim, weights=mmm_density(ens, sc.run.mmm_max_invalid_fraction))
        report.add(at_most("hedge.mmm_agreement_rms", checks.rms(price, strat.value), 0.1))
    else:
        report.notes.append("MMM agreement is not asserted under partial information")

    if out_dir is not None:
        path = out_dir / f"hedge_{report.scenario_hash}_steps.csv"
        N = sc.grid.n_steps
        zs = checks.conditional_mean_zscores(ens, strat.d_cost)
        theta = np.concatenate([strat.theta, strat.theta[:, -1:]], axis=1)
        dC = np.concatenate([strat.d_cost, np.zeros((ens.n_paths, 1))], axis=1)
        zcol = np.concatenate([np.max(np.abs(zs), axis=1), [0.0]])
        _write_csv(
            path, "step,t,theta_mean,value_mean,cost_increment_mean,msf_max_abs_z,risk_mean",
            [np.arange(N + 1), sc.grid.times, theta.mean(0), strat.value.mean(0), dC.mean(0),
             zcol, risk.values.mean(0)],
            ["%d", "%.17g", "%.17g", "%.17g", "%.17g", "%.17g", "%.17g"],
        )
        report.artifacts.append(path.name)
    return strat


def stage_mmm(sc: Scenario, ens, report: RunReport, strategy=None, out_dir: Path | None = None):
    claim = sc.build_claim()
    with _timed(report, "mmm"):
        w = mmm_density(ens, sc.run.mmm_max_invalid_fraction)
    LT = w.density[:, -1]
    valid = w.valid
    report.add(
        at_least("mmm.positivity_fraction", float(valid.mean()), 1.0 - sc.run.mmm_max_invalid_fraction),
        at_most("mmm.density_mean", abs(checks.zscore(LT[valid] - 1.0)), checks.Z_LIMIT),
        at_most(
            "mmm.discounted_price_mean",
            abs(checks.zscore(LT[valid] * ens.S[valid, -1] - sc.market.s0)),
            checks.Z_LIMIT,
        ),
        at_most("mmm.density_variance", float(np.var(LT)), np.finfo(float).max),
    )
    if sc.info.is_full:
        if strategy is None:
            strategy = optimal_strategy(ens, sc.info, claim, sc.tol, sc.max_iter)
        with _timed(report, "mmm_price"):
            price = mmm_price(ens, claim, weights=w)
        if "hedge.mmm_agreement_rms" not in {c.name for c in report.checks}:
            report.add(at_most("mmm.price_vs_fs_value_rms", checks.rms(price, strategy.value), 0.1))
        if out_dir is not None:
            path = out_dir / f"mmm_{report.scenario_hash}_steps.csv"
            _write_csv(
                path, "step,t,density_mean,price_mean,fs_value_mean",
                [np.arange(sc.grid.n_steps + 1), sc.grid.times, w.density.mean(0),
                 price.mean(0), strategy.value.mean(0)],
                ["%d", "%.17g", "%.17g", "%.17g", "%.17g"],
            )
            report.artifacts.append(path.name)
    else:
        report.notes.append("MMM price is a full-information object; not computed")


def stage_collapse(sc: Scenario, ens, report: RunReport, sol: BsdeSolution) -> None:
    claim = sc.build_claim()
    driver = sc.build_driver()
    with _timed(report, "collapse"):
        zero = solve_bsde_partial(ens, sc.info, Driver.zero(), claim, sc.tol, sc.max_iter)
        report.add(at_most("collapse.zero_driver_iterations", float(zero.iterations), 1.0))
        if not driver.depends_on_z and not driver.random_coefficients:
            full_info = sc.info.as_full()
            full = solve_bsde_full(ens, driver, claim, info=full_info)
            partial_full = solve_bsde_partial(ens, full_info, driver, claim, sc.tol, sc.max_iter)
            report.add(
                at_most("collapse.full_info_partial_equals_full_y", checks.rms(partial_full.Y, full.Y), Y_AGREEMENT),
                at_most("collapse.full_info_partial_equals_full_z", checks.rms(partial_full.Z, full.Z), Z_AGREEMENT),
            )
            if not sc.info.is_full:
                red = reduce_full_to_partial(full, ens, sc.info)
                report.add(
                    at_most("collapse.reduced_equals_partial_y", checks.rms(red.Y, sol.Y), Y_AGREEMENT),
                    at_most("collapse.reduced_equals_partial_z", checks.rms(red.Z, sol.Z), Z_AGREEMENT),
                )
        blocks_ok = (
            not sc.info.is_full and not driver.depends_on_y and not driver.random_coefficients
            and sc.grid.n_steps % sc.info.lag_steps(sc.grid) == 0
            and abs(sc.grid.horizon / sc.info.tau - round(sc.grid.horizon / sc.info.tau)) < 1e-9
        )
        if blocks_ok:
            other = (
                solve_bsde_partial(ens, sc.info, driver, claim, sc.tol, sc.max_iter)
                if sc.scheme == "blocks" else solve_bsde_delayed_blocks(ens, sc.info, driver, claim)
            )
            report.add(at_most("collapse.blocks_equal_picard_y", checks.rms(other.Y, sol.Y), Y_AGREEMENT))


# entry points


def run(
    scenario_file: str | Path,
    subcommand: str,
    paths: int | None = None,
    steps: int | None = None,
    seed: int | None = None,
    output_dir: str | Path | None = None,
) -> RunReport:
    """Run one pipeline and write its artifacts; returns the report."""
    if subcommand not in SUBCOMMANDS:
        raise ValueError(f"unknown subcommand {subcommand!r}")
    sc = load_scenario(scenario_file).with_overrides(paths, steps, seed, output_dir)
    h = sc.hash()
    out = Path(sc.run.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    report = RunReport(h, subcommand)

    ens = stage_simulate(sc, report)
    if subcommand == "simulate" or sc.run.export_ensemble:
        p = out / f"ensemble_{h}.csv"
        export_ensemble(ens, p)
        report.artifacts.append(p.name)

    if subcommand in ("solve", "validate"):
        sol = stage_solve(sc, ens, report)
        if sc.run.export_solution:
            p = out / f"{subcommand}_{h}_solution.csv"
            export_solution(sol, p)
            report.artifacts.append(p.name)
    fs = None
    if subcommand in ("decompose", "validate"):
        _, fs = stage_decompose(sc, ens, report)
    strat = None
    if subcommand in ("hedge", "validate"):
        strat = stage_hedge(sc, ens, report, fs, out)
    if subcommand in ("mmm", "validate"):
        stage_mmm(sc, ens, report, strat, out)
    if subcommand == "validate":
        stage_collapse(sc, ens, report, sol)

    rp = out / f"report_{subcommand}_{h}.json"
    report.artifacts.append(rp.name)
    rp.write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    (out / f"timings_{subcommand}_{h}.json").write_text(json.dumps(report.timings, indent=2) + "\n")
    return report


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="partial-bsde", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="subcommand", required=True)
    for name in SUBCOMMANDS:
        p = sub.add_parser(name)
        p.add_argument("scenario", help="scenario TOML file")
        p.add_argument("--paths", type=int, help="override market.n_paths")
        p.add_argument("--steps", type=int, help="override market.n_steps")
        p.add_argument("--seed", type=int, help="override run.seed")
        p.add_argument("--output-dir", help="override run.output_dir")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        report = run(args.scenario, args.subcommand, args.paths, args.steps, args.seed, args.output_dir)
    except (ScenarioError, FileNotFoundError) as exc:
        print(f"scenario error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, FloatingPointError, OverflowError, NotImplementedError) as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    for c in report.checks:
        mark = "PASS" if c.passed else "FAIL"
        print(f"{mark} {c.name}: {c.statistic:.6g} (threshold {c.threshold:.6g})")
    print(f"{'all checks passed' if report.passed else f'{len(report.failed())} check(s) failed'}"
          f" [{report.scenario_hash}]")
    return 0 if report.passed else 1


if __name__ == "__main__":
    sys.exit(main())
