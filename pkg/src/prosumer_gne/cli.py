"""
Command line entry point.

    prosumer-gne generate --agents 10 --seed 3 --out scenario.json
    prosumer-gne solve --scenario scenario.json --algo pfb --iters 200 --out trace.csv
    prosumer-gne batch --agents 10 --sims 50 --algo pfb,admm,central --out report.json
    prosumer-gne report report.json

Exit codes: 0 success, 1 partial failure (a solver step or some simulations
failed, whatever was reached is still written), 2 configuration error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import algorithms as alg
from .harness import (ExperimentConfig, export_report, generate_scenario, load_report,
                      run_experiment, validate_scenario)
from .model import Scenario, TimeGrid, idle_decisions

EXIT_OK, EXIT_PARTIAL, EXIT_CONFIG = 0, 1, 2

logger = logging.getLogger("prosumer_gne")


class ConfigError(Exception):
    pass


def _grid(steps):
    if steps is None:
        return TimeGrid()
    if steps < 1:
        raise ConfigError("--steps must be >= 1")
    return TimeGrid(T=steps, dt=24.0 / steps)


def _algos(text):
    names = tuple(a.strip() for a in text.split(",") if a.strip())
    bad = set(names) - {"pfb", "admm", "central"}
    if not names or bad:
        raise ConfigError(f"--algo expects a comma list of pfb, admm, central (got {text!r})")
    return names


def _config(args, n_sims=1) -> ExperimentConfig:
    try:
        return ExperimentConfig(n_sims=n_sims, n_agents=args.agents, grid=_grid(args.steps),
                                rho=args.rho, algorithms=_algos(args.algo), seed=args.seed,
                                max_iter=args.iters, workers=args.workers, gate=not args.no_gate,
                                output=args.out)
    except ValueError as err:
        raise ConfigError(str(err)) from err


def _emit(doc):
    print(json.dumps(doc, indent=1, default=float))


def cmd_generate(args) -> int:
    cfg = _config(args)
    scenario = generate_scenario(cfg, args.seed)
    validate_scenario(scenario)
    out = Path(args.out or "scenario.json")
    scenario.save(out)
    _emit({"scenario": str(out), "agents": scenario.n_agents, "steps": scenario.grid.T,
           "alpha": scenario.alpha.round(4).tolist()})
    return EXIT_OK


def _load_scenario(path) -> Scenario:
    if path is None:
        raise ConfigError("solve needs --scenario")
    try:
        scenario = Scenario.load(path)
    except (OSError, ValueError, KeyError, TypeError) as err:
        raise ConfigError(f"cannot read scenario {path}: {err}") from err
    try:
        validate_scenario(scenario)
    except ValueError as err:
        raise ConfigError(f"{path}: {err}") from err
    return scenario


def cmd_solve(args) -> int:
    scenario = _load_scenario(args.scenario)
    names = _algos(args.algo)
    if args.rho <= 0 or args.iters < 0:
        raise ConfigError("--rho must be positive and --iters >= 0")
    stopping = alg.StoppingRule(max_iter=args.iters)
    out = Path(args.out) if args.out else None
    summary, code = {"sigma_idle": alg.sigma(idle_decisions(scenario), scenario)}, EXIT_OK
    for name in names:
        if name == "central":
            summary["central"] = {"sigma": alg.centralized_reference(scenario).sigma}
            continue
        try:
            state, trace = alg.run(name, scenario, stopping, rho=args.rho, gate=not args.no_gate)
            status = "ok"
        except alg.StepError as err:
            state, trace, status, code = err.state, err.trace, f"failed: {err}", EXIT_PARTIAL
        entry = {"status": status, "iterations": len(trace)}
        if len(trace):
            last = trace.records[-1]
            entry.update(sigma=last.sigma, stationarity=last.stat_res, primal=last.primal_res)
        if state is not None:
            price = alg.coupling_price(name, state, args.rho)
            excess = alg.mechanism_costs(state.x, price, scenario) - alg.base_case_costs(state.x, scenario)
            entry["ir_excess"] = np.round(excess, 8).tolist()
        if out is not None:
            path = out if len(names) == 1 else out.with_name(f"{out.stem}_{name}{out.suffix or '.csv'}")
            trace.to_csv(path)
            entry["trace"] = str(path)
        summary[name] = entry
    _emit(summary)
    return code


def cmd_batch(args) -> int:
    cfg = _config(args, n_sims=args.sims)
    report = run_experiment(cfg)
    out = Path(args.out or "report.json")
    export_report(report, out)
    export_report(report, out.with_suffix(".csv"), format="tabular")
    _emit(_digest(report) | {"report": str(out), "traces": str(out.with_suffix(".csv"))})
    return EXIT_PARTIAL if report.failures else EXIT_OK


def _digest(report) -> dict:
    ok = [s for s in report.sims if s.status == "ok"]
    doc = {"sims": len(report.sims), "failed": [s.sim for s in report.failures]}
    for name in report.config.algorithms:
        if name == "central":
            continue
        exc = [max(s.ir_excess[name]) for s in ok if name in s.ir_excess]
        doc[name] = {
            "median_gap": report.median_gap(name),
            "median_iterations": float(np.median([s.iterations[name] for s in ok])) if ok else None,
            "worst_ir_excess": max(exc) if exc else None,
        }
    agree = [s.agreement for s in ok if s.agreement is not None]
    if agree:
        doc["max_pfb_admm_distance"] = max(agree)
    return doc


def cmd_report(args) -> int:
    path = args.path or args.out
    if path is None:
        raise ConfigError("report needs a report file")
    try:
        report = load_report(path)
    except (OSError, ValueError, KeyError) as err:
        raise ConfigError(f"cannot read report {path}: {err}") from err
    _emit(_digest(report))
    return EXIT_PARTIAL if report.failures else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--agents", type=int, default=10)
    common.add_argument("--sims", type=int, default=50)
    common.add_argument("--rho", type=float, default=0.1)
    common.add_argument("--iters", type=int, default=200)
    common.add_argument("--algo", default="pfb,admm,central")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out")
    common.add_argument("--scenario")
    common.add_argument("--steps", type=int)
    common.add_argument("--workers", type=int, default=1)
    common.add_argument("--no-gate", action="store_true", help="disable the IR gate")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="prosumer-gne", description=__doc__.split("\n\n")[0].strip())
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("generate", parents=[common], help="write one synthetic scenario")
    sub.add_parser("solve", parents=[common], help="run algorithms on a scenario file")
    sub.add_parser("batch", parents=[common], help="run a batch of generated scenarios")
    rep = sub.add_parser("report", parents=[common], help="summarise a batch report")
    rep.add_argument("path", nargs="?")
    return parser


COMMANDS = {"generate": cmd_generate, "solve": cmd_solve, "batch": cmd_batch, "report": cmd_report}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on bad usage already, keep --help at 0
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
