"""Command-line front end.

Three subcommands: `run` sweeps attack scenarios against defense modes and
writes CSV artifacts, `sim` executes one assembly program and dumps its
trace, `analyze` emits the static analysis sidecar (safe sets and path
profiles) for a program.

Exit codes: 0 ok, 1 usage or config error, 2 simulation fault (cycle
limit), 3 security-property violation (a cell that promised
secret-independent observations leaked).
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path

from .analysis import (
    AnalysisError,
    analyze_all_branches,
    compute_safe_sets,
    dump_analysis,
    load_analysis,
)
from .core import BranchPredictor, MachineConfig, SimulationLimitError, Simulator
from .defenses import DefenseMode, DefensePolicy, Mitigation
from .experiment import (
    EXIT_SIM_FAULT,
    EXIT_USAGE,
    ConfigError,
    config_from_mapping,
    load_config_file,
    mitigation_label,
    parse_mitigation_set,
    run_experiment,
)
from .isa import ParseError, parse_program
from .scenarios import ScenarioError


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # argparse defaults to exit code 2
        self.print_usage(sys.stderr)
        raise _UsageError(message)


class _UsageError(Exception):
    pass


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="robsim", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="sweep scenarios x defenses, write CSV artifacts")
    run.add_argument("--config", help="YAML experiment config")
    run.add_argument(
        "--scenario",
        action="append",
        default=None,
        help="scenario name (repeatable; overrides config)",
    )
    run.add_argument("--defense", help="defense mode (overrides config)")
    run.add_argument(
        "--mitigation",
        action="append",
        default=None,
        help="mitigation name (repeatable; combined into one set)",
    )
    run.add_argument("--trials", type=int, help="trials per cell and secret")
    run.add_argument("--seed", type=int, help="jitter seed base")
    run.add_argument("--jitter", type=int, help="+/- cycles on miss latency")
    run.add_argument("--out", help="output directory")

    sim = sub.add_parser("sim", help="run one assembly program, dump the trace")
    sim.add_argument("program", help="assembly file")
    sim.add_argument("--defense", default="unprotected", help="defense mode")
    sim.add_argument(
        "--mitigation", action="append", default=None, help="mitigation (repeatable)"
    )
    sim.add_argument(
        "--safe-sets",
        help="analysis sidecar file; dom_plus_invarspec computes one when absent",
    )
    sim.add_argument("--trace", help="write the uop lifecycle CSV here")
    sim.add_argument("--occupancy", help="write the per-cycle occupancy CSV here")
    sim.add_argument("--max-cycles", type=int, help="abort after this many cycles")

    analyze = sub.add_parser(
        "analyze", help="emit the safe-set / path-profile sidecar for a program"
    )
    analyze.add_argument("program", help="assembly file")
    analyze.add_argument("--out", help="sidecar path (default stdout)")
    return parser


def _load_program(path: str):
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read program {path}: {exc}") from None
    return parse_program(text)


def _cmd_run(args: argparse.Namespace) -> int:
    mapping = load_config_file(args.config) if args.config else {}
    if args.scenario:
        mapping["scenarios"] = args.scenario
    if args.defense:
        mapping["defenses"] = [args.defense]
    if args.mitigation is not None:
        mapping["mitigations"] = ["+".join(args.mitigation) or "none"]
    if args.trials is not None:
        mapping["trials"] = args.trials
    if args.seed is not None:
        mapping["seed"] = args.seed
    if args.jitter is not None:
        mapping["jitter"] = args.jitter
    config = config_from_mapping(mapping, Path(args.out) if args.out else None)
    result = run_experiment(config)
    for cell in result.cells:
        label = mitigation_label(cell.mitigations)
        tag = cell.status
        if cell.violation:
            tag = "VIOLATION"
        elif cell.leak:
            tag = "leak"
        elif cell.status == "ok":
            tag = "clean"
        print(f"{cell.scenario} x {cell.defense.value} x {label}: {tag}")
    print(f"artifacts in {config.out_dir}")
    return result.exit_code


def _cmd_sim(args: argparse.Namespace) -> int:
    program = _load_program(args.program)
    mode = DefenseMode(args.defense)
    mitigations = parse_mitigation_set(args.mitigation or [])
    if Mitigation.PATH_BALANCING in mitigations:
        raise ConfigError("sim runs programs as written; balance them via analyze/run")
    safe_sets = None
    if args.safe_sets:
        try:
            safe_sets, _ = load_analysis(Path(args.safe_sets).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read sidecar: {exc}") from None
    if mode is DefenseMode.DOM_PLUS_INVARSPEC and safe_sets is None:
        safe_sets = compute_safe_sets(program)
    policy = DefensePolicy(mode=mode, mitigations=mitigations, safe_sets=safe_sets)
    machine = MachineConfig()
    if args.max_cycles is not None:
        machine = dataclasses.replace(
            machine, core=dataclasses.replace(machine.core, max_cycles=args.max_cycles)
        )
    sim = Simulator(program, machine, policy, BranchPredictor())
    trace = sim.run()
    if args.trace:
        Path(args.trace).write_text(trace.to_csv())
    if args.occupancy:
        Path(args.occupancy).write_text(trace.occupancy_csv())
    committed = sum(1 for r in trace.records if r.commit_cycle is not None)
    print(
        f"{len(trace.occupancy)} cycles, {committed} uops committed, "
        f"peak occupancy {trace.stats.peak_occupancy}"
    )
    return 0


def _cmd_analyze(args: argparse.Namespace) -> int:
    program = _load_program(args.program)
    safe_sets = compute_safe_sets(program)
    profiles = analyze_all_branches(program)
    text = dump_analysis(safe_sets, profiles)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command == "run":
            return _cmd_run(args)
        if args.command == "sim":
            return _cmd_sim(args)
        return _cmd_analyze(args)
    except _UsageError as exc:
        print(f"robsim: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ConfigError, ScenarioError, AnalysisError, ParseError) as exc:
        print(f"robsim: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ValueError as exc:
        print(f"robsim: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SimulationLimitError as exc:
        print(f"robsim: simulation fault: {exc}", file=sys.stderr)
        return EXIT_SIM_FAULT


if __name__ == "__main__":
    sys.exit(main())
