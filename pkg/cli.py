"""
Linha de comando: run, sweep e decompose.
Códigos de saída: 0 sucesso, 2 erro de uso, 1 falha em execução.
"""
import argparse
import json
import sys
from pathlib import Path
from typing import List, Optional

from loguru import logger

from app import (
    VERSION,
    decompose_report,
    execute_run,
    execute_sweep,
    format_decomposition,
    load_config,
    output_root,
    read_matrix,
    setup_logger,
    tau_grid,
)
from services.errors import ConfigurationError, SchedulingError, SimulationAborted


EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2


class UsageError(Exception):
    pass


class ArgumentParser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = ArgumentParser(prog="syl-sim", description="Schedule-as-you-learn scheduling simulator")
    parser.add_argument("--version", action="version", version=f"%(prog)s {VERSION}")
    parser.add_argument("--log-level", default=None, help="loguru level for the stderr sink")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=ArgumentParser)

    run = sub.add_parser("run", help="simulate every policy of a config on one arrival path")
    run.add_argument("--config", required=True, help="experiment config (YAML)")
    run.add_argument("--seed", type=int, default=None, help="override the config seed")
    run.add_argument("--out", default=None, help="output directory (default $SYL_SIM_OUT/<config name>)")
    run.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")
    run.add_argument("--plot-scripts", action="store_true", help="emit gnuplot scripts next to the CSVs")

    sweep = sub.add_parser("sweep", help="sweep the load factor tau")
    sweep.add_argument("--config", required=True, help="experiment config (YAML)")
    sweep.add_argument("--tau-from", type=float, default=None)
    sweep.add_argument("--tau-to", type=float, default=None)
    sweep.add_argument("--step", type=float, default=None)
    sweep.add_argument("--policies", nargs="+", default=None, help="policy names from the config")
    sweep.add_argument("--seeds", nargs="+", type=int, default=None)
    sweep.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    sweep.add_argument("--out", default=None)
    sweep.add_argument("--force", action="store_true")
    sweep.add_argument("--plot-scripts", action="store_true")

    decompose = sub.add_parser("decompose", help="membership, capacity margin and Birkhoff decomposition")
    decompose.add_argument("matrix_file", help="n x n matrix, whitespace separated rows")
    decompose.add_argument("--margin", action="store_true", help="also report eta* of the matrix as an arrival rate")
    decompose.add_argument("--lam", default=None, help="arrival-rate matrix file for eta*")
    decompose.add_argument("--json", action="store_true", help="print the report as JSON")
    return parser


def default_out(config_path: str, name: Optional[str]) -> Path:
    return output_root() / (name or Path(config_path).stem)


def cmd_run(args) -> int:
    config = load_config(args.config)
    if args.seed is not None:
        if args.seed < 0:
            raise ConfigurationError("seed must be non-negative")
        config = config.copy(update={"seed": args.seed})
    out = args.out or default_out(args.config, config.name)
    results = execute_run(config, out, config_path=args.config, force=args.force, plot_scripts=args.plot_scripts)
    for result in results:
        print(f"{result.policy}: mean backlog {result.mean_backlog:.6f}, final backlog {result.final_backlog}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    config = load_config(args.config)
    bounds = (args.tau_from, args.tau_to, args.step)
    if any(value is not None for value in bounds):
        if any(value is None for value in bounds):
            raise ConfigurationError("--tau-from, --tau-to and --step go together")
        taus = tau_grid(*bounds)
    elif config.sweep is not None:
        taus = config.sweep.taus
    else:
        taus = [config.traffic.tau]
    if args.seeds is not None:
        seeds = args.seeds
    elif config.sweep is not None:
        seeds = config.sweep.seeds
    else:
        seeds = [config.seed]
    if args.jobs < 1:
        raise ConfigurationError("--jobs must be at least 1")
    out = args.out or default_out(args.config, config.name)
    _, summary = execute_sweep(config, out, taus, seeds, policies=args.policies, jobs=args.jobs,
                               config_path=args.config, force=args.force, plot_scripts=args.plot_scripts)
    print(summary.to_string(index=False))
    return EXIT_OK


def cmd_decompose(args) -> int:
    matrix = read_matrix(args.matrix_file)
    lam = read_matrix(args.lam) if args.lam else (matrix if args.margin else None)
    report = decompose_report(matrix, lam)
    print(json.dumps(report) if args.json else format_decomposition(report))
    return EXIT_OK


COMMANDS = {"run": cmd_run, "sweep": cmd_sweep, "decompose": cmd_decompose}


def error_record(kind: str, message: str, code: int, **extra) -> str:
    return json.dumps({"error": kind, "message": message, "exit_code": code, **extra})


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(error_record("UsageError", str(e), EXIT_USAGE), file=sys.stderr)
        return EXIT_USAGE
    setup_logger(level=args.log_level)
    try:
        return COMMANDS[args.command](args)
    except ConfigurationError as e:
        logger.error("Usage error: {}", str(e))
        print(error_record(type(e).__name__, str(e), EXIT_USAGE), file=sys.stderr)
        return EXIT_USAGE
    except SimulationAborted as e:
        logger.error("Simulation aborted at slot {}: {}", e.slot, str(e))
        print(error_record(type(e).__name__, str(e), EXIT_RUNTIME, slot=e.slot), file=sys.stderr)
        return EXIT_RUNTIME
    except (SchedulingError, OSError) as e:
        logger.error("Command '{}' failed: {}", args.command, str(e))
        print(error_record(type(e).__name__, str(e), EXIT_RUNTIME), file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
