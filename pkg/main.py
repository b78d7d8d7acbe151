"""EVOLIM CLI - Command Line Interface for the chemostat eps-solver, its Hamilton-Jacobi limit and sweeps"""
import argparse
import logging
import os
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional

sys.path.insert(0, str(Path(__file__).parent))

from config import ENV_PREFIX, EXIT_CONFIG, EXIT_OK, SCENARIO_CONFIGS
from core import RunResult, report_sweep, run_scenario, validate_scenario
from Evolution.errors import EvolimError

# ANSI Colors
GREEN = "\033[92m"
YELLOW = "\033[93m"
CYAN = "\033[96m"
RED = "\033[91m"
BOLD = "\033[1m"
RESET = "\033[0m"

LOG_LEVELS = ("DEBUG", "INFO", "WARNING", "ERROR")


def env_default(name: str, fallback: Any = None, cast=str) -> Any:
    """Value of EVOLIM_<name> if set, else fallback."""
    raw = os.environ.get(f"{ENV_PREFIX}{name}")
    if raw is None or raw == "":
        return fallback
    try:
        return cast(raw)
    except ValueError:
        print(f"{YELLOW}[WARN] ignoring {ENV_PREFIX}{name}={raw!r}{RESET}")
        return fallback


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="evolim",
        description="Trait-structured chemostat: eps-level PDE, Hamilton-Jacobi limit and eps sweeps",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog=f"""
Examples:
  # Run a bundled scenario
  python main.py run scenarios/single_resource.scenario --out runs

  # Check a scenario without solving
  python main.py validate scenarios/two_resource.scenario

  # eps sweep against the limit, then re-read its report
  python main.py sweep scenarios/sweep.scenario --threads 3
  python main.py report runs/sweep

Environment: {ENV_PREFIX}OUT, {ENV_PREFIX}THREADS, {ENV_PREFIX}LOG_LEVEL, {ENV_PREFIX}SEED mirror the flags.
        """,
    )
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", "-o", help="Artifact root directory")
    common.add_argument("--threads", "-j", type=int, help="Worker threads for eps lists")
    common.add_argument("--log-level", choices=LOG_LEVELS, help="Logging level")
    common.add_argument("--seed", type=int, help="Seed for sampled structure checks")

    commands = parser.add_subparsers(dest="command", required=True)
    for name, text in (("run", "Run the solver the scenario selects"),
                       ("validate", "Schema and model checks without solving"),
                       ("sweep", "Run the scenario's eps list against the limit solve")):
        sub = commands.add_parser(name, parents=[common], help=text)
        sub.add_argument("scenario", help="Scenario file (*.scenario) or a bundled name")
    report = commands.add_parser("report", parents=[common], help="Summarise a sweep directory")
    report.add_argument("sweep_dir", help="Directory containing sweep_report.csv")
    return parser


def resolve_options(args: argparse.Namespace) -> Dict[str, Any]:
    """Flag > environment > scenario > default."""
    return {
        "out": args.out or env_default("OUT"),
        "threads": args.threads if args.threads is not None else env_default("THREADS", 1, int),
        "log_level": args.log_level or env_default("LOG_LEVEL", "WARNING", str.upper),
        "seed": args.seed if args.seed is not None else env_default("SEED", None, int),
    }


def resolve_scenario_path(name: str) -> Path:
    path = Path(name)
    if not path.exists() and name in SCENARIO_CONFIGS:
        return SCENARIO_CONFIGS[name]["file"]
    return path


# =============================================================================
# CONSOLE OUTPUT
# =============================================================================

def print_header(title: str) -> None:
    print(f"\n{BOLD}{'=' * 60}")
    print(f" {title}")
    print(f"{'=' * 60}{RESET}")


def print_run_result(result: RunResult) -> None:
    if result.ok:
        print(f"  {GREEN}[OK]{RESET} {len(result.artifacts)} artifacts in {result.run_dir}")
        for key, value in result.summary.items():
            print(f"  {CYAN}{key}:{RESET} {value}")
        return
    error = result.error or {}
    print(f"  {RED}[ERROR]{RESET} ({error.get('kind', 'error')}) {error.get('message', '')}")
    for problem in error.get("problems", []):
        print(f"         {problem}")
    if result.run_dir is not None:
        print(f"         report written to {result.run_dir / 'error.yaml'}")


def print_validation(report: Dict[str, Any]) -> None:
    structure = report["structure"]
    # (label, ok, required): a failed required check fails the scenario
    checks = [
        ("envelope decays at the grid ends", structure["envelope_ok"], True),
        ("every eta_i positive on every node", structure["positivity_ok"], True),
        ("positive excursions per sampled I", structure["roots_ok"], False),
        ("resource functions independent", structure["invertibility_ok"], False),
        ("initial profile below the barrier", report["initial_profile_ok"], True),
    ]
    for label, ok, required in checks:
        if ok:
            tag = f"{GREEN}[OK]{RESET}"
        else:
            tag = f"{RED}[ERROR]{RESET}" if required else f"{YELLOW}[WARN]{RESET}"
        print(f"  {tag} {label}")
    for message in report["warnings"]:
        print(f"         {message}")
    if report["initial_profile_message"]:
        print(f"         {report['initial_profile_message']}")


def print_sweep_summary(summary: Dict[str, Any]) -> None:
    rows: List[Dict[str, Any]] = summary.get("rows", [])
    if rows:
        print(f"\n  {'eps':>10} {'sup gap':>14} {'I gap L1':>14} {'width':>12}")
        for row in rows:
            print(f"  {row['eps']:>10.4g} {row['sup_norm_gap']:>14.6g} "
                  f"{row['I_gap_L1']:>14.6g} {row['concentration_width']:>12.6g}")
    print(f"\n  {CYAN}Fitted orders (log-log, informational):{RESET}")
    for metric, order in summary["orders"].items():
        text = "n/a" if order is None else f"{order:.3f}"
        tag = f"{GREEN}[OK]{RESET}" if summary["strictly_decreasing"][metric] else f"{YELLOW}[WARN]{RESET}"
        print(f"  {tag} {metric}: {text}")


# =============================================================================
# COMMANDS
# =============================================================================

def cmd_run(args: argparse.Namespace, options: Dict[str, Any], solver: Optional[str] = None) -> int:
    path = resolve_scenario_path(args.scenario)
    print_header(f"EVOLIM {solver or 'run'}: {path.name}")
    result = run_scenario(path, options["out"], options["threads"], solver=solver)
    print_run_result(result)
    return result.exit_code


def cmd_validate(args: argparse.Namespace, options: Dict[str, Any]) -> int:
    path = resolve_scenario_path(args.scenario)
    print_header(f"EVOLIM validate: {path.name}")
    try:
        report = validate_scenario(path, options["seed"])
    except EvolimError as exc:
        print(f"  {RED}[ERROR]{RESET} {exc}")
        for problem in getattr(exc, "problems", []):
            print(f"         {problem}")
        return EXIT_CONFIG
    print_validation(report)
    if not report["passed"]:
        print(f"\n  Scenario '{report['scenario']}' {RED}{BOLD}failed{RESET}")
        return EXIT_CONFIG
    structure = report["structure"]
    clean = structure["roots_ok"] and structure["invertibility_ok"]
    status = f"{GREEN}{BOLD}passed{RESET}" if clean else f"{YELLOW}{BOLD}passed with warnings{RESET}"
    print(f"\n  Scenario '{report['scenario']}' {status}")
    return EXIT_OK


def cmd_report(args: argparse.Namespace, options: Dict[str, Any]) -> int:
    print_header(f"EVOLIM report: {args.sweep_dir}")
    try:
        summary = report_sweep(args.sweep_dir)
    except EvolimError as exc:
        print(f"  {RED}[ERROR]{RESET} {exc}")
        return EXIT_CONFIG
    print_sweep_summary(summary)
    return EXIT_OK


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    options = resolve_options(args)
    level = options["log_level"] if options["log_level"] in LOG_LEVELS else "WARNING"
    logging.basicConfig(level=getattr(logging, level), format="%(levelname)s %(name)s: %(message)s")

    if args.command == "run":
        return cmd_run(args, options)
    if args.command == "sweep":
        return cmd_run(args, options, solver="sweep")
    if args.command == "validate":
        return cmd_validate(args, options)
    return cmd_report(args, options)


if __name__ == "__main__":
    sys.exit(main())
