"""Entry point for the conformal Ricci flow frequency lab.

Usage:
    # Full pipeline: flow, conjugate and heat passes, frequency and audits
    crf-lab run flat-rigidity

    # Auditor identities only
    crf-lab audit flat-uniform

    # Refinement slope table
    crf-lab converge conformal-ricci-oracle

    # First nonzero drifting-Laplacian eigenvalue
    crf-lab eigen flat-uniform

Scenarios are bundled names (see scenarios/README.md) or paths to .env files.
Exit codes: 0 pass, 1 failed check, 2 configuration error, 3 runtime abort.
"""

import argparse
import logging
import sys
from pathlib import Path

from src.config import LOG_LEVEL

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_CONFIG = 2
EXIT_ABORT = 3


def _summarize(outcome) -> int:
    for entry in outcome.checks:
        mark = "ok" if entry.passed else "FAILED"
        print(f"    {entry.name:<28} {entry.residual:.3e} / {entry.tolerance:.1e}  {mark}")
    print(f">>> Artifacts in {outcome.payload.get('output')}")
    if outcome.passed:
        print(">>> All checks passed")
        return EXIT_OK
    failed = [c.name for c in outcome.checks if not c.passed]
    print(f">>> {len(failed)} check(s) failed: {', '.join(failed)}")
    return EXIT_FAILED


def run_command(command: str, scenario: str, output_dir: Path | None) -> int:
    from src.elliptic import PressureViolation, SolverError
    from src.flow import FlowAbort
    from src.pipeline import audit_scenario, converge_scenario, eigen_scenario, run_scenario
    from src.scenario import ConfigError, load_scenario

    handlers = {
        "run": run_scenario,
        "audit": audit_scenario,
        "converge": converge_scenario,
        "eigen": eigen_scenario,
    }
    try:
        config = load_scenario(scenario)
        print(f">>> Scenario {config.name}: {command}")
        outcome = handlers[command](config, output_dir)
    except ConfigError as exc:
        print(f"Error: invalid scenario: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FlowAbort, SolverError, PressureViolation) as exc:
        print(f"Error: run aborted: {exc}", file=sys.stderr)
        print(">>> Partial artifacts flushed with status 'aborted'")
        return EXIT_ABORT
    return _summarize(outcome)


def main(argv: list[str] | None = None) -> None:
    parser = argparse.ArgumentParser(description="Conformal Ricci flow parabolic-frequency lab")
    parser.add_argument(
        "--log-level",
        default=LOG_LEVEL,
        help=f"Logging level (default: {LOG_LEVEL})",
    )
    parser.add_argument(
        "--output-dir",
        type=Path,
        help="Directory for artifacts (default: the scenario's OUTPUT_DIR)",
    )
    commands = parser.add_subparsers(dest="command", required=True)
    for name, text in (
        ("run", "Run a scenario end to end"),
        ("audit", "Run the identity audits only"),
        ("converge", "Run refinement studies and write the slope table"),
        ("eigen", "Compute the first nonzero drifting-Laplacian eigenpair"),
    ):
        sub = commands.add_parser(name, help=text)
        sub.add_argument("scenario", help="Bundled scenario name or path to a scenario file")
    args = parser.parse_args(argv)

    logging.basicConfig(
        level=args.log_level.upper(),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    sys.exit(run_command(args.command, args.scenario, args.output_dir))


if __name__ == "__main__":
    main()
