"""
Command-line entry point: run experiments, check oracles, generate
instances and rebuild reports.
"""

import argparse
import json
import logging
import sys
from pathlib import Path

from .exceptions import PrincipalLabError
from .harness import ALGORITHMS, INSTANCE_SOURCES, ExperimentConfig, report, run
from .model import save_instance

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(funcName)s - %(message)s"

# Flags that map one-to-one onto ExperimentConfig fields.
CONFIG_FLAGS: dict[str, dict] = {
    "instance": {"choices": INSTANCE_SOURCES, "help": "Instance source"},
    "instance_file": {"help": "Instance JSON for --instance file"},
    "n_types": {"type": int, "help": "Number of agent types"},
    "n_actions": {"type": int, "help": "Number of principal decisions d"},
    "n_agent_actions": {"type": int, "help": "Number of agent actions"},
    "n_outcomes": {"type": int, "help": "Number of outcomes"},
    "instance_seed": {"type": int, "help": "Seed of random and separated instances"},
    "agent": {"help": "exact_myopic, slack_adversarial or scripted"},
    "slack_scale": {"type": float, "help": "Multiplier on the agent's delay slack"},
    "algorithm": {"choices": ALGORITHMS, "help": "Learner to run"},
    "horizons": {"type": int, "nargs": "+", "help": "Horizons T (accuracy n for estimation_only)"},
    "replications": {"type": int, "help": "Replications per horizon"},
    "base_seed": {"type": int, "help": "Base seed of every replication"},
    "t_sec": {"type": int, "help": "Rounds per sector test"},
    "eps_target": {"type": float, "help": "Angle accuracy target"},
    "margin": {"type": float, "help": "Strict IC margin"},
    "radius": {"type": float, "help": "Pessimism radius"},
    "lam": {"type": float, "help": "Ridge regularization"},
    "delta": {"type": float, "help": "Confidence level of the ellipsoids"},
    "fail_prob": {"type": float, "help": "Failure probability of each sector test"},
    "f_min_hint": {"type": float, "help": "Assumed smallest type probability"},
    "fallback": {"choices": ("abort", "raise"), "help": "Reaction to a failed Stage I"},
    "curve_points": {"type": int, "help": "Points per regret curve"},
    "workers": {"type": int, "help": "Worker processes"},
    "output_dir": {"help": "Directory for result files"},
}


def setup_logging(level: str = "INFO", log_file: str | None = None) -> None:
    """
    Configure root logging for a command.

    Args:
        level (str): Level name
        log_file (str | None): Optional file that receives the same records
    """
    handlers: list[logging.Handler] = [logging.StreamHandler(sys.stdout)]
    if log_file:
        Path(log_file).parent.mkdir(parents=True, exist_ok=True)
        handlers.append(logging.FileHandler(log_file))
    logging.basicConfig(level=level.upper(), format=LOG_FORMAT, handlers=handlers, force=True)


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="JSON config; explicit flags override it")
    for name, options in CONFIG_FLAGS.items():
        parser.add_argument(f"--{name.replace('_', '-')}", dest=name, default=None, **options)
    parser.add_argument("--trace", action="store_true", default=None, help="Write trace.jsonl and rounds.csv")
    parser.add_argument(
        "--round-log", dest="round_log", action="store_true", default=None, help="Write rounds.csv"
    )
    parser.add_argument(
        "--oracles", action="store_true", default=None, help="Run the oracle suite after the experiment"
    )


def config_from_args(args: argparse.Namespace) -> ExperimentConfig:
    """Config file (or defaults) overlaid with every flag given on the command line."""
    payload = ExperimentConfig.load(args.config).to_dict() if args.config else {}
    for name in list(CONFIG_FLAGS) + ["trace", "round_log", "oracles"]:
        value = getattr(args, name, None)
        if value is not None:
            payload[name] = value
    return ExperimentConfig.from_dict(payload)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="principal-lab",
        description="Online learning laboratory for the generalized principal-agent model",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  # Regret of the known-horizon learner on the reference instance
  principal-lab run --algorithm known_T --horizons 1024 4096 16384 --replications 20

  # Same experiment from a saved config with 8 workers
  principal-lab run --config experiment.json --workers 8

  # Ground-truth checks, acceptance scale
  principal-lab oracle --full

  # Rebuild report.json and regret.svg of a finished run
  principal-lab report results
""",
    )
    parser.add_argument("--log-level", default="INFO", help="Logging level (default: INFO)")
    parser.add_argument("--log-file", default=None, help="Also log to this file")
    sub = parser.add_subparsers(dest="command", required=True)

    run_parser = sub.add_parser("run", help="Run an experiment")
    _add_config_flags(run_parser)

    oracle_parser = sub.add_parser("oracle", help="Run the oracle suite")
    _add_config_flags(oracle_parser)
    oracle_parser.add_argument("--full", action="store_true", help="Acceptance-scale sample sizes")
    oracle_parser.add_argument("--json", dest="json_out", default=None, help="Write the oracle report here")

    gen_parser = sub.add_parser("gen-instance", help="Write an instance as JSON")
    _add_config_flags(gen_parser)
    gen_parser.add_argument("path", help="Output JSON path")

    report_parser = sub.add_parser("report", help="Rebuild the report of a finished run")
    report_parser.add_argument("output_dir", help="Directory holding summary.csv and curves.csv")
    return parser


def main(argv: list[str] | None = None) -> int:
    """
    Returns:
        int: 0 on success; 1 if an oracle failed; 2 on a configuration or run error
    """
    args = build_parser().parse_args(argv)
    setup_logging(args.log_level, args.log_file)
    try:
        match args.command:
            case "run":
                config = config_from_args(args)
                result = run(config)
                logger.info(f"Regret slope {result.get('regret_slope')}")
                oracles = result.get("oracles")
                return 0 if oracles is None or oracles["passed"] else 1
            case "oracle":
                from .oracles import oracle_suite

                config = config_from_args(args)
                config.validate()
                suite = oracle_suite(config, scale="full" if args.full else "quick")
                if args.json_out:
                    Path(args.json_out).write_text(json.dumps(suite.to_dict(), indent=2, default=float))
                for result in suite.results:
                    print(f"{'PASS' if result.passed else 'FAIL'}  {result.name}  {result.detail}")
                return 0 if suite.passed else 1
            case "gen-instance":
                config = config_from_args(args)
                config.validate()
                inst, _ = config.build_instance()
                save_instance(inst, args.path)
                return 0
            case "report":
                report(args.output_dir)
                return 0
    except PrincipalLabError as e:
        logger.error(f"{args.command} failed: {e}")
        return 2
    return 2


if __name__ == "__main__":
    sys.exit(main())
