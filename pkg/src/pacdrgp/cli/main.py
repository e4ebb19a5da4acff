from __future__ import annotations

import argparse
import logging
import sys
from collections.abc import Sequence
from pathlib import Path

from dotenv import load_dotenv

_REPO_ROOT = Path(__file__).resolve().parents[3]

load_dotenv(_REPO_ROOT / ".env", override=False)

from pacdrgp import settings  # noqa: E402
from pacdrgp.container import build_services  # noqa: E402
from pacdrgp.domain.experiment_models import ExperimentConfig  # noqa: E402
from pacdrgp.domain.optimization import TrainingConfig  # noqa: E402
from pacdrgp.domain.pac_bounds import BoundVariant, LambdaRule  # noqa: E402
from pacdrgp.domain.revarb_model import SpectrumMode, generate_quasi_real, parse_mode  # noqa: E402
from pacdrgp.services.run_manifest import write_run_manifest  # noqa: E402

logger = logging.getLogger("pacdrgp.cli")


def _log_progress(payload: dict) -> None:
    stage = payload.get("stage")
    details = " ".join(f"{key}={value}" for key, value in payload.items() if key != "stage")
    level = logging.DEBUG if stage in {"iteration", "refresh", "point_done"} else logging.INFO
    logger.log(level, "%s %s", stage, details)


def _parse_grid(value: str) -> tuple[int, ...]:
    try:
        return tuple(int(part) for part in value.split(",") if part.strip())
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"grid must be comma-separated integers: {value!r}") from exc


def _add_model_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--dataset", type=Path, default=settings.DATASET_PATH, help="time-series CSV (t,u_1..,y)")
    parser.add_argument("--output-dir", type=Path, default=settings.OUTPUT_DIR)
    parser.add_argument("--model", type=Path, default=None, help="model document to load, or to write after training")
    parser.add_argument(
        "--mode", type=parse_mode, choices=list(SpectrumMode), default=SpectrumMode.SS, metavar="{SS,VSS}"
    )
    parser.add_argument("--layers", type=int, default=1, help="number of hidden layers L")
    parser.add_argument("--features", type=int, default=16, help="spectral features M per layer")
    parser.add_argument("--hx", type=int, default=1, help="exogenous time horizon")
    parser.add_argument("--hh", type=int, default=1, help="latent time horizon")
    parser.add_argument("--states", type=int, default=None, help="use the first K rows of the dataset")
    parser.add_argument("--lr", type=float, default=1e-2)
    parser.add_argument("--iterations", type=int, default=2000)
    parser.add_argument("--refresh-every", type=int, default=10, help="closed-form weight refresh period, 0 disables")
    parser.add_argument("--seed", type=int, default=settings.SEED)


def _add_bound_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--tau", type=float, default=settings.TAU)
    parser.add_argument("--lambda", dest="lambda_rule", choices=[rule.value for rule in LambdaRule], default=LambdaRule.SQRT_N.value)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pacdrgp", description="PAC-Bayesian bounds for deep recurrent GPs")
    commands = parser.add_subparsers(dest="command", required=True)

    train = commands.add_parser("train", help="fit a model and write its document")
    _add_model_flags(train)

    curve = commands.add_parser("bound-curve", help="sweep a bound over N and write CSV, SVG and manifest")
    _add_model_flags(curve)
    _add_bound_flags(curve)
    curve.add_argument("--variant", choices=[variant.value for variant in BoundVariant], default=BoundVariant.THEOREM3.value)
    curve.add_argument("--two-sided", action="store_true")
    curve.add_argument("--n-max", type=int, default=settings.N_MAX)
    curve.add_argument("--grid-points", type=int, default=settings.GRID_POINTS)
    curve.add_argument("--grid", type=_parse_grid, default=None, help="explicit N values, e.g. 10,100,1000")

    gen = commands.add_parser("gen-data", help="draw quasi-real observations from a model")
    _add_model_flags(gen)
    gen.add_argument("--num-samples", type=int, default=100)
    gen.add_argument("--output", type=Path, default=None)

    for name, default_samples, default_instances in (("psi-check", 1_000_000, 20), ("mgf-check", 10_000_000, 10)):
        check = commands.add_parser(name, help="compare closed forms with Monte Carlo")
        check.add_argument("--seed", type=int, default=settings.SEED)
        check.add_argument("--samples", type=int, default=default_samples)
        check.add_argument("--instances", type=int, default=default_instances)

    report = commands.add_parser("report", help="table of every bound variant at one N")
    _add_model_flags(report)
    _add_bound_flags(report)
    report.add_argument("--n", type=int, default=1000)
    return parser


def _experiment_config(args: argparse.Namespace) -> ExperimentConfig:
    extra = {}
    if args.command == "bound-curve":
        extra = {
            "variant": BoundVariant(args.variant),
            "two_sided": args.two_sided,
            "n_max": args.n_max,
            "grid_points": args.grid_points,
            "grid": args.grid,
        }
    if hasattr(args, "tau"):
        extra["tau"] = args.tau
        extra["lambda_rule"] = LambdaRule(args.lambda_rule)
    return ExperimentConfig(
        dataset_path=args.dataset,
        output_dir=args.output_dir,
        mode=args.mode,
        num_hidden_layers=args.layers,
        num_features=args.features,
        horizon_x=args.hx,
        horizon_h=args.hh,
        num_states=args.states,
        training=TrainingConfig(
            learning_rate=args.lr,
            iterations=args.iterations,
            refresh_every=args.refresh_every,
        ),
        seed=args.seed,
        model_path=args.model,
        **extra,
    )


def _run(args: argparse.Namespace) -> int:
    services = build_services()
    if args.command in {"psi-check", "mgf-check"}:
        oracle = services["oracle_check_service"]
        if args.command == "psi-check":
            report = oracle.psi_check(args.seed, args.samples, args.instances)
        else:
            report = oracle.mgf_check(args.seed, args.samples, args.instances)
        sys.stdout.write(report.render())
        return 0 if report.passed else 1

    config = _experiment_config(args)
    if args.command == "train":
        result, path = services["training_service"].train_and_save(config, progress_callback=_log_progress)
        write_run_manifest(
            services["artifacts"],
            config,
            command="train",
            model_path=path,
            model_trained_in_run=True,
            outputs=[path],
            extra={"initial_bound": result.initial_bound, "final_bound": result.final_bound},
        )
        print(f"bound {result.initial_bound:.6f} -> {result.final_bound:.6f}")
        print(f"model written to {path}")
        return 0
    if args.command == "bound-curve":
        result = services["bound_evolution_service"].run(config, progress_callback=_log_progress)
        print(result.sparkline)
        first, last = result.records[0], result.records[-1]
        print(f"N={first.N}: {first.bound_value:.6f}  N={last.N}: {last.bound_value:.6f}")
        print(f"wrote {result.csv_path}, {result.svg_path}, {result.manifest_path}")
        return 0
    if args.command == "gen-data":
        prepared = services["training_service"].load_or_train(config, progress_callback=_log_progress)
        samples = generate_quasi_real(prepared.model, args.num_samples, config.seed)
        target = args.output or config.output_dir / "quasi_real.csv"
        services["artifacts"].write_samples(samples, target)
        write_run_manifest(
            services["artifacts"],
            config,
            command="gen-data",
            model_path=prepared.model_path,
            model_trained_in_run=prepared.trained,
            outputs=[target],
            extra={"num_samples": args.num_samples},
        )
        print(f"wrote {samples.shape[1]} samples of K={samples.shape[0]} states to {target}")
        return 0
    content, path = services["report_service"].write_report(config, args.n, progress_callback=_log_progress)
    sys.stdout.write(content)
    logger.info("report written to %s", path)
    return 0


def cli_dispatch(argv: Sequence[str]) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(list(argv))
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return _run(args)
    except (ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> int:
    logging.basicConfig(
        level=getattr(logging, settings.LOG_LEVEL, logging.INFO),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    return cli_dispatch(sys.argv[1:])


if __name__ == "__main__":
    raise SystemExit(main())
