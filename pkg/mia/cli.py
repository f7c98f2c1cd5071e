import argparse
import asyncio
import json
import logging
import sys
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

from .audit import Auditor, parse_grid
from .bundle_io import emit_bundle, ingest, load_bundle, read_performance
from .disparity import DetectionMode
from .ensemble import EnsembleSpec, EnsembleStrategy
from .record import validate_bundle
from .report import (
    render_analysis_svg,
    render_ensemble_svg,
    to_json,
    write_analysis_sidecars,
    write_ensemble_sidecars,
)
from .scorers import SCORERS, VarianceMode, score_bundle
from .simulator import SimConfig, generate
from .store.sqlite_store import SqliteRunStore
from .util import USAGE_ERROR_CODES, AuditError, AuditErrorCode, initialize_logging, load_config, write_atomic

log = logging.getLogger(__name__)

DEFAULT_CONFIG = Path("config.yaml")
EXIT_OK = 0
EXIT_INVALID = 1
EXIT_USAGE = 2


def _fpr_list(text: str) -> List[float]:
    try:
        values = [float(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")
    if len(values) == 0 or any(not 0 <= v <= 1 for v in values):
        raise argparse.ArgumentTypeError(f"FPRs must lie in [0, 1], got {text!r}")
    return values


def _name_list(text: str) -> List[str]:
    names = [part.strip() for part in text.split(",") if part.strip()]
    if len(names) == 0:
        raise argparse.ArgumentTypeError("expected at least one name")
    return names


def _positive_int(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}")
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {value}")
    return value


def _seed(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an unsigned 64-bit integer, got {text!r}")
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError(f"seed out of range: {value}")
    return value


def _grid(text: str):
    try:
        return parse_grid(text)
    except AuditError as e:
        raise argparse.ArgumentTypeError(e.message)


def _write_report(report: Dict, out: Path, name: str) -> Path:
    path = out / name
    write_atomic(path, to_json(report))
    print(path)
    return path


def _auditor(args, config: Dict) -> Auditor:
    store = SqliteRunStore(Path(args.store)) if getattr(args, "store", None) else None
    return Auditor(config, store)


async def _record_run(auditor: Auditor, report: Dict, label: str) -> int:
    await auditor.start()
    try:
        return await auditor.record_run(report, label)
    finally:
        await auditor.stop()


async def _history(auditor: Auditor, label: str) -> Dict:
    await auditor.start()
    try:
        return await auditor.history(label)
    finally:
        await auditor.stop()


def cmd_simulate(args, config: Dict) -> int:
    sim_config = load_config(args.sim_config) if args.sim_config else {}
    if args.seed is not None:
        sim_config["seed"] = args.seed
    bundle = generate(SimConfig.from_dict(sim_config))
    print(emit_bundle(bundle, args.out))
    return EXIT_OK


def cmd_score(args, config: Dict) -> int:
    bundle = ingest(args.manifest)
    scored = score_bundle(bundle, args.scorers, VarianceMode(args.variance), args.prefix)
    print(emit_bundle(scored, args.out))
    return EXIT_OK


def cmd_validate(args, config: Dict) -> int:
    violations = validate_bundle(load_bundle(args.manifest))
    if violations:
        details = [v.to_dict() for v in violations]
        error = AuditError(AuditErrorCode.VALIDATION_FAILED, f"{len(violations)} invariant violation(s)", details)
        print(json.dumps(error.to_dict(), indent=2), file=sys.stderr)
        return EXIT_INVALID
    print(json.dumps({"valid": True}))
    return EXIT_OK


def cmd_analyze(args, config: Dict) -> int:
    auditor = _auditor(args, config)
    bundle = ingest(args.manifest)
    report = auditor.run_analysis(
        bundle,
        fprs=args.fpr,
        n_instances=args.instances,
        mode=args.mode,
        attacks=args.attacks,
        order_seed=args.seed,
    )
    out = Path(args.out)
    _write_report(report, out, "analysis.json")
    write_analysis_sidecars(report, out)
    if args.svg:
        render_analysis_svg(report, out)
    if args.label:
        asyncio.run(_record_run(auditor, report, args.label))
    return EXIT_OK


def cmd_ensemble(args, config: Dict) -> int:
    auditor = _auditor(args, config)
    bundle = ingest(args.manifest)
    if args.spec:
        file_spec = EnsembleSpec.from_dict(load_config(args.spec))
        spec = auditor.ensemble_spec(
            bundle,
            attacks=args.attacks or file_spec.attacks,
            n_instances=args.instances or file_spec.n_instances,
            grid=args.grid or file_spec.fpr_grid,
            strategy=file_spec.strategy,
        )
        strategies = [EnsembleStrategy(args.strategy)] if args.strategy else [file_spec.strategy]
    else:
        spec = auditor.ensemble_spec(bundle, attacks=args.attacks, n_instances=args.instances, grid=args.grid)
        strategies = [EnsembleStrategy(args.strategy)] if args.strategy else None
    report = auditor.run_ensemble(bundle, spec, strategies, args.combinations or None)
    out = Path(args.out)
    _write_report(report, out, "ensemble.json")
    write_ensemble_sidecars(report, out)
    if args.svg:
        render_ensemble_svg(report, out)
    return EXIT_OK


def cmd_cost(args, config: Dict) -> int:
    if args.costs:
        config = dict(config, costs=load_config(args.costs))
    auditor = _auditor(args, config)
    report = auditor.run_cost(read_performance(args.performance))
    _write_report(report, Path(args.out), "cost.json")
    return EXIT_OK


def cmd_history(args, config: Dict) -> int:
    auditor = _auditor(args, config)
    report = asyncio.run(_history(auditor, args.label))
    _write_report(report, Path(args.out), f"history_{args.label}.json")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mia", description="Disparity analysis of membership inference attacks.")
    parser.add_argument("--config", help=f"audit configuration (default: {DEFAULT_CONFIG} if present)")
    subparsers = parser.add_subparsers(dest="command", required=True)

    def add(name: str, handler: Callable, help_text: str) -> argparse.ArgumentParser:
        sub = subparsers.add_parser(name, help=help_text)
        sub.set_defaults(handler=handler)
        return sub

    simulate = add("simulate", cmd_simulate, "generate a synthetic bundle")
    simulate.add_argument("--sim-config", help="SimConfig file (YAML or JSON); defaults when omitted")
    simulate.add_argument("--seed", type=_seed, help="overrides the SimConfig seed")
    simulate.add_argument("--out", required=True, help="bundle directory")

    score = add("score", cmd_score, "derive score matrices from loss and confidence signals")
    score.add_argument("--manifest", required=True)
    score.add_argument("--scorers", type=_name_list, default=list(SCORERS), help=f"subset of {','.join(SCORERS)}")
    score.add_argument("--variance", choices=[m.value for m in VarianceMode], default=VarianceMode.PER_SAMPLE.value)
    score.add_argument("--prefix", default="", help="prefix for the new attack names")
    score.add_argument("--out", required=True, help="directory for the extended bundle")

    validate = add("validate", cmd_validate, "check a bundle against its invariants")
    validate.add_argument("--manifest", required=True)

    analyze = add("analyze", cmd_analyze, "consistency, coverage, stability and similarity report")
    analyze.add_argument("--manifest", required=True)
    analyze.add_argument("--fpr", type=_fpr_list, help="target FPRs, comma-separated")
    analyze.add_argument("--instances", type=_positive_int)
    analyze.add_argument("--mode", choices=[m.value for m in DetectionMode])
    analyze.add_argument("--attacks", type=_name_list)
    analyze.add_argument("--seed", type=_seed, help="shuffles the instance order of convergence curves")
    analyze.add_argument("--out", required=True)
    analyze.add_argument("--svg", action="store_true")
    analyze.add_argument("--store", help="run history database")
    analyze.add_argument("--label", help="record the report in the run history under this label")

    ensemble = add("ensemble", cmd_ensemble, "ensemble ROC sweeps")
    ensemble.add_argument("--manifest", required=True)
    ensemble.add_argument("--spec", help="EnsembleSpec file (YAML or JSON)")
    ensemble.add_argument("--strategy", choices=[s.value for s in EnsembleStrategy])
    ensemble.add_argument("--attacks", type=_name_list)
    ensemble.add_argument("--instances", type=_positive_int)
    ensemble.add_argument("--grid", type=_grid, help="lo,hi,count of the log-spaced FPR grid")
    ensemble.add_argument("--combinations", action="store_true", help="also sweep every attack subset")
    ensemble.add_argument("--out", required=True)
    ensemble.add_argument("--svg", action="store_true")

    cost = add("cost", cmd_cost, "cost vs performance frontier")
    cost.add_argument("--performance", required=True, help="CSV with attacks,n_instances,performance")
    cost.add_argument("--costs", help="cost table file; defaults to the config's costs section")
    cost.add_argument("--out", required=True)

    history = add("history", cmd_history, "average the stored runs of a label")
    history.add_argument("--label", required=True)
    history.add_argument("--store", help="run history database")
    history.add_argument("--out", required=True)
    return parser


def _load_audit_config(path: Optional[str]) -> Dict:
    if path is not None:
        if not Path(path).exists():
            raise AuditError(AuditErrorCode.INVALID_CONFIG, f"Config file {path} does not exist.")
        return load_config(path)
    return load_config(DEFAULT_CONFIG, required=False)


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code in (0, None) else EXIT_USAGE

    try:
        config = _load_audit_config(args.config)
        logging_config: Dict = config.get("logging") or {}
        initialize_logging("mia", logging_config, Path(logging_config.get("log_path", ".")))
        return args.handler(args, config)
    except AuditError as e:
        log.error(f"{args.command} failed: {e.message}")
        print(json.dumps(e.to_dict(), indent=2), file=sys.stderr)
        if e.code in USAGE_ERROR_CODES:
            return EXIT_USAGE
        return EXIT_INVALID


def main_entry():
    sys.exit(main())


if __name__ == "__main__":
    main_entry()
