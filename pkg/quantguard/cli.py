"""Command-line driver: ``python -m quantguard <command> ...``.

Exit codes are part of the interface: 0 solved / all equivalent, 1 error,
2 failed / counter-example found, 3 timeout / unknown.
"""
import argparse
import json
import logging
import sys
from datetime import datetime, timezone
from functools import lru_cache
from pathlib import Path
from typing import Sequence

import numpy as np
from pydantic import ValidationError

from quantguard.cegis import CegisResult, CegisStatus, run_ceg4n, seed_counter_examples
from quantguard.datasets import KNOWN_DATASETS, fetch_dataset, load_benchmark, split_dataset
from quantguard.errors import DatasetError, ModelFormatError, QuantGuardError
from quantguard.logging_config import setup_logging
from quantguard.network import Dataset, Network, accuracy, load_dataset, load_network, save_dataset, save_network
from quantguard.quantizer import gpfq_quantize, load_quantized, quantization_error, quantize_network, save_quantized
from quantguard.schemas import AccuracyRow, PropertyReport, RunManifest, RunReport
from quantguard.search import CounterExampleSet, GAConfig, tune_ga
from quantguard.settings import Settings, load_settings
from quantguard.trainer import train_mlp
from quantguard.verifier import (
    DEFAULT_DOMAIN,
    CounterExample,
    EquivalenceProperty,
    Equivalent,
    Unknown,
    Verdict,
    VerificationMode,
    VerifierConfig,
    build_properties,
    load_anchors,
    properties_from_anchors,
    random_feature_mask,
    robustness_radius,
    save_anchors,
    select_class_anchors,
    verify_properties,
)

logger = logging.getLogger("quantguard.cli")

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_FAILED = 2
EXIT_TIMEOUT = 3

_STATUS_EXIT = {
    CegisStatus.SOLVED: EXIT_OK,
    CegisStatus.FAILED: EXIT_FAILED,
    CegisStatus.TIMEOUT: EXIT_TIMEOUT,
}

# manifest keys that the quantize command accepts as flags
_MANIFEST_FLAGS = tuple(RunManifest.model_fields)


@lru_cache
def get_settings() -> Settings:
    return load_settings()


# --- helpers -----------------------------------------------------------------

def _has_header(path: Path) -> bool:
    with path.open() as handle:
        first = handle.readline()
    try:
        [float(token) for token in first.split(",")]
    except ValueError:
        return True
    return False


def read_dataset(source: str) -> Dataset:
    """A benchmark name (``iris``, ``seeds``) or a CSV path, with or without header."""
    path = Path(source)
    if not path.exists() and source in KNOWN_DATASETS:
        return load_benchmark(source, get_settings().DATA_DIR)
    if not path.exists():
        raise FileNotFoundError(f"dataset {source} not found")
    if path.stat().st_size == 0:
        raise DatasetError(f"{path}: empty dataset")
    return load_dataset(path, has_header=_has_header(path))


def _require_files(*paths: str | None) -> None:
    for path in paths:
        if path is not None and not Path(path).is_file():
            raise FileNotFoundError(f"{path} does not exist")


def _write_json(path: Path, payload) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=False) + "\n")
    return path


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


def property_report(idx: int, prop: EquivalenceProperty, verdict: Verdict) -> PropertyReport:
    report = PropertyReport(
        index=idx,
        verdict=verdict.kind,
        reference_class=prop.reference_class,
        subproblems=verdict.subproblems,
    )
    if isinstance(verdict, CounterExample):
        report.counter_example = verdict.x.tolist()
        report.quantized_class = verdict.quant_class
    elif isinstance(verdict, Unknown):
        report.reason = verdict.reason
    return report


def _verdicts_exit(verdicts: Sequence[Verdict]) -> int:
    if all(isinstance(v, Equivalent) for v in verdicts):
        return EXIT_OK
    if any(isinstance(v, CounterExample) for v in verdicts):
        return EXIT_FAILED
    return EXIT_TIMEOUT


def _domain(values: Sequence[float] | None) -> tuple[float, float]:
    if values is None:
        return DEFAULT_DOMAIN
    lo, hi = values
    if not lo < hi:
        raise ValueError(f"--domain lower bound {lo} must be below {hi}")
    return lo, hi


def _verifier_config(mode: str, min_box_width: float | None, max_subproblems: int | None) -> VerifierConfig:
    return VerifierConfig(
        min_box_width=min_box_width,
        max_subproblems=max_subproblems or get_settings().VERIFIER_MAX_SUBPROBLEMS,
        mode=VerificationMode(mode),
    )


def build_manifest(args: argparse.Namespace) -> RunManifest:
    """Config file values, overridden by every flag given on the command line."""
    values: dict = {}
    if args.config:
        try:
            values.update(json.loads(Path(args.config).read_text()))
        except json.JSONDecodeError as exc:
            raise ModelFormatError(f"{args.config}: {exc}") from exc
    for key in _MANIFEST_FLAGS:
        value = getattr(args, key, None)
        if value is not None:
            values[key] = value
    try:
        return RunManifest.model_validate(values)
    except ValidationError as exc:
        raise ModelFormatError(f"invalid run manifest: {exc}") from exc


def run_report(manifest: RunManifest, net: Network, properties: Sequence[EquivalenceProperty],
               result: CegisResult) -> RunReport:
    return RunReport(
        model=Path(manifest.model).stem,
        features=net.input_dim,
        properties=len(properties),
        iterations=result.iterations,
        bits_per_layer=list(result.allocation.bits) if result.allocation else None,
        status=result.status.value,
        counter_examples=[x.tolist() for x in result.counter_examples],
        per_property=[property_report(i, p, v) for i, (p, v) in enumerate(zip(properties, result.per_property_verdicts))],
        seed=manifest.seed,
        manifest=manifest,
    )


# --- commands ----------------------------------------------------------------

def cmd_quantize(args: argparse.Namespace) -> int:
    manifest = build_manifest(args)
    _require_files(manifest.model, manifest.anchors)
    settings = get_settings()
    started_at = _now()

    net = load_network(manifest.model)
    properties = properties_from_anchors(net, load_anchors(manifest.anchors), manifest.eps, manifest.domain)
    initial: CounterExampleSet | None = None
    if manifest.dataset and manifest.initial_counter_examples is not None:
        data = read_dataset(manifest.dataset)
        initial = seed_counter_examples(data, manifest.initial_counter_examples, manifest.seed)

    ga = GAConfig(
        population_size=manifest.population,
        generations_per_layer=manifest.generations_per_layer,
        n_min=manifest.nmin,
        n_max=manifest.nmax,
        mutation_rate=manifest.mutation_rate,
        crossover_rate=manifest.crossover_rate,
        seed=manifest.seed,
    )
    vc = _verifier_config(manifest.mode, manifest.min_box_width, manifest.max_subproblems)
    out = Path(manifest.out) if manifest.out else settings.RUNS_DIR / "latest"
    result = run_ceg4n(
        net,
        properties,
        ga,
        vc,
        budget=manifest.budget_secs,
        initial=initial,
        max_iterations=manifest.max_iterations or settings.CEGIS_MAX_ITERATIONS,
        max_workers=settings.MAX_WORKERS,
        status_path=settings.LOGS_DIR / "status.json",
        trace_dir=out / "traces",
    )

    report = run_report(manifest, net, properties, result)
    _write_json(out / "report.json", report.model_dump())
    _write_json(out / "timing.json", {
        "started_at": started_at,
        "finished_at": _now(),
        "total_time": result.wall_time,
        "per_property": [{"index": i, "time": v.elapsed} for i, v in enumerate(result.per_property_verdicts)],
    })
    if result.allocation is not None:
        save_quantized(quantize_network(net, result.allocation), out / "quantized.json")

    print(json.dumps({"status": report.status, "bits_per_layer": report.bits_per_layer,
                      "iterations": report.iterations, "out": str(out)}))
    return _STATUS_EXIT[result.status]


def cmd_verify(args: argparse.Namespace) -> int:
    _require_files(args.model, args.quantized, args.anchors)
    net = load_network(args.model)
    qnet = load_quantized(args.quantized)
    properties = properties_from_anchors(net, load_anchors(args.anchors), args.eps, _domain(args.domain))
    vc = _verifier_config(args.mode, args.min_box_width, args.max_subproblems)
    verdicts = verify_properties(net, qnet.realization, properties, vc, get_settings().MAX_WORKERS)
    payload = {
        "model": Path(args.model).stem,
        "quantized": Path(args.quantized).stem,
        "bits_per_layer": list(qnet.bits),
        "per_property": [property_report(i, p, v).model_dump() for i, (p, v) in enumerate(zip(properties, verdicts))],
    }
    if args.out:
        _write_json(Path(args.out), payload)
    print(json.dumps(payload))
    return _verdicts_exit(verdicts)


def cmd_eval(args: argparse.Namespace) -> int:
    _require_files(args.model, *args.quantized)
    net = load_network(args.model)
    data = read_dataset(args.dataset)
    ref_acc = 100.0 * accuracy(net, data)
    rows = [AccuracyRow(model=Path(args.model).stem, bits=None, ref_acc=round(ref_acc, 2),
                        quant_acc=round(ref_acc, 2), acc_drop=0.0)]
    for path in args.quantized:
        qnet = load_quantized(path)
        quant_acc = 100.0 * accuracy(qnet.realization, data)
        rows.append(AccuracyRow(
            model=Path(path).stem,
            bits=list(qnet.bits),
            ref_acc=round(ref_acc, 2),
            quant_acc=round(quant_acc, 2),
            acc_drop=round(ref_acc - quant_acc, 2),
        ))
    table = [row.model_dump() for row in rows]
    if args.out:
        _write_json(Path(args.out), table)
    for row in rows:
        print(f"{row.model:<24} bits={row.bits} ref={row.ref_acc:.2f} quant={row.quant_acc:.2f} drop={row.acc_drop:.2f}")
    return EXIT_OK


def cmd_gpfq(args: argparse.Namespace) -> int:
    _require_files(args.model)
    net = load_network(args.model)
    calibration = read_dataset(args.dataset)
    qnet = gpfq_quantize(net, calibration, args.bits, reverse_order=args.reverse_order)
    save_quantized(qnet, args.out)
    logger.info("GPFQ model written", extra={"event": "gpfq_saved", "path": args.out, "bits": list(qnet.bits),
                                             "error": quantization_error(net, qnet, calibration)})
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    data = read_dataset(args.dataset)
    train, test = split_dataset(data, args.test_fraction, args.seed)
    net = train_mlp(train, args.hidden, learning_rate=args.lr, epochs=args.epochs, seed=args.seed,
                    momentum=args.momentum)
    out = Path(args.out)
    save_network(net, out / "model.json")
    save_dataset(train, out / "train.csv")
    save_dataset(test, out / "test.csv")
    summary = {
        "model": str(out / "model.json"),
        "train_acc": round(100.0 * accuracy(net, train), 2),
        "test_acc": round(100.0 * accuracy(net, test), 2) if len(test) else None,
    }
    logger.info("Model trained", extra={"event": "model_saved", **summary})
    print(json.dumps(summary))
    return EXIT_OK


def cmd_anchors(args: argparse.Namespace) -> int:
    _require_files(args.model)
    net = load_network(args.model)
    data = read_dataset(args.dataset)
    free_mask = "all" if args.free_k is None else random_feature_mask(net.input_dim, args.free_k, args.seed)
    domain = _domain(args.domain)
    properties = []
    for anchor in select_class_anchors(net, data):
        eps = args.eps
        if eps is None:
            eps = args.radius_fraction * robustness_radius(net, anchor, free_mask, domain_clip=domain)
        properties.extend(build_properties(net, [anchor], eps, free_mask, domain))
    if not properties:
        raise DatasetError("no correctly classified sample to anchor a property on")
    save_anchors(properties, args.out)
    print(json.dumps([{"class": p.reference_class, "epsilon": p.epsilon} for p in properties]))
    return EXIT_OK


def cmd_fetch_data(args: argparse.Namespace) -> int:
    for name in args.names:
        path = fetch_dataset(name, refresh=args.refresh)
        print(path)
    return EXIT_OK


def cmd_tune_ga(args: argparse.Namespace) -> int:
    _require_files(args.model)
    net = load_network(args.model)
    data = read_dataset(args.dataset)
    ces = seed_counter_examples(data, args.k, args.seed)
    cfg = GAConfig(population_size=args.population, n_min=args.nmin, n_max=args.nmax, seed=args.seed)
    rows = tune_ga(net, ces, cfg, args.runs, args.generations)
    table = np.array([[r["layers"], r["generations"], r["population"], r["optimal_pct"]] for r in rows])
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    np.savetxt(out, table.reshape(-1, 4), delimiter=",", fmt=["%d", "%d", "%d", "%.2f"],
               header="layers,generations,population,optimal_pct", comments="")
    print(out)
    return EXIT_OK


# --- parser ------------------------------------------------------------------

def _add_verifier_flags(parser: argparse.ArgumentParser, with_defaults: bool) -> None:
    parser.add_argument("--mode", choices=[m.value for m in VerificationMode],
                        default=None if not with_defaults else VerificationMode.ANCHOR_LABEL.value)
    parser.add_argument("--min-box-width", dest="min_box_width", type=float, default=None)
    parser.add_argument("--max-subproblems", dest="max_subproblems", type=int, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="quantguard", description="Verified bit-width minimization for ReLU networks")
    parser.add_argument("--log-level", dest="log_level", default=None)
    commands = parser.add_subparsers(dest="command", required=True)

    # quantize flags default to None so config-file values survive
    quantize = commands.add_parser("quantize", help="run the optimize/verify loop")
    quantize.add_argument("--config", default=None, help="JSON run manifest; flags override its values")
    quantize.add_argument("--model")
    quantize.add_argument("--anchors")
    quantize.add_argument("--dataset")
    quantize.add_argument("--eps", type=float)
    quantize.add_argument("--nmin", type=int)
    quantize.add_argument("--nmax", type=int)
    quantize.add_argument("--generations-per-layer", dest="generations_per_layer", type=int)
    quantize.add_argument("--population", type=int)
    quantize.add_argument("--mutation-rate", dest="mutation_rate", type=float)
    quantize.add_argument("--crossover-rate", dest="crossover_rate", type=float)
    quantize.add_argument("--seed", type=int)
    quantize.add_argument("--budget-secs", dest="budget_secs", type=float)
    quantize.add_argument("--max-iterations", dest="max_iterations", type=int)
    quantize.add_argument("--initial-counter-examples", dest="initial_counter_examples", type=int)
    quantize.add_argument("--domain", nargs=2, type=float, metavar=("LO", "HI"), default=None)
    quantize.add_argument("--out")
    _add_verifier_flags(quantize, with_defaults=False)
    quantize.set_defaults(handler=cmd_quantize)

    verify = commands.add_parser("verify", help="check stored networks against anchors")
    verify.add_argument("--model", required=True)
    verify.add_argument("--quantized", required=True)
    verify.add_argument("--anchors", required=True)
    verify.add_argument("--eps", type=float, default=None)
    verify.add_argument("--out", default=None)
    verify.add_argument("--domain", nargs=2, type=float, metavar=("LO", "HI"), default=None)
    _add_verifier_flags(verify, with_defaults=True)
    verify.set_defaults(handler=cmd_verify)

    evaluate = commands.add_parser("eval", help="Top-1 accuracy of reference and quantized models")
    evaluate.add_argument("--model", required=True)
    evaluate.add_argument("--quantized", nargs="*", default=[])
    evaluate.add_argument("--dataset", required=True)
    evaluate.add_argument("--out", default=None)
    evaluate.set_defaults(handler=cmd_eval)

    gpfq = commands.add_parser("gpfq", help="greedy path-following quantization baseline")
    gpfq.add_argument("--model", required=True)
    gpfq.add_argument("--dataset", required=True)
    gpfq.add_argument("--bits", type=int, required=True)
    gpfq.add_argument("--reverse-order", dest="reverse_order", action="store_true")
    gpfq.add_argument("--out", required=True)
    gpfq.set_defaults(handler=cmd_gpfq)

    train = commands.add_parser("train", help="train a ReLU classifier")
    train.add_argument("--dataset", required=True)
    train.add_argument("--hidden", type=int, nargs="+", required=True)
    train.add_argument("--epochs", type=int, default=2000)
    train.add_argument("--lr", type=float, default=0.1)
    train.add_argument("--momentum", type=float, default=0.9)
    train.add_argument("--test-fraction", dest="test_fraction", type=float, default=0.2)
    train.add_argument("--seed", type=int, default=0)
    train.add_argument("--out", required=True)
    train.set_defaults(handler=cmd_train)

    anchors = commands.add_parser("anchors", help="write one class anchor per output class")
    anchors.add_argument("--model", required=True)
    anchors.add_argument("--dataset", required=True)
    anchors.add_argument("--eps", type=float, default=None)
    anchors.add_argument("--radius-fraction", dest="radius_fraction", type=float, default=0.5)
    anchors.add_argument("--free-k", dest="free_k", type=int, default=None)
    anchors.add_argument("--seed", type=int, default=0)
    anchors.add_argument("--domain", nargs=2, type=float, metavar=("LO", "HI"), default=None)
    anchors.add_argument("--out", required=True)
    anchors.set_defaults(handler=cmd_anchors)

    fetch = commands.add_parser("fetch-data", help="download and cache benchmark datasets")
    fetch.add_argument("names", nargs="+", choices=KNOWN_DATASETS)
    fetch.add_argument("--refresh", action="store_true")
    fetch.set_defaults(handler=cmd_fetch_data)

    tune = commands.add_parser("tune-ga", help="share of GA runs reaching the exhaustive optimum")
    tune.add_argument("--model", required=True)
    tune.add_argument("--dataset", required=True)
    tune.add_argument("--k", type=int, default=10)
    tune.add_argument("--runs", type=int, default=10)
    tune.add_argument("--generations", type=int, nargs="+", default=[10, 50, 100])
    tune.add_argument("--population", type=int, default=5)
    tune.add_argument("--nmin", type=int, default=2)
    tune.add_argument("--nmax", type=int, default=8)
    tune.add_argument("--seed", type=int, default=0)
    tune.add_argument("--out", required=True)
    tune.set_defaults(handler=cmd_tune_ga)

    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    settings = get_settings()
    setup_logging(args.log_level, settings.LOGS_DIR)
    try:
        return args.handler(args)
    except (QuantGuardError, OSError, ValueError) as exc:
        logger.error("Command failed", exc_info=True, extra={"event": "command_failed", "command": args.command})
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
