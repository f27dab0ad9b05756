"""Counter-example guided bit-width minimization: optimize, verify, refine, repeat."""
import logging
import time
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Sequence

import numpy as np

from quantguard.errors import CegisAbortError, DatasetError, PropertyError, ShapeMismatchError, VerificationError
from quantguard.network import Dataset, Network
from quantguard.quantizer import BitAllocation, quantize_network
from quantguard.search import CounterExampleSet, GAConfig, ga_minimize
from quantguard.status_tracker import update_status
from quantguard.verifier import (
    BUDGET_EXHAUSTED,
    CounterExample,
    EquivalenceProperty,
    Equivalent,
    Unknown,
    Verdict,
    VerifierConfig,
    concrete_check,
    validate_counter_example,
    verify_properties,
)

logger = logging.getLogger("quantguard.cegis")


class CegisStatus(str, Enum):
    SOLVED = "solved"
    FAILED = "failed"
    TIMEOUT = "timeout"


@dataclass
class CegisResult:
    status: CegisStatus
    allocation: BitAllocation | None
    iterations: int
    counter_examples: CounterExampleSet
    per_property_verdicts: list[Verdict]
    wall_time: float
    history: list[dict] = field(default_factory=list)
    reverification: list[Verdict] = field(default_factory=list)


def seed_counter_examples(data: Dataset, k: int, seed: int) -> CounterExampleSet:
    """``k`` distinct dataset rows picked by ``seed``; duplicate rows collapse."""
    if k < 0 or k > len(data):
        raise DatasetError(f"cannot draw {k} samples from a dataset of {len(data)}")
    rng = np.random.default_rng(seed)
    picks = rng.choice(len(data), size=k, replace=False)
    ces = CounterExampleSet(data.features[picks])
    if len(ces) < k:
        logger.warning(
            "Duplicate rows collapsed in the initial counter-examples",
            extra={"event": "initial_ces_deduplicated", "requested": k, "kept": len(ces)},
        )
    return ces


def _check_properties(net: Network, properties: Sequence[EquivalenceProperty]) -> None:
    if not properties:
        raise PropertyError("at least one equivalence property is required")
    for idx, prop in enumerate(properties):
        if prop.input_dim != net.input_dim:
            raise ShapeMismatchError(f"property {idx} has {prop.input_dim} features, network expects {net.input_dim}")
        if not 0 <= prop.reference_class < net.output_dim:
            raise ShapeMismatchError(f"property {idx} reference class {prop.reference_class} is not an output")


def _all_equivalent(verdicts: Sequence[Verdict]) -> bool:
    return all(isinstance(v, Equivalent) for v in verdicts)


def run_ceg4n(
    net: Network,
    properties: Sequence[EquivalenceProperty],
    ga: GAConfig | None = None,
    vc: VerifierConfig | None = None,
    budget: float | None = None,
    initial: CounterExampleSet | None = None,
    max_iterations: int = 20,
    max_workers: int = 1,
    status_path: Path | None = None,
    trace_dir: Path | None = None,
) -> CegisResult:
    """Alternate GA minimization and verification until every property holds.

    The initial counter-example set defaults to the property anchors. A
    counter-example on which reference and quantized networks agree (the
    reference itself leaves the anchor class) cannot constrain the GA; the loop
    then jumps to the all-``n_max`` allocation, where a remaining
    counter-example means failure.
    """
    ga = ga or GAConfig()
    vc = vc or VerifierConfig()
    _check_properties(net, properties)
    started = time.monotonic()
    deadline = started + budget if budget is not None else None
    ces = initial.copy() if initial is not None else CounterExampleSet(p.anchor for p in properties)
    ceiling = BitAllocation.uniform(net.depth, ga.n_max, ga.n_min, ga.n_max)
    history: list[dict] = []
    verdicts: list[Verdict] = []
    alloc: BitAllocation | None = None
    jump_to_ceiling = False

    def _track(data: dict) -> None:
        if status_path is not None:
            update_status({**data, "max_iterations": max_iterations}, status_path)

    def _finish(status: CegisStatus, iteration: int, reverification: list[Verdict] | None = None) -> CegisResult:
        result = CegisResult(
            status=status,
            allocation=alloc,
            iterations=iteration,
            counter_examples=ces,
            per_property_verdicts=verdicts,
            wall_time=time.monotonic() - started,
            history=history,
            reverification=reverification or [],
        )
        logger.info(
            "Bit-width search finished",
            extra={"event": f"cegis_{status.value}", "iterations": iteration,
                   "bits": list(alloc.bits) if alloc else None, "counter_examples": len(ces),
                   "wall_time": round(result.wall_time, 3)},
        )
        _track({"message": f"Finished: {status.value}", "status": status.value, "running": False})
        return result

    _track({"message": "Bit-width search starting", "iteration": 0, "running": True, "history": []})

    for iteration in range(1, max_iterations + 1):
        if deadline is not None and time.monotonic() > deadline:
            return _finish(CegisStatus.TIMEOUT, iteration - 1)

        trace_path = trace_dir / f"ga_trace_{iteration:03d}.csv" if trace_dir is not None else None
        alloc = ceiling if jump_to_ceiling else ga_minimize(net, ces, ga, trace_path)
        qnet = quantize_network(net, alloc)
        _track({"message": f"Iteration {iteration}: verifying bits {list(alloc.bits)}", "iteration": iteration,
                "bits": list(alloc.bits)})

        run_cfg = replace(vc, deadline=deadline) if deadline is not None else vc
        verdicts = verify_properties(net, qnet.realization, properties, run_cfg, max_workers)
        history.append({"iteration": iteration, "bits": list(alloc.bits), "verdicts": [v.kind for v in verdicts]})

        if _all_equivalent(verdicts):
            # fresh quantization and verifier run on the final allocation
            recheck = verify_properties(net, quantize_network(net, alloc).realization, properties, vc, max_workers)
            if not _all_equivalent(recheck):
                raise CegisAbortError("independent re-verification of the final allocation disagrees", iteration)
            return _finish(CegisStatus.SOLVED, iteration, recheck)

        known = ces.copy()
        fresh: list[tuple[int, np.ndarray]] = []
        reference_level = False
        stuck_unknown = False
        for idx, (prop, verdict) in enumerate(zip(properties, verdicts)):
            if isinstance(verdict, CounterExample):
                try:
                    validate_counter_example(net, qnet.realization, prop, verdict, vc.mode)
                except VerificationError as exc:
                    raise CegisAbortError(f"property {idx}: invalid counter-example: {exc}", iteration) from exc
                if concrete_check(net, qnet.realization, verdict.x):
                    reference_level = True
                else:
                    fresh.append((idx, verdict.x))
            elif isinstance(verdict, Unknown):
                if verdict.reason == BUDGET_EXHAUSTED:
                    return _finish(CegisStatus.TIMEOUT, iteration)
                witness = verdict.best_witness
                if witness is not None and not concrete_check(net, qnet.realization, witness):
                    fresh.append((idx, witness))
                else:
                    stuck_unknown = True

        if alloc.bits == ceiling.bits:
            if any(isinstance(v, CounterExample) for v in verdicts):
                return _finish(CegisStatus.FAILED, iteration)
            return _finish(CegisStatus.TIMEOUT, iteration)

        if stuck_unknown and not fresh and not reference_level:
            raise CegisAbortError(
                "verifier returned Unknown without a disagreeing witness below the all-n_max allocation",
                iteration,
            )

        for idx, x in fresh:
            if x in known:
                raise CegisAbortError(
                    f"property {idx}: counter-example already in the constraint set; GA feasibility is unsound",
                    iteration,
                )
            if ces.add(x):
                logger.info("Counter-example added", extra={"event": "counter_example_added", "property": idx,
                                                            "iteration": iteration, "x": x})
        if reference_level and not fresh:
            logger.warning(
                "Reference network violates a property; escalating to the maximum bit widths",
                extra={"event": "reference_violation", "iteration": iteration},
            )
            jump_to_ceiling = True

    return _finish(CegisStatus.TIMEOUT, max_iterations)
