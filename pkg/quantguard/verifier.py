"""Complete Top-1 equivalence checking over L-infinity balls.

Properties are decided by branch-and-bound on the input box: interval bounds
prove sub-boxes safe, concrete samples refute them, everything else is
bisected along its widest free feature. Each frontier is processed as one
numpy batch in lexicographic order of the boxes' lower corners, so the first
counter-example found does not depend on how the work is scheduled.
"""
import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import ClassVar, Literal, Sequence

import numpy as np
from pydantic import TypeAdapter, ValidationError

from quantguard.errors import ModelFormatError, PropertyError, ShapeMismatchError, VerificationError
from quantguard.network import Activation, Dataset, Network, forward_batch, ordered_matmul, predict, predict_batch
from quantguard.schemas import AnchorFile

logger = logging.getLogger("quantguard.verifier")

EPS64 = float(np.finfo(np.float64).eps)
DEFAULT_DOMAIN = (0.0, 1.0)
BUDGET_EXHAUSTED = "time budget exhausted"
# float64 values held by one chunk of embedded samples
MAX_CHUNK_VALUES = 1 << 22


class VerificationMode(str, Enum):
    ANCHOR_LABEL = "anchor"
    POINTWISE_PAIR = "pairwise"


@dataclass(frozen=True, eq=False)
class Box:
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lower = np.array(self.lower, dtype=np.float64)
        upper = np.array(self.upper, dtype=np.float64)
        if lower.shape != upper.shape or lower.ndim != 1:
            raise ShapeMismatchError(f"box corners {lower.shape} and {upper.shape} differ")
        if np.any(lower > upper):
            raise PropertyError("box lower corner exceeds its upper corner")
        object.__setattr__(self, "lower", lower)
        object.__setattr__(self, "upper", upper)

    @property
    def widths(self) -> np.ndarray:
        return self.upper - self.lower

    @property
    def center(self) -> np.ndarray:
        return (self.lower + self.upper) / 2.0


@dataclass(frozen=True, eq=False)
class EquivalenceProperty:
    """psi_x: free features within ``epsilon`` of the anchor, pinned features equal to it,
    everything inside ``domain_clip``. psi_y: the quantized network keeps ``reference_class``.

    The ball is the float box ``[fl(x0 - eps), fl(x0 + eps)]`` intersected with the
    domain; membership is tested against exactly those bounds.
    """

    anchor: np.ndarray
    epsilon: float
    free_mask: tuple[int, ...]
    reference_class: int
    domain_clip: tuple[float, float] | None = DEFAULT_DOMAIN

    def __post_init__(self):
        anchor = np.array(self.anchor, dtype=np.float64)
        anchor.flags.writeable = False
        if anchor.ndim != 1 or not np.all(np.isfinite(anchor)):
            raise PropertyError("anchor must be a finite vector")
        if not self.epsilon >= 0:
            raise PropertyError(f"epsilon must be non-negative, got {self.epsilon}")
        mask = tuple(sorted(int(i) for i in self.free_mask))
        if len(set(mask)) != len(mask) or any(i < 0 or i >= anchor.size for i in mask):
            raise PropertyError(f"free_mask {mask} is not a set of feature indices below {anchor.size}")
        if self.domain_clip is not None:
            lo, hi = self.domain_clip
            if np.any(anchor < lo) or np.any(anchor > hi):
                raise PropertyError(f"anchor lies outside the input domain [{lo}, {hi}]")
        object.__setattr__(self, "anchor", anchor)
        object.__setattr__(self, "epsilon", float(self.epsilon))
        object.__setattr__(self, "free_mask", mask)

    @property
    def input_dim(self) -> int:
        return self.anchor.size

    @property
    def pinned(self) -> int:
        return self.input_dim - len(self.free_mask)

    def region(self) -> Box:
        centre = self.anchor[list(self.free_mask)]
        lower = centre - self.epsilon
        upper = centre + self.epsilon
        if self.domain_clip is not None:
            lower = np.maximum(lower, self.domain_clip[0])
            upper = np.minimum(upper, self.domain_clip[1])
        return Box(lower, upper)

    def embed(self, points: np.ndarray) -> np.ndarray:
        """Lift points over the free features to full inputs (pinned features from the anchor)."""
        points = np.asarray(points, dtype=np.float64)
        full = np.array(np.broadcast_to(self.anchor, points.shape[:-1] + (self.input_dim,)))
        full[..., list(self.free_mask)] = points
        return full

    def contains(self, x: Sequence[float] | np.ndarray) -> bool:
        x = np.asarray(x, dtype=np.float64)
        if x.shape != self.anchor.shape:
            return False
        pinned = np.ones(self.input_dim, dtype=bool)
        pinned[list(self.free_mask)] = False
        if not np.array_equal(x[pinned], self.anchor[pinned]):
            return False
        region = self.region()
        free = x[list(self.free_mask)]
        return bool(np.all(free >= region.lower) and np.all(free <= region.upper))


@dataclass(frozen=True, eq=False)
class Verdict:
    kind: ClassVar[str] = ""
    subproblems: int = field(default=0, kw_only=True)
    elapsed: float = field(default=0.0, kw_only=True)


@dataclass(frozen=True, eq=False)
class Equivalent(Verdict):
    kind: ClassVar[str] = "equivalent"


@dataclass(frozen=True, eq=False)
class CounterExample(Verdict):
    kind: ClassVar[str] = "counter_example"
    x: np.ndarray
    ref_class: int
    quant_class: int


@dataclass(frozen=True, eq=False)
class Unknown(Verdict):
    kind: ClassVar[str] = "unknown"
    reason: str
    best_witness: np.ndarray | None = None
    best_margin: float = float("inf")


@dataclass(frozen=True)
class VerifierConfig:
    min_box_width: float | None = None
    max_subproblems: int = 200_000
    mode: VerificationMode = VerificationMode.ANCHOR_LABEL
    max_corner_dims: int = 6
    chunk_size: int = 4096
    deadline: float | None = None

    def __post_init__(self):
        if self.min_box_width is not None and not self.min_box_width > 0:
            raise ValueError(f"min_box_width must be positive, got {self.min_box_width}")
        if self.max_subproblems < 1 or self.chunk_size < 1:
            raise ValueError("max_subproblems and chunk_size must be positive")
        object.__setattr__(self, "mode", VerificationMode(self.mode))

    def delta(self, prop: EquivalenceProperty) -> float:
        return self.min_box_width if self.min_box_width is not None else 1e-6 * prop.epsilon

    def samples_per_box(self, prop: EquivalenceProperty, output_dim: int) -> int:
        dims = len(prop.free_mask)
        corners = 2 ** dims if dims <= self.max_corner_dims else 2
        return (2 if output_dim > 1 else 1) + corners

    def rows_per_chunk(self, prop: EquivalenceProperty, output_dim: int) -> int:
        """``chunk_size`` capped so one chunk embeds at most MAX_CHUNK_VALUES floats."""
        per_box = self.samples_per_box(prop, output_dim) * prop.input_dim
        return max(1, min(self.chunk_size, MAX_CHUNK_VALUES // per_box))


# --- property construction ---------------------------------------------------

def _resolve_mask(free_mask: Sequence[int] | Literal["all"], input_dim: int) -> tuple[int, ...]:
    if isinstance(free_mask, str):
        if free_mask != "all":
            raise PropertyError(f"free_mask must be a list of indices or 'all', got {free_mask!r}")
        return tuple(range(input_dim))
    return tuple(free_mask)


def build_properties(
    reference: Network,
    anchors: Sequence[Sequence[float]] | np.ndarray,
    epsilon: float,
    free_mask: Sequence[int] | Literal["all"] = "all",
    domain_clip: tuple[float, float] | None = DEFAULT_DOMAIN,
) -> list[EquivalenceProperty]:
    properties = []
    for idx, anchor in enumerate(anchors):
        anchor = np.asarray(anchor, dtype=np.float64)
        if anchor.shape != (reference.input_dim,):
            raise ShapeMismatchError(
                f"anchor {idx} has {anchor.size} features, network expects {reference.input_dim}"
            )
        properties.append(
            EquivalenceProperty(
                anchor=anchor,
                epsilon=epsilon,
                free_mask=_resolve_mask(free_mask, reference.input_dim),
                reference_class=predict(reference, anchor),
                domain_clip=domain_clip,
            )
        )
    return properties


def select_class_anchors(net: Network, data: Dataset) -> np.ndarray:
    """First correctly classified sample of every class, in dataset order."""
    predicted = predict_batch(net, data.features)
    anchors = []
    for cls in range(data.num_classes):
        hits = np.flatnonzero((data.labels == cls) & (predicted == cls))
        if hits.size == 0:
            logger.warning("No correctly classified sample for class", extra={"event": "anchor_missing", "class": cls})
            continue
        anchors.append(data.features[hits[0]])
    return np.array(anchors).reshape(-1, data.input_dim)


def random_feature_mask(input_dim: int, k: int, seed: int) -> tuple[int, ...]:
    if not 0 <= k <= input_dim:
        raise PropertyError(f"cannot free {k} of {input_dim} features")
    rng = np.random.default_rng(seed)
    return tuple(sorted(int(i) for i in rng.choice(input_dim, size=k, replace=False)))


_ANCHORS_ADAPTER = TypeAdapter(list[AnchorFile])


def load_anchors(path: str | Path) -> list[AnchorFile]:
    path = Path(path)
    try:
        return _ANCHORS_ADAPTER.validate_json(path.read_text())
    except ValidationError as exc:
        raise ModelFormatError(f"{path}: {exc}") from exc


def save_anchors(properties: Sequence[EquivalenceProperty], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    entries = [
        AnchorFile(
            input=prop.anchor.tolist(),
            epsilon=prop.epsilon,
            free_mask="all" if len(prop.free_mask) == prop.input_dim else list(prop.free_mask),
            domain=prop.domain_clip,
        ).model_dump()
        for prop in properties
    ]
    path.write_text(json.dumps(entries, indent=1))
    return path


def properties_from_anchors(
    reference: Network,
    entries: Sequence[AnchorFile],
    default_epsilon: float | None,
    domain_clip: tuple[float, float] | None = DEFAULT_DOMAIN,
) -> list[EquivalenceProperty]:
    properties = []
    for idx, entry in enumerate(entries):
        epsilon = entry.epsilon if entry.epsilon is not None else default_epsilon
        if epsilon is None:
            raise PropertyError(f"anchor {idx} has no epsilon and no default radius was given")
        domain = entry.domain if entry.domain is not None else domain_clip
        properties.extend(build_properties(reference, [entry.input], epsilon, entry.free_mask, domain))
    return properties


# --- bounds ------------------------------------------------------------------

def _interval_layers(net: Network, lower: np.ndarray, upper: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    for layer in net.layers:
        W = layer.weights
        pos = np.maximum(W, 0.0)
        neg = np.minimum(W, 0.0)
        lo = ordered_matmul(lower, pos) + ordered_matmul(upper, neg) + layer.bias
        hi = ordered_matmul(upper, pos) + ordered_matmul(lower, neg) + layer.bias
        # outward slack covering the rounding of both this sum and the concrete one
        magnitude = ordered_matmul(np.maximum(np.abs(lower), np.abs(upper)), np.abs(W)) + np.abs(layer.bias)
        slack = (2 * W.shape[1] + 6) * EPS64 * magnitude
        lo = lo - slack
        hi = hi + slack
        if layer.activation is Activation.RELU:
            lo = np.maximum(lo, 0.0)
            hi = np.maximum(hi, 0.0)
        lower, upper = lo, hi
    return lower, upper


def interval_bounds(net: Network, box: Box, prop: EquivalenceProperty) -> tuple[np.ndarray, np.ndarray]:
    if box.lower.size != len(prop.free_mask):
        raise ShapeMismatchError(f"box has {box.lower.size} dims, property frees {len(prop.free_mask)}")
    lo, hi = _interval_layers(net, prop.embed(box.lower[None, :]), prop.embed(box.upper[None, :]))
    return lo[0], hi[0]


def _class_proven(lo: np.ndarray, hi: np.ndarray, cls: np.ndarray) -> np.ndarray:
    rows = np.arange(lo.shape[0])
    others = hi.copy()
    others[rows, cls] = -np.inf
    return lo[rows, cls] > others.max(axis=1)


def _margin(logits: np.ndarray, cls: np.ndarray) -> np.ndarray:
    rows = np.arange(logits.shape[0])
    others = logits.copy()
    others[rows, cls] = -np.inf
    return logits[rows, cls] - others.max(axis=1)


# --- concrete evaluation -----------------------------------------------------

def concrete_check(reference: Network, quantized: Network, x: Sequence[float] | np.ndarray) -> bool:
    return predict(reference, x) == predict(quantized, x)


def _evaluate(
    reference: Network,
    quantized: Network,
    prop: EquivalenceProperty,
    X: np.ndarray,
    mode: VerificationMode,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    q_logits = forward_batch(quantized, X)
    q_cls = np.argmax(q_logits, axis=1)
    if mode is VerificationMode.ANCHOR_LABEL:
        ref_cls = np.full(X.shape[0], prop.reference_class)
        margin = _margin(q_logits, ref_cls)
    else:
        r_logits = forward_batch(reference, X)
        ref_cls = np.argmax(r_logits, axis=1)
        margin = np.minimum(_margin(q_logits, ref_cls), _margin(r_logits, ref_cls))
    return ref_cls != q_cls, margin, ref_cls, q_cls


def _jacobian(net: Network, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Logits and their input Jacobian for the linear region containing each row of X."""
    hidden = X
    jac = None
    for layer in net.layers:
        pre = ordered_matmul(hidden, layer.weights) + layer.bias
        if jac is None:
            jac = np.broadcast_to(layer.weights, (X.shape[0],) + layer.weights.shape)
        else:
            jac = np.einsum("oi,nij->noj", layer.weights, jac)
        if layer.activation is Activation.RELU:
            active = pre > 0
            hidden = np.where(active, pre, 0.0)
            jac = jac * active[:, :, None]
        else:
            hidden = pre
    return hidden, jac


def _descent_corner(
    reference: Network,
    quantized: Network,
    prop: EquivalenceProperty,
    lower: np.ndarray,
    upper: np.ndarray,
    mode: VerificationMode,
) -> np.ndarray:
    """Corner reached by following the sign of the winning margin's gradient downhill."""
    centers = prop.embed((lower + upper) / 2.0)
    logits, jac = _jacobian(quantized, centers)
    if mode is VerificationMode.ANCHOR_LABEL:
        target = np.full(centers.shape[0], prop.reference_class)
    else:
        target = predict_batch(reference, centers)
    rows = np.arange(centers.shape[0])
    others = logits.copy()
    others[rows, target] = -np.inf
    runner_up = np.argmax(others, axis=1)
    grad = (jac[rows, target] - jac[rows, runner_up])[:, list(prop.free_mask)]
    return np.where(grad > 0, lower, upper)


def _samples(
    reference: Network,
    quantized: Network,
    prop: EquivalenceProperty,
    lower: np.ndarray,
    upper: np.ndarray,
    cfg: VerifierConfig,
) -> np.ndarray:
    dims = lower.shape[1]
    picks = [(lower + upper) / 2.0]
    if quantized.output_dim > 1:
        picks.append(_descent_corner(reference, quantized, prop, lower, upper, cfg.mode))
    stacked = np.stack(picks, axis=1)
    if dims <= cfg.max_corner_dims:
        bits = ((np.arange(2 ** dims)[:, None] >> np.arange(dims)) & 1).astype(bool)
        corners = np.where(bits[None, :, :], upper[:, None, :], lower[:, None, :])
    else:
        corners = np.stack([lower, upper], axis=1)
    return np.concatenate([stacked, corners], axis=1)


def _lexsorted(lower: np.ndarray, upper: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    order = np.lexsort(lower.T[::-1])
    return lower[order], upper[order]


def _check_dims(reference: Network, quantized: Network, prop: EquivalenceProperty) -> None:
    if reference.input_dim != quantized.input_dim or reference.output_dim != quantized.output_dim:
        raise ShapeMismatchError(
            f"networks differ in shape: {reference.input_dim}->{reference.output_dim} vs "
            f"{quantized.input_dim}->{quantized.output_dim}"
        )
    if prop.input_dim != reference.input_dim:
        raise ShapeMismatchError(f"property has {prop.input_dim} features, networks expect {reference.input_dim}")
    if not 0 <= prop.reference_class < reference.output_dim:
        raise ShapeMismatchError(f"reference class {prop.reference_class} outside {reference.output_dim} outputs")


def check_property(
    reference: Network,
    quantized: Network,
    prop: EquivalenceProperty,
    cfg: VerifierConfig | None = None,
) -> Verdict:
    cfg = cfg or VerifierConfig()
    _check_dims(reference, quantized, prop)
    started = time.perf_counter()
    region = prop.region()

    def _elapsed() -> float:
        return time.perf_counter() - started

    if not prop.free_mask or np.array_equal(region.lower, region.upper):
        x = prop.embed(region.lower[None, :])
        violated, _, ref_cls, q_cls = _evaluate(reference, quantized, prop, x, cfg.mode)
        if violated[0]:
            return CounterExample(x[0], int(ref_cls[0]), int(q_cls[0]), subproblems=1, elapsed=_elapsed())
        return Equivalent(subproblems=1, elapsed=_elapsed())

    delta = cfg.delta(prop)
    chunk_rows = cfg.rows_per_chunk(prop, quantized.output_dim)
    lower, upper = region.lower[None, :], region.upper[None, :]
    subproblems = 0
    exhausted = 0
    best_margin = np.inf
    best_witness = None

    def _unknown(reason: str) -> Unknown:
        return Unknown(reason, best_witness, float(best_margin), subproblems=subproblems, elapsed=_elapsed())

    while lower.shape[0]:
        lower, upper = _lexsorted(lower, upper)
        next_lower, next_upper = [], []
        start = 0
        while start < lower.shape[0]:
            if cfg.deadline is not None and time.monotonic() > cfg.deadline:
                return _unknown(BUDGET_EXHAUSTED)
            if subproblems >= cfg.max_subproblems:
                return _unknown("subproblem limit reached")
            take = min(chunk_rows, cfg.max_subproblems - subproblems)
            lo = lower[start:start + take]
            hi = upper[start:start + take]
            start += take
            subproblems += lo.shape[0]

            samples = _samples(reference, quantized, prop, lo, hi, cfg)
            n_boxes, n_samples = samples.shape[:2]
            X = prop.embed(samples).reshape(n_boxes * n_samples, prop.input_dim)
            violated, margins, ref_cls, q_cls = _evaluate(reference, quantized, prop, X, cfg.mode)
            if violated.any():
                first = int(np.argmax(violated))
                return CounterExample(
                    X[first], int(ref_cls[first]), int(q_cls[first]),
                    subproblems=subproblems, elapsed=_elapsed(),
                )
            weakest = int(np.argmin(margins))
            if margins[weakest] < best_margin:
                best_margin = float(margins[weakest])
                best_witness = X[weakest]

            q_lo, q_hi = _interval_layers(quantized, prop.embed(lo), prop.embed(hi))
            if cfg.mode is VerificationMode.ANCHOR_LABEL:
                proven = _class_proven(q_lo, q_hi, np.full(n_boxes, prop.reference_class))
            else:
                r_lo, r_hi = _interval_layers(reference, prop.embed(lo), prop.embed(hi))
                winner = np.argmax(r_lo, axis=1)
                proven = _class_proven(r_lo, r_hi, winner) & _class_proven(q_lo, q_hi, winner)

            open_lo, open_hi = lo[~proven], hi[~proven]
            if not open_lo.shape[0]:
                continue
            rows = np.arange(open_lo.shape[0])
            widths = open_hi - open_lo
            dim = np.argmax(widths, axis=1)
            mid = (open_lo[rows, dim] + open_hi[rows, dim]) / 2.0
            splittable = (widths[rows, dim] >= delta) & (mid > open_lo[rows, dim]) & (mid < open_hi[rows, dim])
            exhausted += int(np.count_nonzero(~splittable))

            open_lo, open_hi = open_lo[splittable], open_hi[splittable]
            dim, mid = dim[splittable], mid[splittable]
            rows = np.arange(open_lo.shape[0])
            left_hi = open_hi.copy()
            left_hi[rows, dim] = mid
            right_lo = open_lo.copy()
            right_lo[rows, dim] = mid
            next_lower.extend([open_lo, right_lo])
            next_upper.extend([left_hi, open_hi])

        if next_lower:
            lower, upper = np.concatenate(next_lower), np.concatenate(next_upper)
        else:
            lower = upper = np.empty((0, len(prop.free_mask)))

    if exhausted:
        return _unknown("minimum box width reached")
    return Equivalent(subproblems=subproblems, elapsed=_elapsed())


def validate_counter_example(
    reference: Network,
    quantized: Network,
    prop: EquivalenceProperty,
    verdict: CounterExample,
    mode: VerificationMode = VerificationMode.ANCHOR_LABEL,
) -> None:
    """Re-check a counter-example by concrete prediction; raise if it does not hold."""
    if not prop.contains(verdict.x):
        raise VerificationError("counter-example lies outside the property's input region")
    quant_class = predict(quantized, verdict.x)
    if quant_class != verdict.quant_class:
        raise VerificationError(f"counter-example quantized class {verdict.quant_class} re-evaluates to {quant_class}")
    expected = prop.reference_class if mode is VerificationMode.ANCHOR_LABEL else predict(reference, verdict.x)
    if quant_class == expected:
        raise VerificationError("counter-example does not violate the property")


def verify_properties(
    reference: Network,
    quantized: Network,
    properties: Sequence[EquivalenceProperty],
    cfg: VerifierConfig | None = None,
    max_workers: int = 1,
) -> list[Verdict]:
    cfg = cfg or VerifierConfig()
    results: list[Verdict | None] = [None] * len(properties)
    with ThreadPoolExecutor(max_workers=max(1, max_workers)) as executor:
        futures = {
            executor.submit(check_property, reference, quantized, prop, cfg): idx
            for idx, prop in enumerate(properties)
        }
        for future in as_completed(futures):
            idx = futures[future]
            verdict = future.result()
            results[idx] = verdict
            logger.info(
                "Property verified",
                extra={"event": "property_verified", "property": idx, "verdict": verdict.kind,
                       "subproblems": verdict.subproblems, "elapsed": round(verdict.elapsed, 4)},
            )
    return results


def robustness_radius(
    net: Network,
    anchor: Sequence[float] | np.ndarray,
    free_mask: Sequence[int] | Literal["all"] = "all",
    cfg: VerifierConfig | None = None,
    hi: float = 0.5,
    tol: float = 1e-3,
    domain_clip: tuple[float, float] | None = DEFAULT_DOMAIN,
) -> float:
    """Largest radius (to ``tol``) at which the network provably keeps the anchor's class."""
    cfg = cfg or VerifierConfig()
    cfg = replace(cfg, mode=VerificationMode.ANCHOR_LABEL)

    def _robust(eps: float) -> bool:
        prop = build_properties(net, [anchor], eps, free_mask, domain_clip)[0]
        return isinstance(check_property(net, net, prop, cfg), Equivalent)

    if _robust(hi):
        return hi
    lo = 0.0
    while hi - lo > tol:
        mid = (lo + hi) / 2.0
        if _robust(mid):
            lo = mid
        else:
            hi = mid
    return lo
