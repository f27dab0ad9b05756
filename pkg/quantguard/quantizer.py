"""Symmetric uniform quantization of networks and the greedy path-following baseline.

Quantization is simulated: integer grids are stored next to their scale, and
every downstream consumer (GA, verifier, accuracy) runs the floating-point
realization ``scale * integers``.
"""
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from pydantic import ValidationError

from quantguard.errors import BitAllocationError, DatasetError, ModelFormatError, ShapeMismatchError
from quantguard.network import Dataset, Layer, Network, apply_layer, ordered_matmul
from quantguard.schemas import QuantizedLayerFile, QuantizedNetworkFile

logger = logging.getLogger("quantguard.quantizer")

MIN_BITS = 2
MAX_BITS = 52


def _check_bits(n: int) -> None:
    if n < MIN_BITS:
        raise BitAllocationError(f"bit width must be at least {MIN_BITS}, got {n}")
    if n > MAX_BITS:
        raise BitAllocationError(f"bit width above {MAX_BITS} exceeds the float64 significand, got {n}")


def int_range(n: int) -> tuple[int, int]:
    return -(2 ** (n - 1)), 2 ** (n - 1) - 1


@dataclass(frozen=True)
class BitAllocation:
    bits: tuple[int, ...]
    n_min: int = MIN_BITS
    n_max: int = MAX_BITS

    def __post_init__(self):
        bits = tuple(int(b) for b in self.bits)
        if not bits:
            raise BitAllocationError("allocation needs at least one layer")
        if not MIN_BITS <= self.n_min <= self.n_max <= MAX_BITS:
            raise BitAllocationError(
                f"bounds must satisfy {MIN_BITS} <= n_min <= n_max <= {MAX_BITS}, got [{self.n_min}, {self.n_max}]"
            )
        if any(b < self.n_min or b > self.n_max for b in bits):
            raise BitAllocationError(f"bits {bits} leave the bounds [{self.n_min}, {self.n_max}]")
        object.__setattr__(self, "bits", bits)

    @classmethod
    def uniform(cls, layers: int, n: int, n_min: int = MIN_BITS, n_max: int = MAX_BITS) -> "BitAllocation":
        return cls((n,) * layers, n_min, n_max)

    @property
    def total(self) -> int:
        return sum(self.bits)

    @property
    def is_max(self) -> bool:
        return all(b == self.n_max for b in self.bits)

    def __len__(self) -> int:
        return len(self.bits)


# --- tensor quantization -----------------------------------------------------

def clip_bound(A) -> float:
    A = np.asarray(A, dtype=np.float64)
    if A.size == 0:
        return 0.0
    return float(max(abs(A.min()), abs(A.max())))


def scale_factor(A, n: int) -> float:
    """Grid step for the symmetric range [-c, c]: ``2c / (2^n - 1)``; 1 for an all-zero tensor."""
    _check_bits(n)
    c = clip_bound(A)
    if c == 0.0:
        return 1.0
    return 2.0 * c / float(2 ** n - 1)


def round_half_away(A) -> np.ndarray:
    A = np.asarray(A, dtype=np.float64)
    mag = np.abs(A)
    floor = np.floor(mag)
    return np.sign(A) * (floor + (mag - floor >= 0.5))


def quantize_with_scale(A, s: float, n: int) -> np.ndarray:
    _check_bits(n)
    if s <= 0:
        raise ValueError(f"scale must be positive, got {s}")
    lo, hi = int_range(n)
    q = np.clip(round_half_away(np.asarray(A, dtype=np.float64) / s), lo, hi)
    return q.astype(np.int64)


def quantize_tensor(A, n: int) -> tuple[np.ndarray, float]:
    s = scale_factor(A, n)
    return quantize_with_scale(A, s, n), s


def dequantize(Q, s: float) -> np.ndarray:
    if s <= 0:
        raise ValueError(f"scale must be positive, got {s}")
    return s * np.asarray(Q, dtype=np.float64)


# --- network quantization ----------------------------------------------------

@dataclass(frozen=True, eq=False)
class QuantizedLayer:
    q_weights: np.ndarray
    q_bias: np.ndarray
    scale: float
    bits: int

    def __post_init__(self):
        _check_bits(self.bits)
        q_weights = np.array(self.q_weights, dtype=np.int64)
        q_bias = np.array(self.q_bias, dtype=np.int64)
        lo, hi = int_range(self.bits)
        for arr in (q_weights, q_bias):
            if arr.size and (arr.min() < lo or arr.max() > hi):
                raise BitAllocationError(f"integers leave [{lo}, {hi}] for {self.bits} bits")
            arr.flags.writeable = False
        if not self.scale > 0:
            raise ValueError(f"scale must be positive, got {self.scale}")
        object.__setattr__(self, "q_weights", q_weights)
        object.__setattr__(self, "q_bias", q_bias)
        object.__setattr__(self, "scale", float(self.scale))


@dataclass(frozen=True, eq=False)
class QuantizedNetwork:
    layers: tuple[QuantizedLayer, ...]
    realization: Network

    @property
    def bits(self) -> tuple[int, ...]:
        return tuple(layer.bits for layer in self.layers)

    @property
    def scales(self) -> tuple[float, ...]:
        return tuple(layer.scale for layer in self.layers)


def _as_allocation(alloc: BitAllocation | Sequence[int]) -> BitAllocation:
    if isinstance(alloc, BitAllocation):
        return alloc
    return BitAllocation(tuple(alloc))


def layer_scale(layer: Layer, n: int) -> float:
    # weights and bias share one step; taking it over both tensors at once keeps
    # a nonzero bias from being flattened by the all-zero-weights sentinel
    return scale_factor(np.concatenate([layer.weights.ravel(), layer.bias]), n)


def _realize(layer: Layer, q_weights: np.ndarray, q_bias: np.ndarray, s: float, n: int) -> tuple[QuantizedLayer, Layer]:
    qlayer = QuantizedLayer(q_weights, q_bias, s, n)
    return qlayer, Layer(dequantize(q_weights, s), dequantize(q_bias, s), layer.activation)


def quantize_network(net: Network, alloc: BitAllocation | Sequence[int]) -> QuantizedNetwork:
    alloc = _as_allocation(alloc)
    if len(alloc) != net.depth:
        raise BitAllocationError(f"allocation has {len(alloc)} entries for a {net.depth}-layer network")
    qlayers, realized = [], []
    for layer, n in zip(net.layers, alloc.bits):
        s = layer_scale(layer, n)
        qlayer, real = _realize(
            layer, quantize_with_scale(layer.weights, s, n), quantize_with_scale(layer.bias, s, n), s, n
        )
        qlayers.append(qlayer)
        realized.append(real)
    return QuantizedNetwork(tuple(qlayers), Network(tuple(realized), net.input_dim))


def gpfq_quantize(net: Network, calibration: Dataset, n: int, reverse_order: bool = False) -> QuantizedNetwork:
    """Greedy path-following quantization on the same per-layer grid as ``quantize_network``.

    Each neuron walks its input coordinates in order, carrying the residual
    ``u`` between the original pre-activation (fed by original activations)
    and the quantized one (fed by already-quantized layers). Every coordinate
    picks the grid point closest to the orthogonal projection of the running
    target onto the quantized input column. Neurons are independent, so all
    neurons of a layer advance together.
    """
    if len(calibration) == 0:
        raise DatasetError("GPFQ needs a nonempty calibration set")
    _check_bits(n)
    if calibration.input_dim != net.input_dim:
        raise ShapeMismatchError(
            f"calibration has {calibration.input_dim} features, network expects {net.input_dim}"
        )

    x_ref = calibration.features
    x_q = calibration.features
    qlayers, realized = [], []
    for idx, layer in enumerate(net.layers):
        s = layer_scale(layer, n)
        W = layer.weights
        q_weights = np.zeros(W.shape, dtype=np.int64)
        residual = np.zeros((x_ref.shape[0], W.shape[0]))
        order = range(W.shape[1] - 1, -1, -1) if reverse_order else range(W.shape[1])
        for t in order:
            target = residual + x_ref[:, t:t + 1] * W[:, t]
            column = x_q[:, t]
            norm = float(column @ column)
            projected = (column @ target) / norm if norm > 0 else W[:, t]
            q_weights[:, t] = quantize_with_scale(projected, s, n)
            residual = target - column[:, None] * (s * q_weights[:, t])
        qlayer, real = _realize(layer, q_weights, quantize_with_scale(layer.bias, s, n), s, n)
        qlayers.append(qlayer)
        realized.append(real)
        x_ref = apply_layer(layer, x_ref)
        x_q = apply_layer(real, x_q)
        logger.debug("GPFQ layer done", extra={"event": "gpfq_layer", "layer": idx,
                                              "residual_norm": float(np.linalg.norm(residual))})

    return QuantizedNetwork(tuple(qlayers), Network(tuple(realized), net.input_dim))


def quantization_error(net: Network, qnet: QuantizedNetwork, calibration: Dataset) -> float:
    """Frobenius norm of the last layer's pre-activation difference over the calibration inputs."""
    def _pre_activation(model: Network) -> np.ndarray:
        hidden = calibration.features
        for layer in model.layers[:-1]:
            hidden = apply_layer(layer, hidden)
        last = model.layers[-1]
        return ordered_matmul(hidden, last.weights) + last.bias

    return float(np.linalg.norm(_pre_activation(net) - _pre_activation(qnet.realization)))


# --- file I/O ----------------------------------------------------------------

def save_quantized(qnet: QuantizedNetwork, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    spec = QuantizedNetworkFile(
        input_dim=qnet.realization.input_dim,
        bits=list(qnet.bits),
        scales=list(qnet.scales),
        layers=[
            QuantizedLayerFile(
                weights=real.weights.tolist(),
                bias=real.bias.tolist(),
                activation=real.activation.value,
                bits=qlayer.bits,
                scale=qlayer.scale,
                q_weights=qlayer.q_weights.tolist(),
                q_bias=qlayer.q_bias.tolist(),
            )
            for qlayer, real in zip(qnet.layers, qnet.realization.layers)
        ],
    )
    path.write_text(json.dumps(spec.model_dump(), indent=1))
    return path


def load_quantized(path: str | Path) -> QuantizedNetwork:
    path = Path(path)
    try:
        spec = QuantizedNetworkFile.model_validate_json(path.read_text())
    except ValidationError as exc:
        raise ModelFormatError(f"{path}: {exc}") from exc
    qlayers, realized = [], []
    for idx, layer in enumerate(spec.layers):
        qlayer = QuantizedLayer(layer.q_weights, layer.q_bias, layer.scale, layer.bits)
        real = Layer(layer.weights, layer.bias, layer.activation)
        if not (np.array_equal(real.weights, dequantize(qlayer.q_weights, qlayer.scale))
                and np.array_equal(real.bias, dequantize(qlayer.q_bias, qlayer.scale))):
            raise ModelFormatError(f"{path}: layer {idx} weights are not scale x integers")
        qlayers.append(qlayer)
        realized.append(real)
    return QuantizedNetwork(tuple(qlayers), Network(tuple(realized), spec.input_dim))
