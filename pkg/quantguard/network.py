"""Feedforward ReLU classifiers: types, exact inference and file I/O."""
import json
import logging
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Sequence

import numpy as np
from pydantic import ValidationError

from quantguard.errors import DatasetError, ModelFormatError, ShapeMismatchError
from quantguard.schemas import LayerFile, NetworkFile

logger = logging.getLogger("quantguard.network")

Logits = np.ndarray


class Activation(str, Enum):
    RELU = "relu"
    IDENTITY = "identity"


def _frozen(values, dtype=np.float64) -> np.ndarray:
    arr = np.array(values, dtype=dtype)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class Layer:
    weights: np.ndarray
    bias: np.ndarray
    activation: Activation = Activation.RELU

    def __post_init__(self):
        weights = _frozen(self.weights)
        bias = _frozen(self.bias)
        if weights.ndim != 2:
            raise ShapeMismatchError(f"weights must be a matrix, got shape {weights.shape}")
        if bias.shape != (weights.shape[0],):
            raise ShapeMismatchError(
                f"bias length {bias.shape} does not match {weights.shape[0]} output rows"
            )
        if not (np.all(np.isfinite(weights)) and np.all(np.isfinite(bias))):
            raise ShapeMismatchError("weights and bias must be finite")
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "bias", bias)
        object.__setattr__(self, "activation", Activation(self.activation))

    @property
    def in_dim(self) -> int:
        return self.weights.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights.shape[0]


@dataclass(frozen=True, eq=False)
class Network:
    layers: tuple[Layer, ...]
    input_dim: int = field(default=0)

    def __post_init__(self):
        layers = tuple(self.layers)
        if not layers:
            raise ShapeMismatchError("network needs at least one layer")
        input_dim = self.input_dim or layers[0].in_dim
        expected = input_dim
        for idx, layer in enumerate(layers):
            if layer.in_dim != expected:
                raise ShapeMismatchError(
                    f"layer {idx} expects {layer.in_dim} inputs but receives {expected}"
                )
            expected = layer.out_dim
        object.__setattr__(self, "layers", layers)
        object.__setattr__(self, "input_dim", input_dim)

    @property
    def output_dim(self) -> int:
        return self.layers[-1].out_dim

    @property
    def depth(self) -> int:
        return len(self.layers)

    def split(self, at: int) -> tuple["Network", "Network"]:
        return Network(self.layers[:at]), Network(self.layers[at:])


@dataclass(frozen=True, eq=False)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    num_classes: int = 0

    def __post_init__(self):
        features = _frozen(self.features)
        labels = _frozen(self.labels, dtype=np.int64)
        if features.ndim != 2 or labels.shape != (features.shape[0],):
            raise DatasetError(
                f"features {features.shape} and labels {labels.shape} do not line up"
            )
        if not np.all(np.isfinite(features)):
            raise DatasetError("features must be finite")
        num_classes = self.num_classes or (int(labels.max()) + 1 if labels.size else 0)
        if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
            raise DatasetError(f"labels must lie in [0, {num_classes})")
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "num_classes", num_classes)

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def input_dim(self) -> int:
        return self.features.shape[1]

    def subset(self, indices: Sequence[int]) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.features[idx], self.labels[idx], self.num_classes)


def ordered_matmul(X: np.ndarray, W: np.ndarray) -> np.ndarray:
    """``X @ W.T`` accumulated over input index 0, 1, 2, ... for every row.

    BLAS is free to reorder the summation; this is not, so the concrete
    evaluation and the interval bounds agree bit-for-bit across machines.
    """
    acc = np.zeros((X.shape[0], W.shape[0]), dtype=np.float64)
    for j in range(W.shape[1]):
        acc += X[:, j:j + 1] * W[:, j]
    return acc


def apply_layer(layer: Layer, X: np.ndarray) -> np.ndarray:
    pre = ordered_matmul(X, layer.weights) + layer.bias
    if layer.activation is Activation.RELU:
        return np.maximum(pre, 0.0)
    return pre


def _check_input(net: Network, X: np.ndarray) -> None:
    if X.shape[-1] != net.input_dim:
        raise ShapeMismatchError(f"input has {X.shape[-1]} features, network expects {net.input_dim}")
    if not np.all(np.isfinite(X)):
        raise ShapeMismatchError("input must be finite")


def forward_batch(net: Network, X: np.ndarray) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    _check_input(net, X)
    out = X
    for layer in net.layers:
        out = apply_layer(layer, out)
    return out


def forward(net: Network, x: Sequence[float] | np.ndarray) -> Logits:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ShapeMismatchError(f"forward expects a single input vector, got shape {x.shape}")
    return forward_batch(net, x[None, :])[0]


def predict_batch(net: Network, X: np.ndarray) -> np.ndarray:
    # np.argmax returns the first maximum: ties go to the lowest class index
    return np.argmax(forward_batch(net, X), axis=1)


def predict(net: Network, x: Sequence[float] | np.ndarray) -> int:
    return int(np.argmax(forward(net, x)))


def accuracy(net: Network, data: Dataset) -> float:
    if data.input_dim != net.input_dim:
        raise ShapeMismatchError(
            f"dataset has {data.input_dim} features, network expects {net.input_dim}"
        )
    if len(data) == 0:
        return 0.0
    return float(np.mean(predict_batch(net, data.features) == data.labels))


# --- file I/O ----------------------------------------------------------------

def network_from_file(spec: NetworkFile) -> Network:
    layers = []
    for idx, layer in enumerate(spec.layers):
        try:
            layers.append(Layer(layer.weights, layer.bias, Activation(layer.activation)))
        except ValueError as exc:
            raise ShapeMismatchError(f"layer {idx}: {exc}") from exc
    return Network(tuple(layers), spec.input_dim)


def network_to_file(net: Network) -> NetworkFile:
    return NetworkFile(
        input_dim=net.input_dim,
        layers=[
            LayerFile(
                weights=layer.weights.tolist(),
                bias=layer.bias.tolist(),
                activation=layer.activation.value,
            )
            for layer in net.layers
        ],
    )


def _nnet_rows(text: str) -> list[list[float]]:
    rows = []
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("//"):
            continue
        rows.append([float(token) for token in line.split(",") if token.strip()])
    return rows


def load_nnet(path: str | Path) -> Network:
    """Read the ``.nnet`` text format (ACAS Xu style).

    The network is returned over the file's normalized inputs; the stored
    input ranges and output scaling are not folded in (the output scaling is
    positive and leaves the argmax unchanged).
    """
    path = Path(path)
    try:
        rows = _nnet_rows(path.read_text())
        num_layers, input_size = int(rows[0][0]), int(rows[0][1])
        sizes = [int(v) for v in rows[1]]
        if len(sizes) != num_layers + 1 or sizes[0] != input_size:
            raise ModelFormatError(f"{path}: layer sizes {sizes} do not match the header")
        cursor = 7  # header, sizes, symmetric flag, mins, maxes, means, ranges
        layers = []
        for idx, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            weights = rows[cursor:cursor + fan_out]
            cursor += fan_out
            bias = [row[0] for row in rows[cursor:cursor + fan_out]]
            cursor += fan_out
            if len(weights) != fan_out or any(len(row) != fan_in for row in weights) or len(bias) != fan_out:
                raise ModelFormatError(f"{path}: layer {idx} is truncated or malformed")
            last = idx == num_layers - 1
            layers.append(Layer(weights, bias, Activation.IDENTITY if last else Activation.RELU))
    except (IndexError, ValueError) as exc:
        raise ModelFormatError(f"{path}: {exc}") from exc
    if cursor != len(rows):
        raise ModelFormatError(f"{path}: {len(rows) - cursor} trailing rows after the last layer")
    return Network(tuple(layers), input_size)


def load_network(path: str | Path) -> Network:
    path = Path(path)
    if path.suffix == ".nnet":
        return load_nnet(path)
    try:
        spec = NetworkFile.model_validate_json(path.read_text())
    except ValidationError as exc:
        raise ModelFormatError(f"{path}: {exc}") from exc
    net = network_from_file(spec)
    logger.debug("Loaded network", extra={"event": "network_loaded", "path": str(path),
                                          "layers": net.depth, "input_dim": net.input_dim})
    return net


def save_network(net: Network, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(network_to_file(net).model_dump(), indent=1))
    return path


def load_dataset(path: str | Path, has_header: bool = False, num_classes: int | None = None) -> Dataset:
    path = Path(path)
    try:
        table = np.loadtxt(path, delimiter=",", skiprows=1 if has_header else 0, ndmin=2)
    except ValueError as exc:
        raise DatasetError(f"{path}: {exc}") from exc
    if table.shape[1] < 2:
        raise DatasetError(f"{path}: need at least one feature column and a label column")
    labels = table[:, -1]
    if not np.all(labels == np.round(labels)):
        raise DatasetError(f"{path}: labels must be integers")
    return Dataset(table[:, :-1], labels.astype(np.int64), num_classes or 0)


def save_dataset(data: Dataset, path: str | Path, header: bool = True) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    names = [f"x{i}" for i in range(data.input_dim)] + ["label"]
    table = np.column_stack([data.features, data.labels.astype(np.float64)])
    fmt = ["%.17g"] * data.input_dim + ["%d"]
    np.savetxt(path, table, delimiter=",", fmt=fmt, header=",".join(names) if header else "", comments="")
    return path
