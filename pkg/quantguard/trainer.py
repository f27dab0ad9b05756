"""Full-batch softmax cross-entropy training for small ReLU MLPs."""
import logging
from typing import Sequence

import numpy as np

from quantguard.errors import DatasetError, TrainingDivergedError
from quantguard.network import Activation, Dataset, Layer, Network

logger = logging.getLogger("quantguard.trainer")

LOG_EVERY = 250


def init_network(input_dim: int, hidden_widths: Sequence[int], output_dim: int, seed: int) -> Network:
    """He-normal weights, zero biases, ReLU hidden layers and an identity head."""
    if input_dim < 1 or output_dim < 1 or any(w < 1 for w in hidden_widths):
        raise ValueError("layer widths must be positive")
    rng = np.random.default_rng(seed)
    widths = [input_dim, *hidden_widths, output_dim]
    layers = []
    for idx, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
        last = idx == len(widths) - 2
        layers.append(
            Layer(
                rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_out, fan_in)),
                np.zeros(fan_out),
                Activation.IDENTITY if last else Activation.RELU,
            )
        )
    return Network(tuple(layers), input_dim)


def _softmax_cross_entropy(logits: np.ndarray, onehot: np.ndarray) -> tuple[float, np.ndarray]:
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    probs = exp / exp.sum(axis=1, keepdims=True)
    log_probs = shifted - np.log(exp.sum(axis=1, keepdims=True))
    loss = float(-np.mean(np.sum(onehot * log_probs, axis=1)))
    return loss, probs


def train_mlp(
    data: Dataset,
    hidden_widths: Sequence[int],
    learning_rate: float = 0.1,
    epochs: int = 2000,
    seed: int = 0,
    momentum: float = 0.9,
) -> Network:
    if len(data) == 0:
        raise DatasetError("cannot train on an empty dataset")
    if epochs < 0:
        raise ValueError("epochs must be non-negative")

    net = init_network(data.input_dim, hidden_widths, data.num_classes, seed)
    if epochs == 0:
        return net

    weights = [layer.weights.copy() for layer in net.layers]
    biases = [layer.bias.copy() for layer in net.layers]
    vel_w = [np.zeros_like(w) for w in weights]
    vel_b = [np.zeros_like(b) for b in biases]
    X = data.features
    onehot = np.eye(data.num_classes)[data.labels]
    n = len(data)
    depth = len(weights)

    with np.errstate(over="ignore", invalid="ignore"):
        for epoch in range(epochs):
            acts = [X]
            pres = []
            for idx in range(depth):
                pre = acts[-1] @ weights[idx].T + biases[idx]
                pres.append(pre)
                acts.append(np.maximum(pre, 0.0) if idx < depth - 1 else pre)

            loss, probs = _softmax_cross_entropy(acts[-1], onehot)
            if not np.isfinite(loss):
                logger.error("Training diverged", extra={"event": "train_diverged", "epoch": epoch})
                raise TrainingDivergedError(epoch, loss)

            grad = (probs - onehot) / n
            for idx in reversed(range(depth)):
                grad_w = grad.T @ acts[idx]
                grad_b = grad.sum(axis=0)
                if idx > 0:
                    grad = (grad @ weights[idx]) * (pres[idx - 1] > 0)
                vel_w[idx] = momentum * vel_w[idx] - learning_rate * grad_w
                vel_b[idx] = momentum * vel_b[idx] - learning_rate * grad_b
                weights[idx] += vel_w[idx]
                biases[idx] += vel_b[idx]

            if epoch % LOG_EVERY == 0:
                logger.debug("Training progress", extra={"event": "train_progress", "epoch": epoch, "loss": loss})

    if not all(np.all(np.isfinite(w)) for w in weights + biases):
        raise TrainingDivergedError(epochs, float("nan"))

    trained = Network(
        tuple(Layer(w, b, layer.activation) for w, b, layer in zip(weights, biases, net.layers)),
        net.input_dim,
    )
    logger.info("Training finished", extra={"event": "train_complete", "epochs": epochs,
                                            "hidden_widths": list(hidden_widths), "seed": seed})
    return trained
