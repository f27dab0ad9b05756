import numpy as np
import pytest

from quantguard.datasets import make_blobs
from quantguard.network import Activation, Dataset, Layer, Network
from quantguard.trainer import train_mlp


@pytest.fixture
def diff_net() -> Network:
    """Single identity layer scoring x0 - x1 against x1 - x0; the class flips on x0 == x1."""
    return Network((Layer([[1.0, -1.0], [-1.0, 1.0]], [0.0, 0.0], Activation.IDENTITY),))


@pytest.fixture
def two_layer_net() -> Network:
    hidden = Layer([[1.0, 0.0], [0.0, 1.0]], [0.0, 0.0], Activation.RELU)
    head = Layer([[1.0, -1.0], [-1.0, 1.0]], [0.0, 0.0], Activation.IDENTITY)
    return Network((hidden, head))


@pytest.fixture
def blobs() -> Dataset:
    return make_blobs(n_per_class=20, num_classes=3, input_dim=2, spread=0.03, seed=3, min_separation=0.35)


@pytest.fixture
def trained_net(blobs) -> Network:
    return train_mlp(blobs, [4], learning_rate=0.1, epochs=600, seed=0)


@pytest.fixture
def quiet_settings(tmp_path, monkeypatch):
    """Point every configured directory into tmp_path."""
    monkeypatch.setenv("LOGS_DIR", str(tmp_path / "logs"))
    monkeypatch.setenv("DATA_DIR", str(tmp_path / "data"))
    monkeypatch.setenv("RUNS_DIR", str(tmp_path / "runs"))
    monkeypatch.setenv("MAX_WORKERS", "2")
    return tmp_path


def random_net(rng: np.random.Generator, widths: list[int]) -> Network:
    layers = []
    for idx, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
        last = idx == len(widths) - 2
        layers.append(Layer(
            rng.normal(0.0, 1.0, size=(fan_out, fan_in)),
            rng.normal(0.0, 0.3, size=fan_out),
            Activation.IDENTITY if last else Activation.RELU,
        ))
    return Network(tuple(layers))


@pytest.fixture
def make_random_net():
    return random_net
