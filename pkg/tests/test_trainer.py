import numpy as np
import pytest

from quantguard.errors import DatasetError, TrainingDivergedError
from quantguard.network import Activation, Dataset, accuracy
from quantguard.trainer import init_network, train_mlp


def test_init_network_shapes():
    net = init_network(4, [3, 5], 2, seed=1)
    assert [layer.weights.shape for layer in net.layers] == [(3, 4), (5, 3), (2, 5)]
    assert [layer.activation for layer in net.layers] == [Activation.RELU, Activation.RELU, Activation.IDENTITY]
    assert all(not layer.bias.any() for layer in net.layers)


def test_zero_epochs_returns_initialization(blobs):
    net = train_mlp(blobs, [4], epochs=0, seed=7)
    init = init_network(blobs.input_dim, [4], blobs.num_classes, seed=7)
    for a, b in zip(net.layers, init.layers):
        assert np.array_equal(a.weights, b.weights)


def test_training_fits_separated_blobs(trained_net, blobs):
    assert accuracy(trained_net, blobs) >= 0.9


def test_training_is_deterministic(blobs):
    a = train_mlp(blobs, [3], epochs=50, seed=2)
    b = train_mlp(blobs, [3], epochs=50, seed=2)
    for la, lb in zip(a.layers, b.layers):
        assert np.array_equal(la.weights, lb.weights)


def test_divergence_is_reported(blobs):
    with pytest.raises(TrainingDivergedError):
        train_mlp(blobs, [4], learning_rate=1e200, epochs=50, seed=0)


def test_empty_dataset_is_rejected():
    with pytest.raises(DatasetError):
        train_mlp(Dataset(np.empty((0, 2)), np.empty(0), 2), [2])
