import json

import numpy as np
import pytest

from quantguard.errors import DatasetError, ModelFormatError, ShapeMismatchError
from quantguard.network import (
    Activation,
    Dataset,
    Layer,
    Network,
    accuracy,
    forward,
    forward_batch,
    load_dataset,
    load_network,
    load_nnet,
    ordered_matmul,
    predict,
    predict_batch,
    save_dataset,
    save_network,
)


def test_forward_two_layer(two_layer_net):
    logits = forward(two_layer_net, [0.9, 0.1])
    assert logits == pytest.approx([0.8, -0.8])
    assert predict(two_layer_net, [0.9, 0.1]) == 0
    assert predict(two_layer_net, [0.1, 0.9]) == 1


def test_relu_clamps_hidden_units():
    hidden = Layer([[1.0], [-1.0]], [0.0, 0.0], Activation.RELU)
    head = Layer([[1.0, 1.0]], [0.0], Activation.IDENTITY)
    net = Network((hidden, head))
    assert forward(net, [-2.0])[0] == 2.0
    assert forward(net, [3.0])[0] == 3.0


def test_argmax_ties_go_to_lowest_index():
    net = Network((Layer([[1.0], [1.0], [1.0]], [0.0, 0.0, 0.0], Activation.IDENTITY),))
    assert predict(net, [0.7]) == 0


def test_split_networks_compose_to_the_whole(make_random_net):
    rng = np.random.default_rng(11)
    net = make_random_net(rng, [4, 6, 5, 3])
    X = rng.uniform(size=(50, 4))
    for at in (1, 2):
        head, tail = net.split(at)
        assert head.depth + tail.depth == net.depth
        assert tail.input_dim == head.output_dim
        assert np.array_equal(forward_batch(tail, forward_batch(head, X)), forward_batch(net, X))


def test_shifting_the_output_bias_keeps_the_class(make_random_net):
    rng = np.random.default_rng(12)
    net = make_random_net(rng, [3, 5, 4])
    body, head = net.layers[:-1], net.layers[-1]
    shifted = Network((*body, Layer(head.weights, head.bias + 0.5, Activation.IDENTITY)))
    X = rng.uniform(size=(200, 3))
    assert np.array_equal(predict_batch(shifted, X), predict_batch(net, X))


def test_all_zero_network_outputs_zero_logits():
    net = Network((
        Layer(np.zeros((4, 3)), np.zeros(4), Activation.RELU),
        Layer(np.zeros((3, 4)), np.zeros(3), Activation.IDENTITY),
    ))
    X = np.random.default_rng(13).uniform(size=(20, 3))
    assert np.array_equal(forward_batch(net, X), np.zeros((20, 3)))
    assert predict_batch(net, X).tolist() == [0] * 20


def test_forward_batch_matches_forward_bit_for_bit():
    rng = np.random.default_rng(5)
    net = Network((
        Layer(rng.normal(size=(7, 5)), rng.normal(size=7), Activation.RELU),
        Layer(rng.normal(size=(3, 7)), rng.normal(size=3), Activation.IDENTITY),
    ))
    X = rng.uniform(size=(32, 5))
    batch = forward_batch(net, X)
    for row, x in zip(batch, X):
        assert np.array_equal(row, forward(net, x))
    assert np.array_equal(predict_batch(net, X), np.argmax(batch, axis=1))


def test_ordered_matmul_agrees_with_matmul():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(4, 6))
    W = rng.normal(size=(3, 6))
    np.testing.assert_allclose(ordered_matmul(X, W), X @ W.T, rtol=1e-12, atol=1e-12)


def test_shape_chain_is_checked():
    with pytest.raises(ShapeMismatchError, match="layer 1"):
        Network((
            Layer(np.ones((3, 2)), np.zeros(3)),
            Layer(np.ones((2, 4)), np.zeros(2), Activation.IDENTITY),
        ))


def test_bias_length_is_checked():
    with pytest.raises(ShapeMismatchError):
        Layer(np.ones((3, 2)), np.zeros(2))


def test_forward_rejects_wrong_input_width(two_layer_net):
    with pytest.raises(ShapeMismatchError):
        forward(two_layer_net, [0.1, 0.2, 0.3])


def test_weights_are_read_only(two_layer_net):
    with pytest.raises(ValueError):
        two_layer_net.layers[0].weights[0, 0] = 5.0


def test_save_and_load_network_is_exact(tmp_path, make_random_net):
    net = make_random_net(np.random.default_rng(11), [3, 5, 2])
    loaded = load_network(save_network(net, tmp_path / "model.json"))
    assert loaded.input_dim == 3
    for a, b in zip(net.layers, loaded.layers):
        assert np.array_equal(a.weights, b.weights)
        assert np.array_equal(a.bias, b.bias)
        assert a.activation is b.activation


def test_load_network_rejects_bad_schema(tmp_path):
    path = tmp_path / "broken.json"
    path.write_text(json.dumps({"input_dim": 2, "layers": [{"weights": [[1.0, 2.0]]}]}))
    with pytest.raises(ModelFormatError):
        load_network(path)


def test_load_network_reports_shape_mismatch(tmp_path):
    path = tmp_path / "mismatch.json"
    path.write_text(json.dumps({
        "input_dim": 2,
        "layers": [{"weights": [[1.0, 2.0]], "bias": [0.0, 1.0], "activation": "relu"}],
    }))
    with pytest.raises(ShapeMismatchError):
        load_network(path)


NNET_TEXT = """// two inputs, one hidden layer
2,2,2,2,
2,2,2,
0,
0.0,0.0,
1.0,1.0,
0.5,0.5,0.5,
1.0,1.0,1.0,
1.0,0.0,
0.0,1.0,
0.0,
0.0,
1.0,-1.0,
-1.0,1.0,
0.0,
0.0,
"""


def test_load_nnet_matches_the_json_network(tmp_path, two_layer_net):
    path = tmp_path / "toy.nnet"
    path.write_text(NNET_TEXT)
    net = load_network(path)
    assert net.input_dim == 2 and net.depth == 2
    assert [layer.activation for layer in net.layers] == [Activation.RELU, Activation.IDENTITY]
    X = np.random.default_rng(14).uniform(size=(30, 2))
    assert np.array_equal(forward_batch(net, X), forward_batch(two_layer_net, X))


@pytest.mark.parametrize("text", [
    NNET_TEXT.rsplit("0.0,\n", 1)[0],
    NNET_TEXT + "0.0,\n",
    NNET_TEXT.replace("1.0,-1.0,", "1.0,oops,"),
])
def test_load_nnet_rejects_malformed_files(tmp_path, text):
    path = tmp_path / "bad.nnet"
    path.write_text(text)
    with pytest.raises(ModelFormatError):
        load_nnet(path)


def test_dataset_csv_round_trip(tmp_path):
    data = Dataset(np.array([[0.1, 0.2], [0.3, 1.0 / 3.0]]), np.array([0, 2]), 3)
    path = save_dataset(data, tmp_path / "data.csv")
    loaded = load_dataset(path, has_header=True, num_classes=3)
    assert np.array_equal(loaded.features, data.features)
    assert loaded.labels.tolist() == [0, 2]
    assert loaded.num_classes == 3


def test_dataset_rejects_out_of_range_labels():
    with pytest.raises(DatasetError):
        Dataset(np.zeros((2, 2)), np.array([0, 3]), 3)


def test_dataset_rejects_non_integer_labels(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("0.1,0.2,0.5\n")
    with pytest.raises(DatasetError):
        load_dataset(path)


def test_accuracy(two_layer_net):
    data = Dataset(np.array([[0.9, 0.1], [0.1, 0.9], [0.8, 0.3]]), np.array([0, 1, 1]), 2)
    assert accuracy(two_layer_net, data) == pytest.approx(2 / 3)


def test_accuracy_checks_feature_count(two_layer_net):
    data = Dataset(np.zeros((2, 3)), np.array([0, 1]), 2)
    with pytest.raises(ShapeMismatchError):
        accuracy(two_layer_net, data)
