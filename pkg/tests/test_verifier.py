import time

import numpy as np
import pytest

from quantguard.errors import ModelFormatError, PropertyError, ShapeMismatchError, VerificationError
from quantguard.network import Activation, Layer, Network, forward_batch, predict, predict_batch
from quantguard.quantizer import quantize_network
from quantguard.verifier import (
    BUDGET_EXHAUSTED,
    MAX_CHUNK_VALUES,
    Box,
    CounterExample,
    EquivalenceProperty,
    Equivalent,
    Unknown,
    VerificationMode,
    VerifierConfig,
    build_properties,
    check_property,
    concrete_check,
    interval_bounds,
    load_anchors,
    properties_from_anchors,
    random_feature_mask,
    robustness_radius,
    save_anchors,
    select_class_anchors,
    validate_counter_example,
    verify_properties,
)


def _grid_violations(quantized: Network, prop: EquivalenceProperty, steps: int) -> bool:
    region = prop.region()
    axes = [np.linspace(lo, hi, steps) for lo, hi in zip(region.lower, region.upper)]
    mesh = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, len(axes))
    return bool(np.any(predict_batch(quantized, prop.embed(mesh)) != prop.reference_class))


def _oracle_run(seed: int, make_random_net) -> None:
    rng = np.random.default_rng(seed)
    hidden = [int(rng.integers(2, 9))] if rng.random() < 0.5 else []
    net = make_random_net(rng, [2, *hidden, int(rng.integers(2, 4))])
    quantized = quantize_network(net, [3] * net.depth).realization
    anchor = rng.uniform(0.2, 0.8, size=2)
    for eps in (0.01, 0.1):
        prop = build_properties(net, [anchor], eps)[0]
        verdict = check_property(net, quantized, prop, VerifierConfig(max_subproblems=20_000))
        steps = int(round(2 * eps / 1e-3)) + 1
        if isinstance(verdict, Equivalent):
            assert not _grid_violations(quantized, prop, steps), f"seed {seed} eps {eps}"
        elif isinstance(verdict, CounterExample):
            validate_counter_example(net, quantized, prop, verdict)


def test_property_region_respects_domain_and_mask():
    prop = EquivalenceProperty(np.array([0.05, 0.5, 0.9]), 0.1, (0, 2), 1)
    region = prop.region()
    assert region.lower.tolist() == pytest.approx([0.0, 0.8])
    assert region.upper.tolist() == pytest.approx([0.15, 1.0])
    assert prop.pinned == 1
    assert prop.contains([0.0, 0.5, 0.95])
    assert not prop.contains([0.0, 0.51, 0.95])
    assert prop.embed(np.array([[0.1, 0.95]])).tolist() == [[0.1, 0.5, 0.95]]


def test_property_validation():
    with pytest.raises(PropertyError):
        EquivalenceProperty(np.array([0.5]), -0.1, (0,), 0)
    with pytest.raises(PropertyError):
        EquivalenceProperty(np.array([0.5]), 0.1, (1,), 0)
    with pytest.raises(PropertyError):
        EquivalenceProperty(np.array([1.5]), 0.1, (0,), 0)


def test_interval_bounds_contain_concrete_outputs(make_random_net):
    rng = np.random.default_rng(2)
    net = make_random_net(rng, [3, 6, 4, 2])
    prop = build_properties(net, [rng.uniform(0.2, 0.8, size=3)], 0.05)[0]
    box = prop.region()
    lo, hi = interval_bounds(net, box, prop)
    X = prop.embed(rng.uniform(box.lower, box.upper, size=(500, 3)))
    logits = forward_batch(net, X)
    assert np.all(logits >= lo) and np.all(logits <= hi)


def test_robust_anchor_is_equivalent(diff_net):
    quantized = quantize_network(diff_net, [2]).realization
    prop = build_properties(diff_net, [[0.9, 0.1]], 0.05)[0]
    verdict = check_property(diff_net, quantized, prop)
    assert isinstance(verdict, Equivalent)
    assert verdict.subproblems == 1


def test_boundary_anchor_yields_counter_example(diff_net):
    prop = build_properties(diff_net, [[0.5, 0.5]], 0.1)[0]
    assert prop.reference_class == 0
    verdict = check_property(diff_net, diff_net, prop)
    assert isinstance(verdict, CounterExample)
    assert verdict.quant_class == 1
    assert prop.contains(verdict.x)
    validate_counter_example(diff_net, diff_net, prop, verdict)


def test_pairwise_mode_compares_both_networks(diff_net):
    prop = build_properties(diff_net, [[0.5, 0.5]], 0.1)[0]
    cfg = VerifierConfig(mode=VerificationMode.POINTWISE_PAIR, max_subproblems=50)
    verdict = check_property(diff_net, diff_net, prop, cfg)
    # identical networks never disagree, but the boundary can never be proven away
    assert isinstance(verdict, Unknown)
    assert verdict.reason == "subproblem limit reached"


def test_zero_radius_is_a_point_check(diff_net):
    quantized = quantize_network(diff_net, [2]).realization
    for anchor in ([0.9, 0.1], [0.3, 0.6]):
        prop = build_properties(diff_net, [anchor], 0.0)[0]
        verdict = check_property(diff_net, quantized, prop)
        assert isinstance(verdict, Equivalent) == (predict(quantized, anchor) == prop.reference_class)
        assert verdict.subproblems == 1


def test_expired_deadline_gives_unknown(diff_net):
    prop = build_properties(diff_net, [[0.5, 0.5]], 0.1)[0]
    verdict = check_property(diff_net, diff_net, prop, VerifierConfig(deadline=time.monotonic() - 1.0))
    assert isinstance(verdict, Unknown)
    assert verdict.reason == BUDGET_EXHAUSTED


def test_min_box_width_gives_unknown(diff_net):
    prop = build_properties(diff_net, [[0.5, 0.5]], 0.1)[0]
    cfg = VerifierConfig(mode=VerificationMode.POINTWISE_PAIR, min_box_width=0.05)
    verdict = check_property(diff_net, diff_net, prop, cfg)
    assert isinstance(verdict, Unknown)
    assert verdict.reason == "minimum box width reached"
    assert verdict.best_witness is not None


def test_validate_counter_example_rejects_fakes(diff_net):
    prop = build_properties(diff_net, [[0.9, 0.1]], 0.05)[0]
    fake = CounterExample(np.array([0.9, 0.1]), 0, 1)
    with pytest.raises(VerificationError):
        validate_counter_example(diff_net, diff_net, prop, fake)
    outside = CounterExample(np.array([0.5, 0.5]), 0, 0)
    with pytest.raises(VerificationError):
        validate_counter_example(diff_net, diff_net, prop, outside)


def test_dimension_mismatch_is_rejected(diff_net):
    wide = Network((Layer(np.ones((2, 3)), np.zeros(2), Activation.IDENTITY),))
    prop = build_properties(diff_net, [[0.9, 0.1]], 0.05)[0]
    with pytest.raises(ShapeMismatchError):
        check_property(diff_net, wide, prop)
    with pytest.raises(ShapeMismatchError):
        build_properties(diff_net, [[0.1, 0.2, 0.3]], 0.05)


def test_verify_properties_keeps_property_order(diff_net):
    quantized = quantize_network(diff_net, [2]).realization
    props = build_properties(diff_net, [[0.9, 0.1], [0.5, 0.5], [0.1, 0.9]], 0.05)
    verdicts = verify_properties(diff_net, quantized, props, max_workers=3)
    assert [v.kind for v in verdicts] == ["equivalent", "counter_example", "equivalent"]


def test_counter_example_is_deterministic(make_random_net):
    rng = np.random.default_rng(8)
    net = make_random_net(rng, [2, 6, 3])
    quantized = quantize_network(net, [2, 2]).realization
    props = build_properties(net, rng.uniform(0.2, 0.8, size=(5, 2)), 0.2)
    first = verify_properties(net, quantized, props, max_workers=1)
    second = verify_properties(net, quantized, props, max_workers=4)
    for a, b in zip(first, second):
        assert a.kind == b.kind
        if isinstance(a, CounterExample):
            assert np.array_equal(a.x, b.x)


def test_feature_subset_keeps_pinned_values(make_random_net):
    rng = np.random.default_rng(9)
    net = make_random_net(rng, [6, 5, 3])
    quantized = quantize_network(net, [2, 2]).realization
    mask = random_feature_mask(6, 2, seed=1)
    assert len(mask) == 2 and list(mask) == sorted(mask)
    anchor = rng.uniform(0.2, 0.8, size=6)
    prop = build_properties(net, [anchor], 0.3, mask)[0]
    verdict = check_property(net, quantized, prop)
    if isinstance(verdict, CounterExample):
        pinned = [i for i in range(6) if i not in mask]
        assert np.array_equal(verdict.x[pinned], anchor[pinned])


def test_concrete_check(diff_net):
    assert concrete_check(diff_net, diff_net, [0.3, 0.2])


def test_robustness_radius(diff_net):
    radius = robustness_radius(diff_net, [0.9, 0.1], tol=1e-3)
    assert 0.398 <= radius <= 0.4


def test_select_class_anchors(trained_net, blobs):
    anchors = select_class_anchors(trained_net, blobs)
    assert anchors.shape == (3, 2)
    assert predict_batch(trained_net, anchors).tolist() == [0, 1, 2]


def test_anchor_file_round_trip(tmp_path, diff_net):
    props = build_properties(diff_net, [[0.9, 0.1]], 0.05) + build_properties(diff_net, [[0.1, 0.9]], 0.02, [1])
    entries = load_anchors(save_anchors(props, tmp_path / "anchors.json"))
    assert entries[0].free_mask == "all"
    assert entries[1].free_mask == [1]
    rebuilt = properties_from_anchors(diff_net, entries, default_epsilon=None)
    assert [p.epsilon for p in rebuilt] == [0.05, 0.02]
    assert [p.reference_class for p in rebuilt] == [0, 1]


def test_anchor_without_radius_needs_a_default(tmp_path, diff_net):
    path = tmp_path / "anchors.json"
    path.write_text('[{"input": [0.9, 0.1]}]')
    with pytest.raises(PropertyError):
        properties_from_anchors(diff_net, load_anchors(path), default_epsilon=None)
    assert properties_from_anchors(diff_net, load_anchors(path), default_epsilon=0.1)[0].epsilon == 0.1


def test_box_rejects_inverted_corners():
    with pytest.raises(PropertyError):
        Box(np.array([1.0]), np.array([0.0]))


def test_anchor_domain_admits_inputs_outside_the_unit_box(tmp_path, diff_net):
    path = tmp_path / "anchors.json"
    path.write_text('[{"input": [-0.3, 0.2], "epsilon": 0.1, "domain": [-1.0, 1.0]}, '
                    '{"input": [-0.3, 0.2], "epsilon": 0.1}]')
    entries = load_anchors(path)
    with pytest.raises(PropertyError):
        properties_from_anchors(diff_net, entries, default_epsilon=None)
    props = properties_from_anchors(diff_net, entries, default_epsilon=None, domain_clip=(-2.0, 2.0))
    assert [p.domain_clip for p in props] == [(-1.0, 1.0), (-2.0, 2.0)]
    assert props[0].region().lower.tolist() == pytest.approx([-0.4, 0.1])
    assert isinstance(check_property(diff_net, diff_net, props[0]), Equivalent)
    assert load_anchors(save_anchors(props, tmp_path / "saved.json"))[0].domain == (-1.0, 1.0)


def test_inverted_anchor_domain_is_rejected(tmp_path):
    path = tmp_path / "anchors.json"
    path.write_text('[{"input": [0.5], "epsilon": 0.1, "domain": [1.0, -1.0]}]')
    with pytest.raises(ModelFormatError):
        load_anchors(path)


def test_interval_bounds_shrink_on_sub_boxes(make_random_net):
    rng = np.random.default_rng(21)
    for _ in range(20):
        net = make_random_net(rng, [2, 6, 5, 3])
        prop = EquivalenceProperty(np.zeros(2), 1.0, (0, 1), 0, domain_clip=None)
        lower = rng.uniform(-1.0, 0.5, size=2)
        upper = lower + rng.uniform(0.01, 0.5, size=2)
        for _ in range(10):
            sub_lower = np.minimum(lower + rng.uniform(0.0, 1.0, size=2) * (upper - lower), upper)
            sub_upper = np.minimum(sub_lower + rng.uniform(0.0, 1.0, size=2) * (upper - sub_lower), upper)
            lo, hi = interval_bounds(net, Box(lower, upper), prop)
            sub_lo, sub_hi = interval_bounds(net, Box(sub_lower, sub_upper), prop)
            assert np.all(sub_lo >= lo) and np.all(sub_hi <= hi)
            # a class proven on the box stays proven on every sub-box
            for cls in range(3):
                if lo[cls] > np.delete(hi, cls).max():
                    assert sub_lo[cls] > np.delete(sub_hi, cls).max()


def test_equivalent_verdicts_survive_dense_random_sampling(make_random_net):
    rng = np.random.default_rng(22)
    checked = 0
    for _ in range(10):
        net = make_random_net(rng, [2, int(rng.integers(3, 8)), 3])
        quantized = quantize_network(net, [16, 16]).realization
        prop = build_properties(net, [rng.uniform(0.2, 0.8, size=2)], 0.02)[0]
        if not isinstance(check_property(net, quantized, prop), Equivalent):
            continue
        region = prop.region()
        X = prop.embed(rng.uniform(region.lower, region.upper, size=(100_000, 2)))
        assert np.all(predict_batch(quantized, X) == prop.reference_class)
        checked += 1
    assert checked > 0


def _flat_margin_net() -> Network:
    """Class 0 wins by a constant 0.01 that interval bounds only see on narrow boxes."""
    return Network((
        Layer([[1.0], [1.0]], [0.0, 0.0], Activation.RELU),
        Layer([[1.0, -1.0], [0.0, 0.0]], [0.01, 0.0], Activation.IDENTITY),
    ))


def test_subproblem_limit_is_never_overshot():
    net = _flat_margin_net()
    prop = build_properties(net, [[0.5]], 0.25)[0]
    assert isinstance(check_property(net, net, prop), Equivalent)
    for limit in (1, 10, 50):
        verdict = check_property(net, net, prop, VerifierConfig(max_subproblems=limit))
        assert isinstance(verdict, Unknown)
        assert verdict.reason == "subproblem limit reached"
        assert verdict.subproblems == limit


def test_chunk_rows_shrink_with_input_width(diff_net):
    cfg = VerifierConfig()
    small = build_properties(diff_net, [[0.5, 0.5]], 0.1)[0]
    assert cfg.rows_per_chunk(small, 2) == cfg.chunk_size
    wide = EquivalenceProperty(np.full(784, 0.5), 0.1, (0, 1, 2, 3), 0)
    rows = cfg.rows_per_chunk(wide, 10)
    assert rows < cfg.chunk_size
    assert rows * cfg.samples_per_box(wide, 10) * wide.input_dim <= MAX_CHUNK_VALUES


@pytest.mark.parametrize("seed", range(10))
def test_verdicts_agree_with_grid_oracle(seed, make_random_net):
    _oracle_run(seed, make_random_net)


@pytest.mark.slow
def test_verdicts_agree_with_grid_oracle_at_scale(make_random_net):
    for seed in range(10, 210):
        _oracle_run(seed, make_random_net)
