import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nnsplit.modelgraph import LayerKind, ToyConfig, build_toy_convtasnet
from nnsplit.planner import make_plan
from nnsplit.modelgraph import profile
from nnsplit.tensorkit import (
    SDR_CAP_DB,
    LayerError,
    MetricError,
    ShapeError,
    SizingError,
    conv1d,
    dump_weights,
    forward_monolithic,
    forward_split,
    generate_weights,
    load_weights,
    mask_apply,
    run_layers,
    sdr,
    toy_sources,
    transposed_conv1d,
    verify_split,
)


def naive_conv(x, w, s, d):
    """Direct definition of 1-D cross-correlation, one output at a time."""
    cin, frames = x.shape
    cout, _, k = w.shape
    n_out = (frames - ((k - 1) * d + 1)) // s + 1
    y = np.zeros((cout, n_out))
    for o in range(cout):
        for t in range(n_out):
            y[o, t] = sum(w[o, i, j] * x[i, t * s + j * d] for i in range(cin) for j in range(k))
    return y


def naive_transposed(x, w, s):
    cin, frames = x.shape
    _, cout, k = w.shape
    y = np.zeros((cout, (frames - 1) * s + k))
    for i in range(cin):
        for t in range(frames):
            for o in range(cout):
                for j in range(k):
                    y[o, t * s + j] += w[i, o, j] * x[i, t]
    return y


def test_conv_identity_kernel():
    assert conv1d([[1, 2, 3, 4, 5]], [1.0], 1).tolist() == [[1, 2, 3, 4, 5]]


def test_conv_strided_sums():
    assert conv1d([[1, 2, 3, 4]], [1.0, 1.0], 2, stride=2).tolist() == [[3, 7]]


def test_conv_underflow_reports_minimum():
    with pytest.raises(SizingError) as err:
        conv1d([[1, 2, 3]], np.ones(5), 5)
    assert err.value.required == 5


def test_conv_activations():
    x = [[-2.0, 4.0]]
    assert conv1d(x, [1.0], 1, activation="relu").tolist() == [[0.0, 4.0]]
    assert conv1d(x, [1.0], 1, activation="prelu").tolist() == [[-0.5, 4.0]]


@settings(max_examples=40, deadline=None)
@given(
    cin=st.integers(1, 3),
    cout=st.integers(1, 3),
    k=st.integers(1, 4),
    s=st.integers(1, 3),
    d=st.integers(1, 3),
    extra=st.integers(0, 6),
    seed=st.integers(0, 2**32),
)
def test_conv_matches_naive(cin, cout, k, s, d, extra, seed):
    rng = np.random.default_rng(seed)
    frames = (k - 1) * d + 1 + extra
    x = rng.uniform(-1, 1, (cin, frames))
    w = rng.uniform(-1, 1, (cout, cin, k))
    got = conv1d(x, w, k, s, d)
    assert got.shape[1] == (frames - ((k - 1) * d + 1)) // s + 1
    np.testing.assert_allclose(got, naive_conv(x, w, s, d), rtol=0, atol=1e-12)


def test_transposed_single_frame():
    assert transposed_conv1d([[2.0]], np.ones((1, 1, 2)), 2, 2).tolist() == [[2, 2]]


def test_transposed_overlap_add():
    assert transposed_conv1d([[1.0, 1.0]], np.ones((1, 1, 4)), 4, 2).tolist() == [[1, 1, 2, 2, 1, 1]]


def test_transposed_zero_input():
    y = transposed_conv1d(np.zeros((2, 5)), np.ones((2, 1, 4)), 4, 2)
    assert y.shape == (1, 12) and not y.any()


@settings(max_examples=30, deadline=None)
@given(cin=st.integers(1, 3), cout=st.integers(1, 2), k=st.integers(1, 5), s=st.integers(1, 4), frames=st.integers(1, 6))
def test_transposed_matches_naive(cin, cout, k, s, frames):
    rng = np.random.default_rng(cin * 1000 + k * 100 + s * 10 + frames)
    x = rng.uniform(-1, 1, (cin, frames))
    w = rng.uniform(-1, 1, (cin, cout, k))
    np.testing.assert_allclose(transposed_conv1d(x, w, k, s), naive_transposed(x, w, s), rtol=0, atol=1e-12)


def test_mask_apply_examples():
    E = np.array([[1.0, 2.0]])
    out = mask_apply(E, np.array([[2.0, 2.0], [3.0, 3.0]]), 2)
    assert [o.tolist() for o in out] == [[[2, 4]], [[3, 6]]]
    assert all(np.array_equal(o, E) for o in mask_apply(E, np.ones((2, 2)), 2))
    assert not any(o.any() for o in mask_apply(E, np.zeros((2, 2)), 2))


def test_mask_apply_shape_error():
    with pytest.raises(ShapeError):
        mask_apply(np.ones((2, 3)), np.ones((3, 3)), 2)


def test_sdr_examples():
    s = np.sin(np.arange(100) / 3.0)
    assert sdr(s, s) == SDR_CAP_DB
    assert sdr(s, 0.5 * s) == pytest.approx(10 * math.log10(4), abs=1e-12)
    assert sdr(s, np.zeros_like(s)) == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(MetricError):
        sdr(np.zeros(4), np.ones(4))


def test_non_finite_rejected():
    with pytest.raises(ShapeError):
        conv1d([[1.0, np.nan]], [1.0], 1)


def test_weights_deterministic(toy_graph):
    a, b = generate_weights(toy_graph, 42), generate_weights(toy_graph, 42)
    assert a.weights.keys() == b.weights.keys()
    assert all(np.array_equal(a.weights[k], b.weights[k]) for k in a.weights)
    assert all(np.all(np.abs(w) <= 0.1) for w in a.weights.values())
    mask_apply_id = toy_graph.index_of(LayerKind.MASK_APPLY)[0]
    assert mask_apply_id not in a.weights


def test_weight_dump_round_trip(tmp_path):
    g = build_toy_convtasnet(ToyConfig(bias=True))
    ws = generate_weights(g, 7)
    path = tmp_path / "w.bin"
    dump_weights(ws, path)
    assert path.read_bytes()[:4] == b"NNSW"
    back = load_weights(path, g)
    assert back.rng_seed == 7
    for k in ws.weights:
        assert np.array_equal(back.weights[k], ws.weights[k])
        assert np.array_equal(back.biases[k], ws.biases[k])


def test_zero_input_zero_output(toy_graph):
    out = forward_monolithic(toy_graph, generate_weights(toy_graph), np.zeros((1, 64)))
    assert len(out) == 2
    assert all(o.shape == (1, 64) and not o.any() for o in out)


def test_single_source_output_count():
    g = build_toy_convtasnet(ToyConfig(sources=1))
    assert len(forward_monolithic(g, generate_weights(g), np.ones((1, 64)) * 0.5)) == 1


def test_output_length_shape_law():
    g = build_toy_convtasnet(ToyConfig(kernel=8, frames=100))
    a, b = g.composed_transform()
    mix, _ = toy_sources(g, 2)
    out = forward_monolithic(g, generate_weights(g), mix)
    assert out[0].shape[1] == a * 100 + b


def test_conv_stack_is_linear():
    g = build_toy_convtasnet(ToyConfig(activations=False))
    ws = generate_weights(g)
    x, _ = toy_sources(g, 2)
    m = g.index_of(LayerKind.MASK_CONV)[0]
    y1, _ = run_layers(g, ws, 0, m, x, {})
    y2, _ = run_layers(g, ws, 0, m, 3.0 * x, {})
    np.testing.assert_allclose(y2, 3.0 * y1, rtol=1e-12, atol=1e-15)


def test_masking_is_quadratic():
    # E * M is bilinear in the input, so the full model scales with alpha**2.
    g = build_toy_convtasnet(ToyConfig(activations=False))
    ws = generate_weights(g)
    x, _ = toy_sources(g, 2)
    for a, b in zip(forward_monolithic(g, ws, x), forward_monolithic(g, ws, 2.0 * x)):
        np.testing.assert_allclose(b, 4.0 * a, rtol=1e-12, atol=1e-15)


def test_split_equals_monolithic_examples(toy_graph):
    prof = profile(toy_graph)
    ws = generate_weights(toy_graph, 42)
    x, refs = toy_sources(toy_graph, 2, 42)
    mono = forward_monolithic(toy_graph, ws, x)
    for cuts in ([], list(range(9)), list(range(11))):
        split = forward_split(toy_graph, ws, make_plan(prof, cuts), x)
        assert max(float(np.max(np.abs(a - b))) for a, b in zip(mono, split)) <= 1e-9


def test_verify_detects_corruption(toy_graph):
    prof = profile(toy_graph)
    plan = make_plan(prof, list(range(9)))
    ws = generate_weights(toy_graph, 42)
    x, refs = toy_sources(toy_graph, 2, 42)
    assert verify_split(toy_graph, ws, plan, x, refs).passed
    bad = ws.copy()
    bad.weights[5].flat[0] += 0.5
    report = verify_split(toy_graph, ws, plan, x, refs, split_weights=bad)
    assert not report.passed
    assert report.offending_block == plan.block_of(5).id


def test_layer_error_carries_id(toy_graph):
    ws = generate_weights(toy_graph)
    ws.weights[3] = np.ones((2, 2, 2))
    with pytest.raises(LayerError) as err:
        forward_monolithic(toy_graph, ws, np.zeros((1, 64)))
    assert err.value.layer_id == 3


def test_input_shape_checked(toy_graph):
    with pytest.raises(ShapeError):
        forward_monolithic(toy_graph, generate_weights(toy_graph), np.zeros((1, 63)))
