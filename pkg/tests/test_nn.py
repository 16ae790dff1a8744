import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flowlab._binary import BadMagicError, TruncatedFileError, VersionMismatchError
from flowlab.nn import (
    NetworkSpec,
    adam_init,
    adam_step,
    backward_input,
    backward_params,
    checkpoint_bytes,
    forward,
    init_network,
    load_checkpoint,
    parse_checkpoint,
    save_checkpoint,
    time_features,
)
from flowlab.rng import Stream

H = 1e-6


def _rel(a, b):
    return abs(a - b) / max(abs(a), abs(b), 1e-12)


@pytest.mark.parametrize("activation", ["tanh", "silu"])
def test_param_gradient_every_entry_matches_central_differences(activation):
    spec = NetworkSpec(2, (4, 3), 3, 2, activation)
    net = init_network(spec, 1)
    rng = Stream(5)
    x, t, c, u = rng.normal((3, 2)), rng.uniform(3), np.array([0, 1, 2]), rng.normal((3, 2))
    grads = backward_params(net, x, t, c, u)
    leaves = [a for _, a in net.leaves()]
    for li, (name, g) in enumerate(grads.leaves()):
        for idx in np.ndindex(g.shape):
            def f(delta):
                moved = [a.copy() for a in leaves]
                moved[li][idx] += delta
                return float(np.sum(u * forward(net.with_leaves(moved), x, t, c)))

            numeric = (f(H) - f(-H)) / (2 * H)
            assert abs(g[idx] - numeric) <= 1e-4 * max(abs(numeric), 1e-3), (name, idx)


def test_input_gradient_matches_central_differences():
    net = init_network(NetworkSpec(4, (8,), 2, 3), 2)
    rng = Stream(6)
    for _ in range(20):
        x, t, u = rng.normal(4), rng.uniform(), rng.normal(4)
        g = backward_input(net, x, t, 1, u)
        for i in range(4):
            e = np.zeros(4)
            e[i] = H
            numeric = (u @ forward(net, x + e, t, 1) - u @ forward(net, x - e, t, 1)) / (2 * H)
            assert _rel(g[i], numeric) < 1e-4 or abs(g[i] - numeric) < 1e-9


def test_batched_forward_equals_rowwise():
    net = init_network(NetworkSpec(3, (5,), 3, 2), 0)
    rng = Stream(1)
    x, t = rng.normal((4, 3)), rng.uniform(4)
    c = np.array([0, 2, 1, 1])
    batched = forward(net, x, t, c)
    for i in range(4):
        np.testing.assert_allclose(batched[i], forward(net, x[i], t[i], c[i]), rtol=1e-13, atol=1e-15)


def test_time_features_values():
    f = time_features(0.25)
    np.testing.assert_allclose(f, [0.25, 1.0, 0.0, 0.0, -1.0], atol=1e-15)


def test_embedding_gradient_accumulates_repeated_classes():
    net = init_network(NetworkSpec(2, (3,), 2, 2), 0)
    x = np.ones((2, 2))
    u = np.ones((2, 2))
    g_pair = backward_params(net, x, np.array([0.5, 0.5]), np.array([1, 1]), u).embedding
    g_one = backward_params(net, x[:1], np.array([0.5]), np.array([1]), u[:1]).embedding
    np.testing.assert_allclose(g_pair[1], 2 * g_one[1])
    assert np.all(g_pair[0] == 0)


def test_spec_validation():
    with pytest.raises(ValueError):
        NetworkSpec(0)
    with pytest.raises(ValueError):
        NetworkSpec(2, activation="relu")
    with pytest.raises(ValueError):
        init_network(NetworkSpec(2, ()), 0)


def test_init_is_deterministic_and_scaled():
    spec = NetworkSpec(16, (512,), 1, 0)
    a, b = init_network(spec, 3), init_network(spec, 3)
    np.testing.assert_array_equal(a.weights[0], b.weights[0])
    assert np.all(a.biases[0] == 0)
    # std 1/sqrt(fan_in), fan_in = 16 + 5 time features
    assert abs(a.weights[0].std() * np.sqrt(21) - 1.0) < 0.05


def test_adam_first_step_hand_value():
    p = np.array([0.0, 1.0])
    state = adam_init(p, learning_rate=0.1)
    new, state = adam_step(state, p, np.array([3.0, -0.5]))
    # first bias-corrected step is lr * g / (|g| + eps_hat)
    np.testing.assert_allclose(new, [-0.1, 1.1], atol=1e-8)
    assert state.step == 1


def test_adam_second_step_hand_value():
    p = np.array([0.0])
    state = adam_init(p, learning_rate=0.1)
    p, state = adam_step(state, p, np.array([1.0]))
    p, state = adam_step(state, p, np.array([-1.0]))
    m = 0.9 * 0.1 + 0.1 * -1.0
    v = 0.999 * 0.001 + 0.001 * 1.0
    m_hat, v_hat = m / (1 - 0.81), v / (1 - 0.999**2)
    first = -0.1 * 1.0 / (1.0 + 1e-8)
    np.testing.assert_allclose(p, [first - 0.1 * m_hat / (np.sqrt(v_hat) + 1e-8)], rtol=1e-12)


def test_adam_rejects_non_finite_gradient():
    net = init_network(NetworkSpec(2, (3,), 1, 0), 0)
    grads = net.zeros_like()
    grads.biases[0][1] = np.nan
    with pytest.raises(FloatingPointError, match="layer0.bias"):
        adam_step(adam_init(net), net, grads)


def test_checkpoint_round_trip_is_float32_exact(tmp_path):
    net = init_network(NetworkSpec(3, (6, 4), 3, 2, "tanh"), 9)
    save_checkpoint(net, tmp_path / "p.rfpr")
    back = load_checkpoint(tmp_path / "p.rfpr")
    assert back.spec == net.spec
    for (_, a), (_, b) in zip(net.leaves(), back.leaves()):
        np.testing.assert_array_equal(b, a.astype(np.float32).astype(np.float64))
    assert checkpoint_bytes(back) == checkpoint_bytes(net)


def test_checkpoint_header_layout():
    net = init_network(NetworkSpec(2, (3,), 2, 1, "silu"), 0)
    data = checkpoint_bytes(net)
    assert data[:4] == b"RFPR"
    assert np.frombuffer(data[4:28], "<u4").tolist() == [1, 2, 2, 3, 2, 2]
    assert data[32] == 1  # silu
    n_floats = 3 * 8 + 3 + 2 * 3 + 2 + 2 * 1
    assert len(data) == 33 + 4 * n_floats


def test_checkpoint_errors():
    data = checkpoint_bytes(init_network(NetworkSpec(2, (3,), 2, 1), 0))
    with pytest.raises(TruncatedFileError):
        parse_checkpoint(data[:-1])
    with pytest.raises(BadMagicError):
        parse_checkpoint(b"RFDS" + data[4:])
    with pytest.raises(VersionMismatchError):
        parse_checkpoint(data[:4] + (9).to_bytes(4, "little") + data[8:])


@settings(max_examples=25, deadline=None)
@given(
    hidden=st.lists(st.integers(1, 6), min_size=1, max_size=3),
    dim=st.integers(1, 4),
    classes=st.integers(1, 3),
    cond=st.integers(0, 3),
    seed=st.integers(0, 1000),
)
def test_checkpoint_round_trip_property(hidden, dim, classes, cond, seed):
    net = init_network(NetworkSpec(dim, tuple(hidden), classes, cond), seed)
    data = checkpoint_bytes(net)
    assert checkpoint_bytes(parse_checkpoint(data)) == data
