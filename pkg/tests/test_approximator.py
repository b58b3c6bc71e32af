import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from sipo import approximator as ap
from conftest import finite_diff, rel_err


def small_net(rng, sizes=(3, 5, 4, 2), act="tanh"):
    return ap.DenseNet.create(list(sizes), rng, activation=act, out_gain=1.0)


def test_identity_layer():
    net = ap.DenseNet([3, 3], [np.eye(3)], [np.zeros(3)], [])
    x = np.array([0.3, -1.0, 2.5])
    assert np.array_equal(net.forward(x), x)


def test_zero_net_outputs_zero(rng):
    net = small_net(rng)
    net.set_flat(np.zeros(net.n_params))
    assert np.all(net.forward(rng.normal(size=(4, 3))) == 0)


def test_forward_matches_matrix_oracle(rng):
    net = small_net(rng, (2, 4, 3))
    x = np.array([0.5, -0.3])
    W0, b0, W1, b1 = net.params()
    expect = np.tanh(x @ W0 + b0) @ W1 + b1
    assert np.allclose(net.forward(x), expect, atol=1e-14)


def test_shape_error(rng):
    with pytest.raises(ap.ShapeError):
        small_net(rng).forward(np.zeros(4))
    with pytest.raises(ap.ShapeError):
        ap.DenseNet([2, 3], [np.zeros((3, 2))], [np.zeros(3)], [])


def test_zero_upstream_zero_grads(rng):
    net = small_net(rng)
    g = net.backward(np.ones((2, 3)), np.zeros((2, 2)))
    assert np.all(g.flat() == 0)


def test_linear_scalar_gradient():
    net = ap.DenseNet([1, 1], [np.array([[0.7]])], [np.zeros(1)], [])
    g = net.backward(np.array([2.0]), np.array([1.0]))
    assert g.weights[0][0, 0] == 2.0
    assert g.biases[0][0] == 1.0


@pytest.mark.parametrize("act", ["tanh", "relu", "identity"])
def test_backward_matches_finite_differences(rng, act):
    net = small_net(rng, act=act)
    x = rng.normal(size=(6, 3))
    up = rng.normal(size=(6, 2))

    def loss():
        return float(np.sum(up * net.forward(x)))

    fd = finite_diff(loss, net.params())
    g = net.backward(x, up).flat_list()
    for a, b in zip(g, fd):
        assert rel_err(a, b) < 1e-4


def test_forward_is_pure(rng):
    net = small_net(rng)
    x = rng.normal(size=(5, 3))
    a = net.forward(x)
    net.forward(rng.normal(size=(2, 3)))
    assert np.array_equal(net.forward(x), a)


def test_checkpoint_round_trip(rng, tmp_path):
    net = small_net(rng, (4, 8, 8, 3), act="relu")
    path = str(tmp_path / "net.bin")
    ap.save(net, path)
    back = ap.load(path)
    assert back.layer_sizes == net.layer_sizes and back.activations == net.activations
    for p, q in zip(net.params(), back.params()):
        assert p.tobytes() == q.tobytes()
    assert ap.dumps(back) == ap.dumps(net)


def test_checkpoint_rejects_garbage(rng):
    data = ap.dumps(small_net(rng))
    with pytest.raises(ValueError):
        ap.loads(b"XXXX" + data[4:])
    with pytest.raises(ValueError):
        ap.loads(data + b"\x00")


def test_adam_descends_quadratic():
    p = np.array([3.0, -2.0])
    opt = ap.Adam([p], lr=0.1)
    for _ in range(300):
        opt.step([2 * p])
    assert np.linalg.norm(p) < 1e-2


def test_adam_grad_norm_clip():
    p, q = np.zeros(2), np.zeros(2)
    clipped = ap.Adam([p], lr=0.1, max_grad_norm=0.5)
    plain = ap.Adam([q], lr=0.1)
    for g in ([300.0, 400.0], [-3.0, 0.0], [0.1, 0.2]):
        g = np.array(g)
        n = np.linalg.norm(g)
        clipped.step([g])
        plain.step([g * 0.5 / (n + 1e-12) if n > 0.5 else g])
    assert np.allclose(p, q, atol=1e-12)


# ---------------------------------------------------------------- heads


def test_uniform_logits():
    assert np.allclose(ap.CategoricalHead(np.zeros(4)).probs(), 0.25)


def test_extreme_logit():
    head = ap.CategoricalHead(np.array([1e9, 0.0, 0.0, 0.0]))
    a, lp = ap.sample_action(head, np.random.default_rng(0))
    assert a == 0 and lp == pytest.approx(0.0, abs=1e-12)


def test_sampling_frequencies_match_softmax():
    logits = np.array([1.0, 2.0, 3.0])
    rng = np.random.default_rng(7)
    a, lp = ap.sample_categorical_batch(np.tile(logits, (100_000, 1)), rng)
    freq = np.bincount(a, minlength=3) / len(a)
    p = np.exp(logits) / np.exp(logits).sum()
    assert np.max(np.abs(freq - p)) < 0.01
    assert np.allclose(lp, np.log(p)[a])


def test_sample_action_log_prob():
    logits = np.array([0.2, -1.0, 0.5])
    a, lp = ap.sample_action(ap.CategoricalHead(logits), np.random.default_rng(3))
    assert lp == pytest.approx(ap.log_softmax(logits)[a], abs=1e-15)


def test_nonfinite_logits_rejected():
    with pytest.raises(ap.NonFiniteError):
        ap.sample_action(ap.CategoricalHead(np.array([np.nan, 0.0])), np.random.default_rng(0))


@given(st.lists(st.floats(-30, 30), min_size=2, max_size=8))
def test_softmax_normalised_and_entropy_bounds(logits):
    logits = np.array(logits)
    p = ap.softmax(logits)
    assert abs(p.sum() - 1) < 1e-9
    h = ap.categorical_entropy(logits)
    assert -1e-12 <= h <= math.log(len(logits)) + 1e-12


def test_entropy_max_at_uniform():
    n = 5
    assert ap.categorical_entropy(np.zeros(n)) == pytest.approx(math.log(n), abs=1e-15)


def test_gaussian_log_prob_matches_closed_form():
    x, m, ls = np.array([0.3, -0.2]), np.array([0.1, 0.0]), np.array([-0.5, 0.2])
    s = np.exp(ls)
    expect = np.sum(-0.5 * ((x - m) / s) ** 2 - np.log(s * np.sqrt(2 * np.pi)))
    assert ap.gaussian_log_prob(x, m, ls) == pytest.approx(expect, abs=1e-14)
