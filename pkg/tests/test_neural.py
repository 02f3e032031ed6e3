import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hedgezero.neural import (AdamState, Mlp, StaleCacheError, adam_step, cross_entropy, finite_difference_check, kl_divergence, load,
                              load_bytes, mse, save, save_bytes, tree_policy_loss, value_loss)

from gradcheck_cases import architecture_error, paper_architectures, small_case_error, small_cases


def test_zero_net_tanh_head_outputs_zero():
    net = Mlp(3, [4], [("v", "scalar_tanh", 1)], "relu").zero_()
    assert np.all(net.forward(np.ones((2, 3)))["v"] == 0.0)


@given(st.integers(0, 10_000))
@settings(max_examples=25, deadline=None)
def test_softmax_sums_to_one(seed):
    net = Mlp(3, [8], [("p", "softmax", 7), ("q", "probability_simplex", 4)], "tanh", seed=seed)
    x = np.random.default_rng(seed).normal(0, 10, (5, 3))
    out = net.forward(x)
    np.testing.assert_allclose(out["p"].sum(axis=1), 1.0, atol=1e-9)
    np.testing.assert_allclose(out["q"].sum(axis=1), 1.0, atol=1e-9)


def test_identity_layer():
    net = Mlp(3, [3], [("o", "identity", 3)], "identity")
    net.blocks[0]["W"][...] = np.eye(3)
    net.heads["o"]["W"][...] = np.eye(3)
    x = np.random.default_rng(0).normal(size=(4, 3))
    np.testing.assert_allclose(net.forward(x)["o"], x)


@pytest.mark.parametrize("case", list(small_cases()), ids=lambda c: "-".join(map(str, c[:5])) if isinstance(c, tuple) else None)
def test_gradient_check(case):
    act, norm, kind, size, _, loss = case
    for seed in range(5):
        assert small_case_error(act, norm, kind, size, loss, seed) < 1e-4


@pytest.mark.parametrize("name,net,heads", paper_architectures(), ids=[a[0] for a in paper_architectures()])
def test_gradient_check_full_size(name, net, heads):
    assert architecture_error(net, heads) < 1e-4


def test_zero_output_gradient_gives_zero_grads():
    net = Mlp(3, [5], [("v", "scalar_tanh", 1)], "tanh", "batch_norm", seed=1)
    _, cache = net.forward(np.random.default_rng(0).normal(size=(4, 3)), "train")
    grads, dx = net.backward(cache, {"v": np.zeros((4, 1))})
    assert all(np.all(g == 0) for g in grads) and np.all(dx == 0)


def test_stale_cache_rejected():
    net = Mlp(2, [3], [("v", "scalar_tanh", 1)])
    _, cache = net.forward(np.ones((2, 2)), "train")
    grads, _ = net.backward(cache, {"v": np.ones((2, 1))})
    adam_step(net.params(), grads, AdamState(), net)
    with pytest.raises(StaleCacheError):
        net.backward(cache, {"v": np.ones((2, 1))})


def test_losses_trivial_cases():
    y = np.array([[0.3, -0.2]])
    loss, g = mse(y, y)
    assert loss == 0 and np.all(g == 0)
    loss, g = value_loss(np.array([0.4]), np.array([0.4]))
    assert loss == 0 and np.all(g == 0)
    p = np.array([[0.2, 0.5, 0.3]])
    assert kl_divergence(p, p)[0] == pytest.approx(0.0, abs=1e-15)
    entropy = -np.sum(p * np.log(p))
    assert tree_policy_loss(p, p)[0] == pytest.approx(entropy)
    assert cross_entropy(p, p)[0] <= cross_entropy(np.array([[0.3, 0.4, 0.3]]), p)[0]


def test_loss_support_mismatch():
    with pytest.raises(ValueError):
        mse(np.zeros(3), np.zeros(4))


def test_adam_zero_gradient_no_change():
    p = [np.array([1.0, -2.0])]
    adam_step(p, [np.zeros(2)], AdamState(lr=0.1))
    np.testing.assert_array_equal(p[0], [1.0, -2.0])


def test_adam_first_step_is_signed_lr():
    g = np.array([3.0, -0.5, 1e-2])
    p = [np.zeros(3)]
    adam_step(p, [g], AdamState(lr=0.01))
    np.testing.assert_allclose(p[0], -0.01 * np.sign(g), atol=1e-6)


def test_adam_descends_quadratic_bowl():
    p = [np.array([2.0, -3.0])]
    st_ = AdamState(lr=0.01)
    losses = []
    for _ in range(1000):
        losses.append(float(np.sum(p[0] ** 2)))
        adam_step(p, [2 * p[0]], st_)
    assert all(b < a for a, b in zip(losses[1:], losses[2:]))


@pytest.mark.parametrize("norm", ["none", "batch_norm", "layer_norm"])
def test_checkpoint_roundtrip(tmp_path, norm):
    net = Mlp(4, [6, 5], [("v", "scalar_tanh", 1), ("p", "softmax", 3)], "leaky_relu", norm, seed=3)
    x = np.random.default_rng(1).normal(size=(7, 4))
    net.forward(x, "train")  # move running statistics
    save(net, tmp_path / "n.bin")
    other = load(tmp_path / "n.bin")
    a, b = net.forward(x), other.forward(x)
    for k in a:
        assert np.array_equal(a[k], b[k])
    assert save_bytes(other) == save_bytes(net)


def test_checkpoint_rejects_garbage():
    with pytest.raises(ValueError):
        load_bytes(b"nope")


def test_fast_inference_matches_forward():
    net = Mlp(5, [32, 32], [("v", "scalar_tanh", 1), ("p", "softmax", 6)], "relu", "batch_norm", seed=2)
    x = np.random.default_rng(0).normal(size=(16, 5))
    net.forward(x, "train")
    a, b = net.forward(x), net.infer(x)
    for k in a:
        np.testing.assert_allclose(a[k], b[k], atol=1e-5)


def test_gradient_check_flags_a_perturbed_backward_pass():
    # a checker that cannot fail proves nothing; scale one analytic gradient
    net = Mlp(3, [5, 4], [("o", "identity", 2)], "tanh", "none", seed=0)
    rng = np.random.default_rng(0)
    x, t = rng.normal(size=(6, 3)), rng.normal(size=(6, 2))

    def f(outs):
        value, g = mse(outs["o"], t)
        return value, {"o": g}

    assert finite_difference_check(net, x, f) < 1e-6
    real = net.backward
    net.backward = lambda cache, g: ([a * (1.01 if i == 0 else 1.0) for i, a in enumerate(real(cache, g)[0])],
                                     real(cache, g)[1])
    assert finite_difference_check(net, x, f) > 1e-3


def test_gradient_check_tolerates_exact_zero_gradients():
    # biases feeding a batch norm have identically zero gradient
    net = Mlp(3, [5, 4], [("o", "identity", 2)], "identity", "batch_norm", seed=97)
    rng = np.random.default_rng(97)
    for p in net.params():
        p += rng.normal(0, 0.3, p.shape)
    x, t = rng.normal(size=(6, 3)), rng.uniform(-0.9, 0.9, (6, 2))

    def f(outs):
        value, g = mse(outs["o"], t)
        return value, {"o": g}

    assert finite_difference_check(net, x, f) < 1e-4
