import io

import numpy as np
import pytest

from dhal_aim.nnet import (
    AdamState,
    Layer,
    Mlp,
    StaleCacheError,
    adam_step,
    grad_check,
    load_checkpoint,
    save_checkpoint,
)


def _net(rng, sizes=(6, 9, 7, 1), acts=("relu", "tanh", "sigmoid")):
    return Mlp.create(list(sizes), list(acts), rng, dtype=np.float64)


def _reference_forward(net, x):
    """Independent forward pass over the raw weights."""
    fns = {
        "relu": lambda z: np.where(z > 0, z, 0.0),
        "tanh": np.tanh,
        "sigmoid": lambda z: 1.0 / (1.0 + np.exp(-z)),
        "identity": lambda z: z,
    }
    h = x
    for l in net.layers:
        h = fns[l.activation](np.einsum("bi,io->bo", h, l.W) + l.b)
    return h


def test_identity_net_passes_input():
    net = Mlp([Layer(np.eye(4), np.zeros(4), "identity")])
    x = np.arange(4.0)
    assert np.array_equal(net(x), x)


def test_zero_weights_give_bias():
    b = np.array([0.5, -2.0])
    net = Mlp([Layer(np.zeros((3, 2)), b, "identity")])
    assert np.array_equal(net(np.ones(3)), b)


def test_forward_matches_reference(rng):
    net = _net(rng)
    x = rng.normal(size=(16, 6))
    assert np.allclose(net(x), _reference_forward(net, x), atol=1e-12, rtol=0)


def test_forward_pure(rng):
    net = _net(rng)
    x = rng.normal(size=(5, 6))
    assert net(x).tobytes() == net(x).tobytes()


def test_dimension_mismatch_rejected(rng):
    with pytest.raises(ValueError):
        _net(rng)(np.ones(5))
    with pytest.raises(ValueError):
        Mlp([Layer(np.zeros((3, 2)), np.zeros(2)), Layer(np.zeros((4, 1)), np.zeros(1))])


def test_linear_layer_gradient_is_outer_product():
    W = np.array([[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]])
    net = Mlp([Layer(W, np.zeros(2), "identity")])
    x = np.array([[0.5, -1.0, 2.0]])
    _, cache = net.forward(x)
    grads, gin = net.backward(cache, np.ones((1, 2)))
    assert np.array_equal(grads[0], np.outer(x[0], np.ones(2)))
    assert np.array_equal(grads[1], np.ones(2))
    assert np.array_equal(gin[0], W.sum(1))


def test_zero_output_gradient(rng):
    net = _net(rng)
    _, cache = net.forward(rng.normal(size=(4, 6)))
    grads, gin = net.backward(cache, np.zeros((4, 1)))
    assert all(not g.any() for g in grads)
    assert not gin.any()


def test_backward_matches_finite_differences(rng):
    net = _net(rng)
    x = rng.normal(size=(8, 6))
    w = rng.normal(size=(8, 1))

    def loss():
        return float(np.sum(net(x) * w))

    _, cache = net.forward(x)
    grads, _ = net.backward(cache, w)
    sig = lambda: net.relu_signature(net.forward(x)[1])
    assert grad_check(net.params(), loss, grads, n_coords=100, rng=1, signature=sig) < 1e-4


def test_input_gradient_matches_finite_differences(rng):
    net = _net(rng)
    x = rng.normal(size=(1, 6))
    _, cache = net.forward(x)
    _, gin = net.backward(cache, np.ones((1, 1)))
    h = 1e-6
    for i in range(6):
        e = np.zeros_like(x)
        e[0, i] = h
        num = (net(x + e) - net(x - e))[0, 0] / (2 * h)
        assert num == pytest.approx(gin[0, i], rel=1e-5, abs=1e-9)


def test_pre_activation_gradient_for_sigmoid_bce(rng):
    net = _net(rng)
    x = rng.normal(size=(10, 6))
    y = (rng.random((10, 1)) > 0.5).astype(float)

    def loss():
        p = net(x)
        return float(-np.mean(y * np.log(p) + (1 - y) * np.log(1 - p)))

    p, cache = net.forward(x)
    grads, _ = net.backward(cache, (p - y) / len(y), pre=True)
    sig = lambda: net.relu_signature(net.forward(x)[1])
    assert grad_check(net.params(), loss, grads, n_coords=60, rng=2, signature=sig) < 1e-4


def test_quadratic_loss_linear_net(rng):
    net = Mlp.create([4, 3], ["identity"], rng, dtype=np.float64)
    x = rng.normal(size=(5, 4))

    def loss():
        return float(0.5 * np.sum(net(x) ** 2))

    out, cache = net.forward(x)
    grads, _ = net.backward(cache, out)
    assert grad_check(net.params(), loss, grads, n_coords=15, rng=3) < 1e-6


def test_tanh_head(rng):
    net = _net(rng, acts=("relu", "relu", "tanh"))
    x = rng.normal(size=(6, 6))

    def loss():
        return float(np.sum(net(x)))

    _, cache = net.forward(x)
    grads, _ = net.backward(cache, np.ones((6, 1)))
    sig = lambda: net.relu_signature(net.forward(x)[1])
    assert grad_check(net.params(), loss, grads, n_coords=50, rng=4, signature=sig) < 1e-4


def test_grad_check_skips_relu_kink():
    # a single relu sitting exactly on its kink: without the signature the
    # one-sided slopes disagree, with it the coordinate is resampled away
    net = Mlp([Layer(np.array([[1.0], [0.0]]), np.zeros(1), "relu")])
    x = np.array([[0.0, 1.0]])
    _, cache = net.forward(x)
    grads, _ = net.backward(cache, np.ones((1, 1)))
    sig = lambda: net.relu_signature(net.forward(x)[1])
    err = grad_check(net.params(), lambda: float(net(x).sum()), grads, n_coords=5, rng=0,
                     signature=sig, max_tries=200)
    assert err < 1e-6


def test_stale_cache_rejected(rng):
    net = _net(rng)
    x = rng.normal(size=(2, 6))
    _, cache = net.forward(x)
    grads, _ = net.backward(cache, np.ones((2, 1)))
    net.step(AdamState.for_params(net.params()), grads)
    with pytest.raises(StaleCacheError):
        net.backward(cache, np.ones((2, 1)))


# ---------------------------------------------------------------- adam
def test_adam_first_step():
    p = np.array([1.0])
    st = AdamState.for_params([p], lr=1e-5)
    assert adam_step([p], st, [np.array([1.0])])
    assert p[0] == pytest.approx(1.0 - 1e-5, abs=1e-12)


def test_adam_zero_gradient_keeps_params():
    p = np.array([0.3, -0.2])
    st = AdamState.for_params([p])
    for _ in range(5):
        adam_step([p], st, [np.zeros(2)])
    assert np.array_equal(p, [0.3, -0.2])


def test_adam_two_steps_hand_computed():
    g = 0.5
    lr, b1, b2, eps = 1e-3, 0.9, 0.999, 1e-8
    p = np.array([2.0])
    st = AdamState.for_params([p], lr=lr)
    adam_step([p], st, [np.array([g])])
    adam_step([p], st, [np.array([g])])
    x = 2.0
    m = v = 0.0
    for t in (1, 2):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        x -= lr * (m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + eps)
    assert p[0] == pytest.approx(x, abs=1e-15)
    assert st.t == 2


def test_adam_skips_non_finite():
    p = np.array([1.0])
    st = AdamState.for_params([p])
    assert not adam_step([p], st, [np.array([np.nan])])
    assert p[0] == 1.0 and st.skipped == 1 and st.t == 0


def test_adam_shape_mismatch():
    with pytest.raises(ValueError):
        adam_step([np.zeros(2)], AdamState.for_params([np.zeros(2)]), [np.zeros(3)])


# ---------------------------------------------------------------- checkpoints
def test_checkpoint_round_trip_bit_exact(rng, tmp_path):
    nets = {"a": Mlp.create([5, 4, 1], ["relu", "tanh"], rng), "b": _net(rng)}
    path = tmp_path / "n.ckpt"
    save_checkpoint(path, nets, b"meta")
    back, meta = load_checkpoint(path)
    assert meta == b"meta"
    for k in nets:
        for p, q in zip(nets[k].params(), back[k].params()):
            assert p.dtype == q.dtype and p.tobytes() == q.tobytes()
        assert [l.activation for l in nets[k].layers] == [l.activation for l in back[k].layers]


def test_checkpoint_rejects_garbage():
    with pytest.raises(ValueError):
        load_checkpoint(io.BytesIO(b"not a checkpoint at all"))
