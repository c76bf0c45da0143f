import math

import numpy as np
import pytest

from daif import nn
from daif.nn import Adam, GaussianDiag, Mlp, Tape, Tensor


def _scalar_net(rng, sizes, acts):
    net = Mlp("net", sizes, acts).init(rng)
    for k in net.params:
        net.params[k] = rng.normal(0, 0.7, size=net.params[k].shape)
    return net


def test_identity_linear_layer():
    net = Mlp("id", [3, 3], ["linear"], params={"id.0.W": np.eye(3), "id.0.b": np.zeros(3)})
    x = np.array([[0.3, -1.2, 2.0]])
    out, _ = net.forward(x)
    assert np.array_equal(out.value, x)


def test_zero_input_tanh_gives_zero():
    rng = np.random.default_rng(0)
    net = Mlp("t", [4, 5, 2], ["tanh", "tanh"]).init(rng)
    out, _ = net.forward(np.zeros((1, 4)))
    assert np.all(out.value == 0.0)


def test_forward_matches_direct_arithmetic():
    rng = np.random.default_rng(1)
    acts = ["tanh", "relu", "sigmoid", "softmax"]
    net = _scalar_net(rng, [5, 7, 6, 4, 3], acts)
    x = rng.normal(size=(8, 5))
    out, _ = net.forward(x, Tape())
    p = net.params
    h = np.tanh(x @ p["net.0.W"] + p["net.0.b"])
    h = np.maximum(h @ p["net.1.W"] + p["net.1.b"], 0)
    h = 1 / (1 + np.exp(-(h @ p["net.2.W"] + p["net.2.b"])))
    z = h @ p["net.3.W"] + p["net.3.b"]
    h = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
    np.testing.assert_allclose(out.value, h, atol=1e-12, rtol=0)
    np.testing.assert_allclose(net.predict(x), h, atol=1e-12, rtol=0)


def test_shape_mismatch():
    net = Mlp("n", [3, 2], ["linear"]).init(np.random.default_rng(0))
    with pytest.raises(nn.ShapeError):
        net.forward(np.zeros((1, 4)))


def test_linear_derivative():
    tape = Tape()
    w = tape.param("w", np.array([[1.5]]))
    f = nn.matmul(w, np.array([[2.0]]))
    g = nn.backward(tape, f)
    assert g["w"][0, 0] == 2.0


@pytest.mark.parametrize("w,b,x", [(0.5, 0.1, 1.0), (-1.3, 0.7, 0.4), (2.0, -0.5, -0.8)])
def test_tanh_affine_chain_rule(w, b, x):
    tape = Tape()
    wt, bt = tape.param("w", np.array([[w]])), tape.param("b", np.array([b]))
    y = nn.tanh(nn.add(nn.matmul(np.array([[x]]), wt), bt))
    g = nn.backward(tape, nn.total(y))
    sech2 = 1.0 / math.cosh(w * x + b) ** 2
    assert g["w"][0, 0] == pytest.approx(x * sech2, rel=1e-12)
    assert g["b"][0] == pytest.approx(sech2, rel=1e-12)


def _rel_err(a, b):
    return np.max(np.abs(a - b) / np.maximum(1e-3, np.abs(a) + np.abs(b)))


def _check_network_gradients(net, x, head, rng_seed=None):
    def f():
        out, _ = net.forward(x)
        return float(head(out).value)

    tape = Tape()
    out, _ = net.forward(x, tape)
    g = nn.backward(tape, head(out))
    worst = 0.0
    for k, arr in net.params.items():
        num = nn.numeric_gradient(f, arr, h=1e-5)
        worst = max(worst, _rel_err(g[k], num))
    return worst


def test_gradients_vs_finite_differences_100_networks():
    rng = np.random.default_rng(42)
    choices = ["tanh", "sigmoid", "relu", "linear", "scaled_sigmoid"]
    worst = 0.0
    for _ in range(100):
        depth = int(rng.integers(1, 4))
        sizes = [int(rng.integers(2, 6)) for _ in range(depth + 1)]
        acts = [choices[int(rng.integers(len(choices)))] for _ in range(depth)]
        net = _scalar_net(rng, sizes, acts)
        x = rng.normal(size=(3, sizes[0]))
        target = rng.normal(size=(3, sizes[-1]))
        worst = max(worst, _check_network_gradients(net, x, lambda o: nn.mean(nn.square(nn.sub(o, target)))))
    assert worst < 1e-4


def test_softmax_head_gradient():
    rng = np.random.default_rng(3)
    net = _scalar_net(rng, [4, 6, 5], ["tanh", "softmax"])
    x = rng.normal(size=(2, 4))
    w = rng.normal(size=(2, 5))
    assert _check_network_gradients(net, x, lambda o: nn.total(nn.mul(nn.log(o), w))) < 1e-4


def test_tape_cannot_be_reused():
    tape = Tape()
    w = tape.param("w", np.ones((1, 1)))
    y = nn.total(nn.mul(w, 3.0))
    nn.backward(tape, y)
    with pytest.raises(nn.TapeError):
        nn.backward(tape, y)
    with pytest.raises(nn.TapeError):
        nn.mul(w, 2.0)


def test_non_finite_raises():
    tape = Tape()
    w = tape.param("w", np.array([[1000.0]]))
    with pytest.raises(nn.NumericalError):
        nn.exp(w)


def test_dropout_zero_is_identity():
    rng = np.random.default_rng(0)
    a = Mlp("a", [4, 8, 3], ["tanh", "linear"], dropout=[0.0, 0.0]).init(rng)
    x = rng.normal(size=(5, 4))
    on, _ = a.forward(x, Tape(), dropout_on=True, rng=np.random.default_rng(1))
    off, _ = a.forward(x)
    assert np.array_equal(on.value, off.value)


def test_dropout_masks_recorded_and_reproducible():
    net = Mlp("d", [4, 8, 8, 2], ["tanh", "tanh", "linear"], dropout=[0.5, 0.5, 0.0]).init(np.random.default_rng(0))
    x = np.ones((3, 4))
    t1, t2 = Tape(), Tape()
    o1, _ = net.forward(x, t1, True, np.random.default_rng(9))
    o2, _ = net.forward(x, t2, True, np.random.default_rng(9))
    assert len(t1.masks) == 2
    assert all(np.array_equal(a, b) for a, b in zip(t1.masks, t2.masks))
    assert np.array_equal(o1.value, o2.value)


def test_reparam_degenerate_variance():
    g = GaussianDiag(np.array([[0.3, -0.2]]), np.full((1, 2), 1e-12))
    s = nn.reparam_sample(g, np.random.default_rng(0))
    np.testing.assert_allclose(s.value, g.mean.value, atol=1e-5)


def test_reparam_statistics_and_determinism():
    g = GaussianDiag(np.zeros((100_000, 1)), np.ones((100_000, 1)))
    s = nn.reparam_sample(g, np.random.default_rng(7)).value
    assert abs(s.mean()) < 3 / math.sqrt(100_000)
    s2 = nn.reparam_sample(g, np.random.default_rng(7)).value
    assert np.array_equal(s, s2)


def test_reparam_gradient_flows_to_mean_and_variance():
    tape = Tape()
    m, v = tape.watch(np.array([[0.5]])), tape.watch(np.array([[2.0]]))
    s = nn.reparam_sample(GaussianDiag(m, v), np.random.default_rng(0))
    nn.backward(tape, nn.total(s))
    eps = (s.value - 0.5) / math.sqrt(2.0)
    assert m.grad[0, 0] == 1.0
    assert v.grad[0, 0] == pytest.approx(0.5 * eps[0, 0] / math.sqrt(2.0))


def _g(m, v):
    return GaussianDiag(np.atleast_2d(m).astype(float), np.atleast_2d(v).astype(float))


def test_kl_closed_form_examples():
    assert nn.kl_gaussians(_g([0.0], [1.0]), _g([0.0], [1.0])).value[0] == 0.0
    assert nn.kl_gaussians(_g([1.0], [1.0]), _g([0.0], [1.0])).value[0] == pytest.approx(0.5)


def test_kl_matches_monte_carlo():
    rng = np.random.default_rng(11)
    mq, vq = rng.normal(size=3), rng.uniform(0.3, 1.5, size=3)
    mp, vp = rng.normal(size=3), rng.uniform(0.3, 1.5, size=3)
    kl = nn.kl_gaussians(_g(mq, vq), _g(mp, vp)).value[0]
    n = 1_000_000
    x = mq + np.sqrt(vq) * rng.standard_normal((n, 3))
    logq = -0.5 * (np.log(2 * np.pi * vq) + (x - mq) ** 2 / vq).sum(axis=1)
    logp = -0.5 * (np.log(2 * np.pi * vp) + (x - mp) ** 2 / vp).sum(axis=1)
    d = logq - logp
    assert abs(d.mean() - kl) < 3 * d.std() / math.sqrt(n)


def test_kl_dimension_mismatch():
    with pytest.raises(nn.ShapeError):
        nn.kl_gaussians(_g([0.0, 1.0], [1.0, 1.0]), _g([0.0], [1.0]))


def test_gaussian_entropy_examples():
    assert nn.entropy_gaussian(_g([0.0], [1.0])).value[0] == pytest.approx(1.41894, abs=1e-5)
    h1 = nn.entropy_gaussian(_g([0.0, 0.0], [0.7, 0.2])).value[0]
    h2 = nn.entropy_gaussian(_g([0.0, 0.0], [1.4, 0.4])).value[0]
    assert h2 - h1 == pytest.approx(2 * 0.5 * math.log(2))


def test_gaussian_entropy_matches_monte_carlo():
    rng = np.random.default_rng(5)
    m, v = rng.normal(size=4), rng.uniform(0.2, 1.4, size=4)
    h = nn.entropy_gaussian(_g(m, v)).value[0]
    n = 1_000_000
    x = m + np.sqrt(v) * rng.standard_normal((n, 4))
    neglog = 0.5 * (np.log(2 * np.pi * v) + (x - m) ** 2 / v).sum(axis=1)
    assert abs(neglog.mean() - h) < 3 * neglog.std() / math.sqrt(n)


def test_bernoulli_entropy_examples():
    assert nn.entropy_bernoulli(np.array([[0.5]])).value[0] == pytest.approx(math.log(2))
    assert nn.entropy_bernoulli(np.array([[0.0]])).value[0] < 2e-5
    assert nn.entropy_bernoulli(np.full((1, 44), 0.5)).value[0] == pytest.approx(44 * math.log(2))


def test_bernoulli_entropy_matches_monte_carlo():
    rng = np.random.default_rng(8)
    p = rng.uniform(0.05, 0.95, size=5)
    h = nn.entropy_bernoulli(p[None]).value[0]
    n = 1_000_000
    x = rng.random((n, 5)) < p
    neglog = -np.where(x, np.log(p), np.log(1 - p)).sum(axis=1)
    assert abs(neglog.mean() - h) < 3 * neglog.std() / math.sqrt(n)


def test_adam_zero_gradient_keeps_params():
    p = {"w": np.array([1.0, -2.0])}
    Adam(lr=0.1).step(p, {"w": np.zeros(2)})
    assert np.array_equal(p["w"], [1.0, -2.0])


def test_adam_constant_gradient_step_tends_to_lr_sign():
    p = {"w": np.zeros(2)}
    opt = Adam(lr=0.01, clip_norm=None)
    for _ in range(2000):
        before = p["w"].copy()
        opt.step(p, {"w": np.array([3.0, -0.2])})
    np.testing.assert_allclose(p["w"] - before, [-0.01, 0.01], rtol=1e-3)


def test_adam_quadratic_bowl_decreases():
    p = {"w": np.array([3.0, -4.0])}
    opt = Adam(lr=0.05)
    losses = []
    for _ in range(100):
        losses.append(float(np.sum(p["w"] ** 2)))
        opt.step(p, {"w": 2 * p["w"]})
    assert all(b < a for a, b in zip(losses, losses[1:]))


def test_adam_update_functional_and_shape_error():
    new, state = nn.adam_update({"w": np.ones(3)}, {"w": np.ones(3)}, lr=0.1, step=1)
    np.testing.assert_allclose(new["w"], 0.9, atol=1e-6)
    with pytest.raises(nn.ShapeError):
        state.step({"w": np.ones(3)}, {"w": np.ones(2)})


def test_global_norm_clip():
    g = {"a": np.array([30.0, 40.0])}
    clipped = nn.clip_by_global_norm(g, 10.0)
    assert nn.global_norm(clipped) == pytest.approx(10.0)
