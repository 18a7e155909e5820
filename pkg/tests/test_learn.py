import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mvmap import learn
from mvmap.learn import Value


def tape_vs_numeric(build, *arrays, h=1e-6):
    """Max relative error between tape gradients and central differences."""
    leaves = [Value(a) for a in arrays]
    out = build(*leaves)
    out.backward()
    worst = 0.0
    for leaf, a in zip(leaves, arrays):
        num = learn.numeric_grad(lambda: float(build(*[Value(x) for x in arrays]).data), a, h)
        worst = max(worst, learn.rel_error(leaf.grad, num))
    return worst


rng = np.random.default_rng(7)
A = rng.normal(size=(5, 3))
B = rng.normal(size=(5, 3))
W = rng.normal(size=(3, 4))
POS = rng.uniform(0.5, 2.0, size=(5, 3))

OPS = {
    "add": (lambda a, b: learn.sum_(learn.mul(learn.add(a, b), learn.add(a, b))), [A, B]),
    "add_row_bias": (lambda a, b: learn.sum_(learn.power(learn.add(a, b), 2)), [A, B[0]]),
    "sub": (lambda a, b: learn.sum_(learn.mul(learn.sub(a, b), a)), [A, B]),
    "mul": (lambda a, b: learn.sum_(learn.mul(a, b)), [A, B]),
    "div": (lambda a, b: learn.sum_(learn.div(a, b)), [A, POS]),
    "matmul": (lambda a, w: learn.sum_(learn.power(learn.matmul(a, w), 2)), [A, W]),
    "concat": (lambda a, b: learn.sum_(learn.mul(learn.concat([a, b], -1), np.arange(6.0))), [A, B]),
    "reshape": (lambda a: learn.sum_(learn.mul(learn.reshape(a, (3, 5)), np.arange(15.0).reshape(3, 5))), [A]),
    "relu": (lambda a: learn.sum_(learn.mul(learn.relu(a), a)), [A + 0.05]),
    "sigmoid": (lambda a: learn.sum_(learn.sigmoid(a)), [A]),
    "softplus": (lambda a: learn.sum_(learn.softplus(a)), [A]),
    "log": (lambda a: learn.sum_(learn.log(a)), [POS]),
    "exp": (lambda a: learn.sum_(learn.exp(a)), [A]),
    "power": (lambda a: learn.sum_(learn.power(a, 1.5)), [POS]),
    "softmax": (lambda a: learn.sum_(learn.mul(learn.softmax(a), B)), [A]),
    "log_softmax": (lambda a: learn.sum_(learn.mul(learn.log_softmax(a), B)), [A]),
    "mean": (lambda a: learn.mean(learn.mul(a, a)), [A]),
    "sum_axis": (lambda a: learn.sum_(learn.power(learn.sum_(a, axis=-1), 2)), [A]),
    "pick": (lambda a: learn.sum_(learn.power(learn.pick(a, [0, 2, 1, 1, 0]), 2)), [A]),
    "weighted_sum": (lambda a: learn.sum_(learn.power(
        learn.weighted_sum(a, [[0, 1], [4, 4], [2, 3]], [[0.3, 0.7], [0.5, 0.5], [1.0, 2.0]]), 2)), [A]),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradients_match_central_differences(name):
    build, arrays = OPS[name]
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    assert tape_vs_numeric(build, *arrays) < 1e-6


def test_loss_gradients():
    y = np.array([0, 3, 1, 2, 2])
    logits = rng.normal(size=(5, 4))
    assert tape_vs_numeric(lambda z: learn.focal_loss(z, y, 0.5, 2.0), logits.copy()) < 1e-5
    assert tape_vs_numeric(lambda z: learn.cross_entropy(z, y), logits.copy()) < 1e-5
    probs = rng.uniform(0.1, 1.0, size=(5, 4))
    assert tape_vs_numeric(lambda p: learn.nll_of_probs(p, y), probs) < 1e-5
    target = rng.dirichlet(np.ones(4), size=5)
    assert tape_vs_numeric(lambda q: learn.kl_div(target, q), probs.copy()) < 1e-5


def test_focal_with_zero_gamma_is_cross_entropy():
    z = rng.normal(size=(6, 4))
    y = np.array([0, 1, 2, 3, 0, 1])
    np.testing.assert_allclose(learn.focal_loss(z, y, 1.0, 0.0).data, learn.cross_entropy(z, y).data, rtol=1e-14)


def test_cross_entropy_closed_form():
    z = np.array([[0.0, 0.0, 0.0, 0.0]])
    np.testing.assert_allclose(learn.cross_entropy(z, [2]).data, np.log(4.0), rtol=1e-14)


def test_kl_div_zero_for_equal_and_handles_zero_mass():
    p = np.array([0.5, 0.5, 0.0])
    assert learn.kl_div(p, p + np.array([0, 0, 1e-3])) == pytest.approx(0.0, abs=1e-12)
    np.testing.assert_allclose(learn.kl_div(np.array([1.0, 0.0]), np.array([0.25, 0.75])), np.log(4.0))


def test_dense_net_tape_matches_inference_and_gradients():
    net = learn.DenseNet.init([3, 5, 2], ["relu", "sigmoid"], np.random.default_rng(0))
    x = rng.normal(size=(4, 3))
    np.testing.assert_allclose(net.forward(x).data, net(x), rtol=1e-14)
    params = net.params("n.")
    leaves = learn.leaves_for(params)
    learn.sum_(net.forward(x, leaves, "n.")).backward()
    for k, p in params.items():
        num = learn.numeric_grad(lambda: float(np.sum(net(x))), p)
        assert learn.rel_error(leaves[k].grad, num) < 1e-6


def test_incompatible_shapes_rejected():
    with pytest.raises(ValueError):
        learn.add(np.zeros((3, 2)), np.zeros((2, 3)))
    with pytest.raises(ValueError):
        Value(np.zeros(3)).backward()


def test_adam_first_step_moves_by_lr():
    p = {"w": np.array([1.0, -2.0])}
    learn.adam_step(learn.AdamState(lr=0.1), p, {"w": np.array([3.0, -0.5])})
    np.testing.assert_allclose(p["w"], [0.9, -1.9], atol=1e-6)


def test_adam_skips_missing_and_rejects_nonfinite():
    p = {"a": np.ones(2), "b": np.ones(2)}
    learn.adam_step(learn.AdamState(), p, {"a": np.ones(2)})
    np.testing.assert_array_equal(p["b"], np.ones(2))
    with pytest.raises(FloatingPointError):
        learn.adam_step(learn.AdamState(), p, {"a": np.array([np.nan, 0.0])})


def test_checkpoint_roundtrip_bitwise(tmp_path):
    nets = {"enc": learn.DenseNet.init([4, 3, 2], ["relu", "softplus"], np.random.default_rng(1)),
            "head": learn.DenseNet.init([2, 1], ["sigmoid"], np.random.default_rng(2))}
    path = tmp_path / "m.mvck"
    learn.save_checkpoint(path, nets)
    back = learn.load_checkpoint(path)
    assert list(back) == ["enc", "head"]
    for k in nets:
        for a, b in zip(nets[k].layers, back[k].layers):
            assert a.weight.tobytes() == b.weight.tobytes()
            assert a.bias.tobytes() == b.bias.tobytes()
            assert a.activation == b.activation
    path.write_bytes(path.read_bytes() + b"x")
    with pytest.raises(ValueError):
        learn.load_checkpoint(path)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 6), st.integers(1, 4), st.integers(0, 2**31 - 1))
def test_weighted_sum_is_linear_gather(j, k, seed):
    r = np.random.default_rng(seed)
    a = r.normal(size=(7, 3))
    idx = r.integers(0, 7, size=(j, k))
    w = r.normal(size=(j, k))
    out = learn.weighted_sum(a, idx, w).data
    brute = np.array([sum(w[q, m] * a[idx[q, m]] for m in range(k)) for q in range(j)])
    np.testing.assert_allclose(out, brute, atol=1e-12)
