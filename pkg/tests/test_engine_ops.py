"""Forward values and gradients of every differentiable engine op."""

import numpy as np
import pytest

from helpers import gradcheck, rel_err

from statdistill.engine import Array, Tape, backward, no_grad, ops, stop_grad
from statdistill.errors import EngineError

RNG = np.random.default_rng(1234)


def test_mean_reduce_example():
    x = Array([1.0, 2.0, 3.0], requires_grad=True)
    m = ops.mean(x)
    assert m.item() == pytest.approx(2.0)
    backward(m)
    np.testing.assert_allclose(x.grad, [1 / 3, 1 / 3, 1 / 3])


def test_softmax_symmetry_example():
    s = ops.softmax(Array([0.0, 0.0]))
    np.testing.assert_allclose(s.data, [0.5, 0.5])


def test_shape_mismatch_names_op():
    with pytest.raises(EngineError, match="matmul"):
        ops.matmul(Array(np.ones((2, 3))), Array(np.ones((2, 3))))
    with pytest.raises(EngineError, match="conv2d"):
        ops.conv2d(Array(np.ones((1, 3, 4, 4))), Array(np.ones((2, 2, 3, 3))))
    with pytest.raises(EngineError, match="add"):
        ops.add(Array(np.ones((2, 3))), Array(np.ones((4,))))


def test_broadcasting_gradients():
    a0 = RNG.standard_normal((3, 4))
    b0 = RNG.standard_normal((4,))
    a = Array(a0, requires_grad=True)
    b = Array(b0, requires_grad=True)
    out = ops.sum_(ops.mul(ops.add(a, b), ops.add(a, b)))
    backward(out)
    np.testing.assert_allclose(a.grad, 2 * (a0 + b0))
    np.testing.assert_allclose(b.grad, (2 * (a0 + b0)).sum(axis=0))


ELEMENTWISE_CASES = [
    ("relu", lambda x: ops.relu(x), (5, 3), None),
    ("exp", lambda x: ops.exp(x), (4, 2), None),
    ("log", lambda x: ops.log(x), (6,), "positive"),
    ("sqrt", lambda x: ops.sqrt(x), (6,), "positive"),
    ("pow", lambda x: ops.pow_(x, 3.0), (5,), None),
    ("neg", lambda x: ops.neg(x), (3, 3), None),
    ("softmax", lambda x: ops.softmax(x, axis=-1), (4, 5), None),
    ("log_softmax", lambda x: ops.log_softmax(x, axis=-1), (4, 5), None),
    ("mean_all", lambda x: ops.mean(x), (3, 4), None),
    ("mean_axis", lambda x: ops.mean(x, axis=(0, 2)), (2, 3, 4), None),
    ("sum_axis", lambda x: ops.sum_(x, axis=1, keepdims=True), (3, 4), None),
    ("var", lambda x: ops.var(x, axis=(0, 2, 3)), (2, 3, 4, 4), None),
    ("l2_norm", lambda x: ops.l2_norm(x), (7,), None),
    ("reshape", lambda x: ops.reshape(x, (6, 2)), (3, 4), None),
    ("transpose", lambda x: ops.transpose(x, (1, 0, 2)), (2, 3, 4), None),
    ("avg_pool", lambda x: ops.avg_pool2d(x, 2), (2, 3, 4, 4), None),
    ("adaptive_pool", lambda x: ops.adaptive_avg_pool2d(x, (3, 3)), (2, 2, 7, 5), None),
    ("cell_mean", lambda x: ops.cell_mean(x, 2), (2, 3, 5, 6), None),
    ("channel_shuffle", lambda x: ops.channel_shuffle(x, 2), (2, 4, 3, 3), None),
]


@pytest.mark.parametrize("name,build,shape,domain", ELEMENTWISE_CASES,
                         ids=[c[0] for c in ELEMENTWISE_CASES])
def test_gradcheck_unary(name, build, shape, domain):
    rng = np.random.default_rng(hash(name) % 2**32)
    x0 = rng.standard_normal(shape)
    if domain == "positive":
        x0 = np.abs(x0) + 0.5
    if name == "relu":
        x0 += 0.2 * np.sign(x0)  # keep clear of the kink
    _, _, err = gradcheck(build, x0, rng=rng)
    assert err <= 1e-5, f"{name}: rel err {err}"


def test_gradcheck_binary_ops():
    rng = np.random.default_rng(7)
    for name, fn in [("add", ops.add), ("sub", ops.sub), ("mul", ops.mul), ("div", ops.div)]:
        a0 = rng.standard_normal((3, 4))
        b0 = rng.standard_normal((3, 4)) + (2.0 if name == "div" else 0.0)
        b_const = Array(b0)
        _, _, err_a = gradcheck(lambda x: fn(x, b_const), a0, rng=rng)
        a_const = Array(a0)
        _, _, err_b = gradcheck(lambda x: fn(a_const, x), b0, rng=rng)
        assert max(err_a, err_b) <= 1e-5, name


def test_gradcheck_matmul():
    rng = np.random.default_rng(8)
    a0 = rng.standard_normal((3, 4))
    b0 = rng.standard_normal((4, 2))
    bc = Array(b0)
    _, _, err = gradcheck(lambda x: ops.matmul(x, bc), a0, rng=rng)
    assert err <= 1e-6
    ac = Array(a0)
    _, _, err = gradcheck(lambda x: ops.matmul(ac, x), b0, rng=rng)
    assert err <= 1e-6


def test_conv2d_gradient_matches_finite_differences():
    # 1x1x4x4 input, 3x3 kernel: the canonical small case.
    rng = np.random.default_rng(42)
    x0 = rng.standard_normal((1, 1, 4, 4))
    w0 = rng.standard_normal((1, 1, 3, 3))
    wc = Array(w0)
    _, _, err = gradcheck(lambda x: ops.conv2d(x, wc, stride=1, padding=0), x0, rng=rng)
    assert err <= 1e-6
    xc = Array(x0)
    _, _, err = gradcheck(lambda w: ops.conv2d(xc, w, stride=1, padding=0), w0, rng=rng)
    assert err <= 1e-6


@pytest.mark.parametrize("stride,padding,groups", [(1, 1, 1), (2, 1, 1), (1, 0, 2), (2, 1, 4)])
def test_conv2d_gradcheck_variants(stride, padding, groups):
    rng = np.random.default_rng(stride * 100 + padding * 10 + groups)
    cin, cout = 4, 4
    x0 = rng.standard_normal((2, cin, 5, 5))
    w0 = rng.standard_normal((cout, cin // groups, 3, 3))
    wc = Array(w0)
    _, _, err = gradcheck(lambda x: ops.conv2d(x, wc, stride, padding, groups), x0, rng=rng)
    assert err <= 1e-6
    xc = Array(x0)
    _, _, err = gradcheck(lambda w: ops.conv2d(xc, w, stride, padding, groups), w0, rng=rng)
    assert err <= 1e-6


def test_batch_norm_train_vs_eval():
    rng = np.random.default_rng(5)
    x0 = rng.standard_normal((4, 3, 2, 2))
    gamma = Array(np.ones(3), requires_grad=True)
    beta = Array(np.zeros(3), requires_grad=True)
    rm = np.zeros(3)
    rv = np.ones(3)
    x = Array(x0, requires_grad=True)
    out = ops.batch_norm(x, gamma, beta, rm, rv, training=True, momentum=0.1)
    m = x0.mean(axis=(0, 2, 3))
    v = x0.var(axis=(0, 2, 3))
    np.testing.assert_allclose(rm, 0.1 * m)
    np.testing.assert_allclose(rv, 0.9 + 0.1 * v)
    np.testing.assert_allclose(out.data.mean(axis=(0, 2, 3)), 0.0, atol=1e-12)

    # Modes agree when batch statistics equal running statistics.
    rm2, rv2 = m.copy(), v.copy()
    out_train = ops.batch_norm(Array(x0), gamma, beta, rm2.copy(), rv2.copy(), training=True)
    out_eval = ops.batch_norm(Array(x0), gamma, beta, rm2, rv2, training=False)
    np.testing.assert_allclose(out_train.data, out_eval.data, atol=1e-12)


def test_batch_norm_gradcheck():
    rng = np.random.default_rng(6)
    x0 = rng.standard_normal((3, 2, 3, 3))
    g0 = rng.standard_normal(2) + 2.0
    b0 = rng.standard_normal(2)

    def build_train(x):
        return ops.batch_norm(x, Array(g0), Array(b0), np.zeros(2), np.ones(2), training=True)

    _, _, err = gradcheck(build_train, x0, rng=rng)
    assert err <= 1e-5

    rm = rng.standard_normal(2)
    rv = np.abs(rng.standard_normal(2)) + 0.5

    def build_eval(x):
        return ops.batch_norm(x, Array(g0), Array(b0), rm, rv, training=False)

    _, _, err = gradcheck(build_eval, x0, rng=rng)
    assert err <= 1e-6

    xc = Array(x0)

    def build_gamma(g):
        return ops.batch_norm(xc, g, Array(b0), np.zeros(2), np.ones(2), training=True)

    _, _, err = gradcheck(build_gamma, g0, rng=rng)
    assert err <= 1e-5


def test_group_norm_gradcheck():
    rng = np.random.default_rng(9)
    x0 = rng.standard_normal((2, 4, 3, 3))
    g0 = rng.standard_normal(4) + 2.0
    b0 = rng.standard_normal(4)

    def build(x):
        return ops.group_norm(x, Array(g0), Array(b0), groups=2)

    _, _, err = gradcheck(build, x0, rng=rng)
    assert err <= 1e-5


def test_cross_entropy_and_kl():
    rng = np.random.default_rng(10)
    logits0 = rng.standard_normal((4, 5))
    labels = np.array([0, 2, 4, 1])
    _, _, err = gradcheck(lambda x: ops.cross_entropy(x, labels), logits0, rng=rng)
    assert err <= 1e-6

    p0 = np.abs(rng.standard_normal(5)) + 0.1
    p0 /= p0.sum()
    q0 = np.abs(rng.standard_normal(5)) + 0.1
    q0 /= q0.sum()
    pc = Array(p0)
    _, _, err = gradcheck(lambda q: ops.kl_div(pc, q), q0, rng=rng)
    assert err <= 1e-5
    assert ops.kl_div(Array(p0), Array(p0)).item() == pytest.approx(0.0, abs=1e-12)


def test_sq_err_gradcheck():
    rng = np.random.default_rng(11)
    a0 = rng.standard_normal((3, 4))
    b0 = rng.standard_normal((3, 4))
    bc = Array(b0)
    _, _, err = gradcheck(lambda a: ops.sq_err(a, bc), a0, rng=rng)
    assert err <= 1e-6


def test_stop_grad_identity_and_block():
    x0 = RNG.standard_normal((3, 3))
    x = Array(x0, requires_grad=True)
    sg = stop_grad(x)
    np.testing.assert_array_equal(sg.data, x0)
    y = ops.sum_(ops.mul(sg, x))
    backward(y)
    np.testing.assert_allclose(x.grad, x0)  # x, not 2x


def test_no_grad_suppresses_recording():
    x = Array(np.ones(3), requires_grad=True)
    with no_grad():
        y = ops.mul(x, x)
    assert y._node is None and not y.requires_grad


def test_tape_reverse_topological_order():
    x = Array(np.ones(3), requires_grad=True)
    a = ops.mul(x, x)
    b = ops.add(a, x)
    c = ops.sum_(ops.mul(b, a))
    tape = Tape.trace(c)
    seqs = [arr._seq for arr in tape.entries]
    assert seqs == sorted(seqs)
    pos = {id(arr): i for i, arr in enumerate(tape.entries)}
    for arr in tape.entries:
        for inp in arr._node.inputs:
            if inp._node is not None:
                assert pos[id(inp)] < pos[id(arr)]


def test_backward_deterministic_bitwise():
    rng = np.random.default_rng(12)
    x0 = rng.standard_normal((4, 3, 6, 6))
    w0 = rng.standard_normal((5, 3, 3, 3))

    def run():
        x = Array(x0, requires_grad=True)
        w = Array(w0, requires_grad=True)
        out = ops.sum_(ops.relu(ops.conv2d(x, w, stride=1, padding=1)))
        backward(out)
        return x.grad.copy(), w.grad.copy()

    gx1, gw1 = run()
    gx2, gw2 = run()
    assert gx1.tobytes() == gx2.tobytes()
    assert gw1.tobytes() == gw2.tobytes()


def test_grad_accumulates_across_backward_calls():
    x = Array(np.array([1.0, 2.0]), requires_grad=True)
    y1 = ops.sum_(ops.mul(x, x))
    backward(y1)
    first = x.grad.copy()
    y2 = ops.sum_(ops.mul(x, x))
    backward(y2)
    np.testing.assert_allclose(x.grad, 2 * first)


def test_avg_pool_requires_divisibility():
    with pytest.raises(EngineError, match="avg_pool2d"):
        ops.avg_pool2d(Array(np.ones((1, 1, 5, 4))), 2)


def test_cell_mean_rejects_oversized_cells():
    with pytest.raises(EngineError, match="cell_mean"):
        ops.cell_mean(Array(np.ones((1, 1, 4, 4))), 5)
