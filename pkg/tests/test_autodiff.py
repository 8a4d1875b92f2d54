import numpy as np
import pytest

from ctxrec import autodiff as ad
from ctxrec.autodiff import Parameter, ShapeError, Tensor
from ctxrec.gradcheck import check_scalar_fn, rel_err
from ctxrec.nn import GruCell, Mlp


def leaf(rng, shape):
    return Parameter(rng.uniform(0.2, 1.5, size=shape))


def scalarize(t):
    return ad.mean_all(t)


# --- forward sanity -------------------------------------------------------

def test_sigmoid_at_zero():
    x = Parameter(np.zeros((1, 1)))
    y = ad.sigmoid(x)
    assert y.item() == 0.5
    ad.backward(y)
    assert x.grad[0, 0] == 0.25


def test_matmul_identity():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(3, 3))
    out = ad.matmul(ad.constant(np.eye(3)), ad.constant(a))
    np.testing.assert_array_equal(out.data, a)


def test_shape_mismatch_names_op():
    with pytest.raises(ShapeError, match="matmul"):
        ad.matmul(ad.constant(np.ones((2, 3))), ad.constant(np.ones((2, 3))))
    with pytest.raises(ShapeError, match="add"):
        ad.add(ad.constant(np.ones((2, 3))), ad.constant(np.ones((3, 2))))


def test_softmax_rows_sum_to_one():
    rng = np.random.default_rng(1)
    s = ad.softmax_rows(ad.constant(rng.normal(size=(4, 6))))
    np.testing.assert_allclose(s.data.sum(axis=1), 1.0, atol=1e-12)


# --- gradient checks per op (finite-difference oracle) ---------------------

OP_CASES = {
    "add": lambda a, b: ad.add(a, b),
    "sub": lambda a, b: ad.sub(a, b),
    "mul": lambda a, b: ad.mul(a, b),
    "div": lambda a, b: ad.div(a, b),
    "matmul": lambda a, b: ad.matmul(a, ad.transpose(b)),
    "dot": lambda a, b: ad.dot(a, b),
}

UNARY_CASES = {
    "sigmoid": ad.sigmoid,
    "tanh": ad.tanh,
    "relu": ad.relu,
    "leaky_relu": lambda t: ad.leaky_relu(t, 0.2),
    "log": ad.log,
    "exp": ad.exp,
    "square": ad.square,
    # mean of a softmax row is constant; weight it to get a non-trivial loss
    "softmax": lambda t: ad.mul(ad.softmax_rows(t),
                                ad.constant(np.arange(t.data.size).reshape(t.data.shape))),
    "sum": ad.sum_all,
    "mean": ad.mean_all,
    "row_sum": ad.row_sum,
    "transpose": ad.transpose,
    "smooth_clamp": ad.smooth_clamp,
}


@pytest.mark.parametrize("name", sorted(OP_CASES))
def test_binary_op_gradients(name):
    rng = np.random.default_rng(hash(name) % 2**32)
    a, b = leaf(rng, (3, 4)), leaf(rng, (3, 4))
    fn = OP_CASES[name]
    assert check_scalar_fn(lambda: scalarize(fn(a, b)), [a, b]) < 1e-6


@pytest.mark.parametrize("name", sorted(UNARY_CASES))
def test_unary_op_gradients(name):
    rng = np.random.default_rng(hash(name) % 2**32)
    a = leaf(rng, (3, 4))
    fn = UNARY_CASES[name]
    assert check_scalar_fn(lambda: scalarize(fn(a)), [a]) < 1e-6


def test_broadcast_gradients():
    rng = np.random.default_rng(7)
    a = leaf(rng, (3, 4))
    row = leaf(rng, (1, 4))
    col = leaf(rng, (3, 1))
    assert check_scalar_fn(lambda: scalarize(ad.add(a, row)), [a, row]) < 1e-6
    assert check_scalar_fn(lambda: scalarize(ad.mul(a, col)), [a, col]) < 1e-6
    assert check_scalar_fn(lambda: scalarize(ad.div(a, row)), [a, row]) < 1e-6


def test_structural_op_gradients():
    rng = np.random.default_rng(11)
    a, b = leaf(rng, (3, 4)), leaf(rng, (2, 4))
    assert check_scalar_fn(
        lambda: scalarize(ad.concat_rows([a, b])), [a, b]) < 1e-6
    assert check_scalar_fn(
        lambda: scalarize(ad.concat_cols([a, ad.transpose(b)][:1] + [a])), [a]) < 1e-6
    assert check_scalar_fn(
        lambda: scalarize(ad.slice_rows(a, 1, 3)), [a]) < 1e-6
    assert check_scalar_fn(
        lambda: scalarize(ad.slice_cols(a, 0, 2)), [a]) < 1e-6
    assert check_scalar_fn(
        lambda: scalarize(ad.repeat_rows(a, 3)), [a]) < 1e-6
    assert check_scalar_fn(
        lambda: scalarize(ad.tile_rows(a, 3)), [a]) < 1e-6
    assert check_scalar_fn(
        lambda: scalarize(ad.reshape(a, 4, 3)), [a]) < 1e-6
    assert check_scalar_fn(
        lambda: scalarize(ad.pad_block(a, 5, 6, 1, 2)), [a]) < 1e-6


def test_embedding_rows_gradient_scatter():
    rng = np.random.default_rng(13)
    table = leaf(rng, (5, 3))
    # repeated index must accumulate
    assert check_scalar_fn(
        lambda: scalarize(ad.rows(table, [0, 2, 2, 4])), [table]) < 1e-6


def test_no_path_yields_none_gradient():
    rng = np.random.default_rng(17)
    a, unused = leaf(rng, (2, 2)), leaf(rng, (2, 2))
    loss = ad.mean_all(ad.mul(a, a))
    ad.backward(loss)
    assert unused.grad is None
    assert a.grad is not None


def test_reused_node_accumulates():
    x = Parameter(np.full((1, 1), 3.0))
    y = ad.add(ad.mul(x, x), x)  # x^2 + x, dy/dx = 2x + 1 = 7
    ad.backward(y)
    assert x.grad[0, 0] == pytest.approx(7.0)


# --- gumbel gate ------------------------------------------------------------

def test_gate_inference_threshold():
    beta = ad.constant([[0.9, 0.2, 0.5000001]])
    out = ad.gumbel_binary_gate(beta, tau=1.0, hard=True, rng=None)
    np.testing.assert_array_equal(out.data, [[1.0, 0.0, 1.0]])


def test_gate_rejects_bad_inputs():
    with pytest.raises(ValueError):
        ad.gumbel_binary_gate(ad.constant([[0.5]]), tau=0.0, hard=False, rng=None)
    with pytest.raises(ValueError):
        ad.gumbel_binary_gate(ad.constant([[1.0]]), tau=1.0, hard=False, rng=None)


def test_gate_hard_matches_bernoulli_beta():
    # Gumbel-max property: P(hard gate = 1) equals beta at any temperature.
    rng = np.random.default_rng(123)
    for target in (0.2, 0.7):
        beta = ad.constant(np.full((10000, 1), target))
        out = ad.gumbel_binary_gate(beta, tau=0.1, hard=True, rng=rng)
        assert abs(out.data.mean() - target) < 0.02


def test_gate_soft_path_gradient_flows():
    base = Parameter(np.full((2, 3), 0.6))

    def fn():
        rng = np.random.default_rng(99)
        return ad.mean_all(ad.gumbel_binary_gate(base, tau=1.0, hard=False, rng=rng))

    assert check_scalar_fn(fn, [base]) < 1e-6


def test_gate_straight_through_gradient_nonzero():
    base = Parameter(np.full((1, 1), 0.6))
    rng = np.random.default_rng(5)
    out = ad.gumbel_binary_gate(base, tau=1.0, hard=True, rng=rng)
    assert out.data[0, 0] in (0.0, 1.0)
    ad.backward(out)
    assert base.grad is not None and base.grad[0, 0] != 0.0


# --- adam -------------------------------------------------------------------

def test_adam_zero_gradient_leaves_params():
    p = Parameter(np.ones((2, 2)))
    p.grad = np.zeros((2, 2))
    ad.adam_step([p], lr=0.1)
    np.testing.assert_array_equal(p.data, np.ones((2, 2)))


def test_adam_first_step_bias_corrected():
    p = Parameter(np.zeros((1, 1)))
    p.grad = np.ones((1, 1))
    ad.adam_step([p], lr=0.1)
    # bias-corrected first step moves by ~lr regardless of moment decay
    assert p.data[0, 0] == pytest.approx(-0.1, rel=1e-6)


def test_adam_converges_on_quadratic():
    p = Parameter(np.full((1, 1), 5.0))
    for _ in range(500):
        ad.zero_grads([p])
        loss = ad.mul(p, p)
        ad.backward(loss)
        ad.adam_step([p], lr=0.1)
    assert abs(p.data[0, 0]) < 0.1


def test_adam_rejects_nonfinite():
    p = Parameter(np.ones((1, 1)))
    p.grad = np.array([[np.nan]])
    with pytest.raises(FloatingPointError):
        ad.adam_step([p], lr=0.1)


# --- building blocks --------------------------------------------------------

def test_mlp_gradient():
    rng = np.random.default_rng(23)
    mlp = Mlp([4, 8, 3], rng, out_act="sigmoid")
    x = leaf(rng, (2, 4))
    leaves = mlp.parameters() + [x]
    assert check_scalar_fn(lambda: scalarize(mlp.forward(x)), leaves) < 1e-4


def test_gru_hand_recurrence():
    # independent recurrence in plain numpy, same update convention
    rng = np.random.default_rng(29)
    cell = GruCell(3, 3, rng)
    xs = rng.normal(size=(2, 3))

    def sig(v):
        return 1.0 / (1.0 + np.exp(-v))

    h = np.zeros((1, 3))
    for t in range(2):
        x = xs[t:t + 1]
        z = sig(x @ cell.wz.data + h @ cell.uz.data + cell.bz.data)
        r = sig(x @ cell.wr.data + h @ cell.ur.data + cell.br.data)
        cand = np.tanh(x @ cell.wh.data + (r * h) @ cell.uh.data + cell.bh.data)
        h = (1 - z) * cand + z * h

    out = cell.run(ad.constant(xs))
    np.testing.assert_allclose(out.data, h, atol=1e-12)


def test_gru_gradient_through_steps():
    rng = np.random.default_rng(31)
    cell = GruCell(2, 2, rng)
    xs = Parameter(rng.normal(size=(5, 2)))
    leaves = cell.parameters() + [xs]
    assert check_scalar_fn(lambda: scalarize(cell.run(xs)), leaves) < 1e-4


def test_gru_single_step_zero_weights():
    rng = np.random.default_rng(37)
    cell = GruCell(2, 2, rng)
    for p in cell.parameters():
        p.data[:] = 0.0
    out = cell.run(ad.constant(np.ones((1, 2))))
    np.testing.assert_array_equal(out.data, np.zeros((1, 2)))


# --- determinism and checkpoints ---------------------------------------------

def test_checkpoint_roundtrip(tmp_path):
    rng = np.random.default_rng(41)
    named = {"a": rng.normal(size=(3, 4)), "b/c": rng.normal(size=(1, 1))}
    path = tmp_path / "ck.bin"
    ad.save_tensors(path, named)
    loaded = ad.load_tensors(path)
    assert list(loaded) == ["a", "b/c"]
    for k in named:
        np.testing.assert_array_equal(loaded[k], np.atleast_2d(named[k]))


def test_checkpoint_bytes_deterministic(tmp_path):
    named = {"x": np.arange(6, dtype=np.float64).reshape(2, 3)}
    p1, p2 = tmp_path / "a.bin", tmp_path / "b.bin"
    ad.save_tensors(p1, named)
    ad.save_tensors(p2, named)
    assert p1.read_bytes() == p2.read_bytes()
