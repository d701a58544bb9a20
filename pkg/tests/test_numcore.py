import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from vcam_asr import numcore as nc
from vcam_asr.numcore import Tensor
from vcam_asr.numcore.gradcheck import max_rel_error


def leaf(a):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


def grad_of(fn, *xs):
    with nc.Tape() as tape:
        loss = fn(*xs)
    tape.backward(loss)
    return [x.grad for x in xs]


# -- matmul ----------------------------------------------------------------

def test_matmul_identity():
    out = nc.matmul(nc.constant(np.eye(2)), nc.constant([[1.0, 2.0], [3.0, 4.0]]))
    np.testing.assert_array_equal(out.data, [[1, 2], [3, 4]])


def test_matmul_basis_selection():
    out = nc.matmul(nc.constant([[1.0, 0.0]]), nc.constant([[5.0], [7.0]]))
    np.testing.assert_array_equal(out.data, [[5]])


def test_matmul_shape_mismatch():
    with pytest.raises(nc.ShapeError):
        nc.matmul(nc.constant(np.ones((2, 3))), nc.constant(np.ones((2, 3))))


def test_matmul_gradient_matches_column_sums():
    rng = np.random.default_rng(0)
    with nc.precision(64):
        a, b = leaf(rng.uniform(-1, 1, (3, 4))), leaf(rng.uniform(-1, 1, (4, 2)))
        (ga, gb) = grad_of(lambda a, b: nc.reduce_sum(nc.matmul(a, b)), a, b)
        np.testing.assert_allclose(ga, np.broadcast_to(b.data.sum(axis=1), (3, 4)))
        err = max_rel_error(lambda: nc.reduce_sum(nc.matmul(a, b)), [a, b])
    assert err < 1e-4


# -- softmax ---------------------------------------------------------------

def test_softmax_uniform_row():
    np.testing.assert_allclose(nc.softmax_rows(nc.constant([[0.0, 0.0, 0.0]])).data, [[1 / 3] * 3])


def test_softmax_closed_form():
    out = nc.softmax_rows(nc.constant([[2.0, 0.0]])).data
    np.testing.assert_allclose(out, [[0.88080, 0.11920]], atol=1e-4)


def test_softmax_rejects_non_finite():
    with pytest.raises(nc.NumericError):
        nc.softmax_rows(nc.constant([[np.nan, 0.0]]))


@settings(max_examples=50, deadline=None)
@given(hnp.arrays(np.float64, (3, 5), elements=st.floats(-1e3, 1e3)), st.floats(-100, 100))
def test_softmax_stable_and_shift_invariant(x, c):
    with nc.precision(64):
        a = nc.softmax_rows(nc.constant(x)).data
        b = nc.softmax_rows(nc.constant(x + c)).data
    assert np.all(a >= 0)
    np.testing.assert_allclose(a.sum(axis=1), 1.0, atol=1e-6)
    np.testing.assert_allclose(a, b, atol=1e-9)


def test_softmax_mask_zeroes_masked_entries():
    mask = np.array([[True, False, True]])
    out = nc.softmax(nc.constant([[1.0, 50.0, 1.0]]), mask=mask).data
    np.testing.assert_allclose(out, [[0.5, 0.0, 0.5]])


# -- layer norm ------------------------------------------------------------

def test_layer_norm_constant_vector_is_zero():
    out = nc.layer_norm(nc.constant([[3.0, 3.0, 3.0]]), nc.constant(np.ones(3)), nc.constant(np.zeros(3)))
    np.testing.assert_allclose(out.data, 0.0, atol=1e-6)


def test_layer_norm_closed_form():
    out = nc.layer_norm(nc.constant([[1.0, -1.0]]), nc.constant(np.ones(2)), nc.constant(np.zeros(2)))
    np.testing.assert_allclose(out.data, [[1.0, -1.0]], atol=1e-4)


def test_layer_norm_zero_gain_gives_bias():
    bias = np.array([0.5, -2.0, 7.0])
    out = nc.layer_norm(nc.constant(np.random.default_rng(1).normal(size=(4, 3))),
                        nc.constant(np.zeros(3)), nc.constant(bias))
    np.testing.assert_allclose(out.data, np.broadcast_to(bias, (4, 3)), atol=1e-6)


# -- backward --------------------------------------------------------------

def test_backward_sum_gives_ones():
    x = leaf([1.0, 2.0, 3.0])
    (g,) = grad_of(nc.reduce_sum, x)
    np.testing.assert_array_equal(g, [1, 1, 1])


def test_backward_quadratic():
    x = leaf([1.0, 2.0])
    (g,) = grad_of(lambda x: nc.reduce_sum(nc.mul(x, x)), x)
    np.testing.assert_allclose(g, [2, 4])


def test_backward_rejects_non_scalar():
    x = leaf([1.0, 2.0])
    with nc.Tape() as tape:
        y = nc.mul(x, x)
    with pytest.raises(ValueError):
        tape.backward(y)


def test_tape_is_topologically_ordered():
    x = leaf([1.0, 2.0])
    with nc.Tape() as tape:
        y = nc.exp(x)
        z = nc.reduce_sum(nc.mul(y, x))
    produced = set()
    for rec in tape.records:
        for t in rec.inputs:
            assert not t.requires_grad or t is x or id(t) in produced
        produced.add(id(rec.out))
    assert tape.records[-1].out is z


def test_gradients_accumulate_over_reuse():
    x = leaf([3.0])
    (g,) = grad_of(lambda x: nc.reduce_sum(nc.add(nc.mul(x, x), x)), x)
    np.testing.assert_allclose(g, [7.0])


# -- finite differences for every differentiable op -------------------------

def _u(rng, *shape):
    return leaf(rng.uniform(-1, 1, shape))


OPS = {
    "add": (lambda a, b: nc.add(a, b), [(3, 4), (4,)]),
    "sub": (lambda a, b: nc.sub(a, b), [(3, 4), (3, 4)]),
    "mul": (lambda a, b: nc.mul(a, b), [(3, 4), (3, 4)]),
    "scale": (lambda a: nc.scale(a, -1.7), [(3, 4)]),
    "exp": (nc.exp, [(3, 4)]),
    "log": (lambda a: nc.log(nc.add(nc.mul(a, a), nc.constant(np.full(4, 0.5)))), [(3, 4)]),
    "log1p": (lambda a: nc.log1p(nc.mul(a, a)), [(3, 4)]),
    "relu": (lambda a: nc.relu(nc.add(a, nc.constant(np.full(4, 0.05)))), [(3, 4)]),
    "tanh": (nc.tanh, [(3, 4)]),
    "gelu": (nc.gelu, [(3, 4)]),
    "mean": (lambda a: nc.mean(a, axis=0), [(3, 4)]),
    "logsumexp": (nc.logsumexp, [(3, 4)]),
    "matmul_batched": (nc.matmul, [(2, 3, 4), (2, 4, 5)]),
    "transpose": (lambda a: nc.transpose(a, (2, 0, 1)), [(2, 3, 4)]),
    "reshape": (lambda a: nc.reshape(a, (4, 6)), [(2, 3, 4)]),
    "concat": (lambda a, b: nc.concat([a, b], axis=-1), [(3, 2), (3, 5)]),
    "index": (lambda a: a[:, 1:3], [(3, 4)]),
    "outer_add": (nc.outer_add, [(2, 3, 4), (2, 2, 4)]),
    "softmax": (nc.softmax, [(3, 4)]),
    "log_softmax": (nc.log_softmax, [(3, 4)]),
    "layer_norm": (nc.layer_norm, [(3, 4), (4,), (4,)]),
    "conv2d": (lambda x, w: nc.conv2d(x, w, stride=2, pad=1), [(2, 5, 5, 2), (3, 3, 2, 3)]),
    "conv1d_time": (lambda x, w: nc.conv1d_time(x, w, pad=1), [(2, 5, 2, 3), (3, 3, 2)]),
    "conv1d_time_strided": (lambda x, w: nc.conv1d_time(x, w, stride=3), [(1, 6, 3), (3, 3, 2)]),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradient_matches_finite_differences(name):
    fn, shapes = OPS[name]
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    with nc.precision(64):
        xs = [_u(rng, *s) for s in shapes]
        weights = None

        def loss():
            nonlocal weights
            out = fn(*xs)
            if weights is None:
                weights = np.random.default_rng(5).uniform(-1, 1, out.shape)
            return nc.reduce_sum(nc.mul(out, nc.constant(weights)))

        err = max_rel_error(loss, xs, eps=1e-4)
    assert err < 1e-4, f"{name}: {err}"


def test_embedding_gradient_scatters():
    table = leaf(np.zeros((4, 2)))
    (g,) = grad_of(lambda t: nc.reduce_sum(nc.embedding(t, np.array([[1, 1, 3]]))), table)
    np.testing.assert_array_equal(g, [[0, 0], [2, 2], [0, 0], [1, 1]])


def test_same_computation_is_bit_identical():
    rng = np.random.default_rng(3)
    w = rng.normal(size=(8, 8)).astype(np.float32)

    def run():
        x = Tensor(np.arange(64, dtype=np.float32).reshape(8, 8) / 64, requires_grad=True)
        with nc.Tape() as tape:
            loss = nc.reduce_sum(nc.gelu(nc.matmul(x, nc.constant(w))))
        tape.backward(loss)
        return loss.data.tobytes(), x.grad.tobytes()

    assert run() == run()


def test_default_precision_is_32_bit_and_switchable():
    assert nc.constant([1.0]).dtype == np.float32
    with nc.precision(64):
        assert nc.constant([1.0]).dtype == np.float64
    assert nc.constant([1.0]).dtype == np.float32


# -- tensor container ------------------------------------------------------

def test_container_layout():
    arr = np.arange(6, dtype=np.float32).reshape(2, 3)
    buf = nc.container.to_bytes(arr)
    assert buf[:4] == b"VCT1"
    assert int.from_bytes(buf[4:8], "little") == 2
    assert int.from_bytes(buf[8:16], "little") == 2 and int.from_bytes(buf[16:24], "little") == 3
    np.testing.assert_array_equal(np.frombuffer(buf[24:], "<f4"), arr.ravel())


@settings(max_examples=30, deadline=None)
@given(hnp.arrays(np.float32, hnp.array_shapes(min_dims=1, max_dims=4, max_side=5),
                  elements=st.floats(-1e6, 1e6, width=32)))
def test_container_round_trip(arr):
    back = nc.container.from_bytes(nc.container.to_bytes(arr))
    assert back.shape == arr.shape
    np.testing.assert_array_equal(back, arr)


def test_container_rejects_bad_magic():
    with pytest.raises(nc.ContainerError):
        nc.container.from_bytes(b"XXXX" + bytes(8))


def test_container_rejects_truncation():
    buf = nc.container.to_bytes(np.ones((2, 2), dtype=np.float32))
    with pytest.raises(nc.ContainerError):
        nc.container.from_bytes(buf[:-1])
