import io

import numpy as np
import pytest

from tstcnn.tensor import (
    ContractError,
    ShapeError,
    Tape,
    Tensor,
    add,
    add_scalar,
    elementwise,
    multiply,
    multiply_scalar,
    read_tensor,
    reduce_mean,
    reduce_sum,
    write_tensor,
)

from oracles import finite_diff_grads, max_rel_error


def test_scalar_add_matches_definition():
    x = Tensor([0.2, 0.5])
    out = add_scalar(x, 1.0)
    np.testing.assert_allclose(out.data, [1.2, 1.5], rtol=1e-6)


def test_elementwise_multiply_matches_definition():
    out = multiply(Tensor([1.0, 2.0, 3.0]), Tensor([4.0, 5.0, 6.0]))
    np.testing.assert_allclose(out.data, [4.0, 10.0, 18.0], rtol=1e-6)


def test_elementwise_dispatch_and_unknown_kind():
    a = Tensor([1.0, 2.0])
    np.testing.assert_allclose(elementwise("scalar-multiply", a, 3.0).data, [3.0, 6.0])
    with pytest.raises(ContractError):
        elementwise("divide", a, a)


def test_shape_mismatch_names_both_shapes():
    with pytest.raises(ShapeError) as exc:
        add(Tensor([1.0, 2.0]), Tensor([[1.0], [2.0]]))
    assert "(2,)" in str(exc.value) and "(2, 1)" in str(exc.value)


def test_strictly_positive_extents():
    with pytest.raises(ShapeError):
        Tensor(np.zeros((2, 0)))


def test_multiply_backward_frozen():
    # backward of z = sum(x * y) at x=[1,2], y=[3,4]: dz/dx = y
    # frozen from the finite-difference oracle (64-bit, step 1e-6)
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True, dtype=np.float64)
    y = Tensor(np.array([3.0, 4.0]), requires_grad=True, dtype=np.float64)
    with Tape() as tape:
        z = reduce_sum(multiply(x, y))
        tape.backward(z)
    np.testing.assert_allclose(x.grad, [3.0, 4.0], rtol=1e-6)
    np.testing.assert_allclose(y.grad, [1.0, 2.0], rtol=1e-6)


def test_backward_requires_scalar_root():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with Tape() as tape:
        y = multiply_scalar(x, 2.0)
        with pytest.raises(ContractError):
            tape.backward(y)


def test_backward_constant_root_empty_map():
    c = Tensor(3.0)
    with Tape() as tape:
        assert tape.backward(c) == {}


def test_backward_sum_all_ones():
    x = Tensor(np.zeros((2, 2)), requires_grad=True)
    with Tape() as tape:
        grads = tape.backward(reduce_sum(x))
    np.testing.assert_array_equal(grads[x], np.ones((2, 2)))


def test_backward_square_sum_frozen():
    # sum(x * x) at [1,-2,3] -> [2,-4,6], frozen from the FD oracle
    x = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True, dtype=np.float64)
    with Tape() as tape:
        tape.backward(reduce_sum(multiply(x, x)))
    np.testing.assert_allclose(x.grad, [2.0, -4.0, 6.0], rtol=1e-6)


def test_reduce_examples():
    np.testing.assert_allclose(reduce_mean(Tensor([1.0, 2.0, 3.0, 6.0])).data, 3.0)
    out = reduce_sum(Tensor([[1.0, 2.0], [3.0, 4.0]]), axes=0)
    np.testing.assert_allclose(out.data, [4.0, 6.0])
    with pytest.raises(ShapeError):
        reduce_sum(Tensor([1.0, 2.0]), axes=3)


def test_mean_gradient_frozen():
    x = Tensor(np.array([1.0, 5.0, -2.0, 8.0]), requires_grad=True, dtype=np.float64)
    with Tape() as tape:
        tape.backward(reduce_mean(x))
    np.testing.assert_allclose(x.grad, [0.25, 0.25, 0.25, 0.25], rtol=1e-9)


def test_gradients_match_finite_differences_all_kinds():
    rng = np.random.default_rng(7)
    for _ in range(10):
        shape = tuple(rng.integers(1, 4, size=int(rng.integers(1, 4))))
        a0 = rng.normal(size=shape)
        b0 = rng.normal(size=shape)
        s = float(rng.normal())

        def build(a, b):
            t1 = multiply(a, b)
            t2 = add(t1, multiply_scalar(a, s))
            t3 = add_scalar(t2, 0.5)
            return reduce_mean(multiply(t3, t3))

        a = Tensor(a0.copy(), requires_grad=True, dtype=np.float64)
        b = Tensor(b0.copy(), requires_grad=True, dtype=np.float64)
        with Tape() as tape:
            tape.backward(build(a, b))

        fa = a0.copy()
        fb = b0.copy()

        def f():
            return build(Tensor(fa, dtype=np.float64), Tensor(fb, dtype=np.float64)).item()

        fd_a, fd_b = finite_diff_grads(f, [fa, fb])
        assert max_rel_error(a.grad, fd_a) < 1e-4
        assert max_rel_error(b.grad, fd_b) < 1e-4


def test_replay_determinism_bit_identical():
    rng = np.random.default_rng(3)
    x0 = rng.normal(size=(4, 3)).astype(np.float32)
    y0 = rng.normal(size=(4, 3)).astype(np.float32)

    def run():
        x = Tensor(x0.copy(), requires_grad=True)
        y = Tensor(y0.copy(), requires_grad=True)
        with Tape() as tape:
            z = reduce_sum(multiply(add(x, y), multiply_scalar(x, 1.7)))
            tape.backward(z)
        return x.grad.copy(), y.grad.copy()

    gx1, gy1 = run()
    gx2, gy2 = run()
    assert np.array_equal(gx1, gx2) and gx1.dtype == gx2.dtype
    assert np.array_equal(gy1, gy2)


def test_grad_accumulation_doubles_exactly():
    x = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
    with Tape() as tape:
        z = reduce_sum(multiply(x, x))
        tape.backward(z)
        once = x.grad.copy()
        tape.backward(z)
    np.testing.assert_array_equal(x.grad, 2.0 * once)


def test_unreachable_tensor_untouched():
    x = Tensor([1.0], requires_grad=True)
    y = Tensor([2.0], requires_grad=True)
    with Tape() as tape:
        zx = reduce_sum(multiply(x, x))
        _ = multiply(y, y)  # recorded but not reachable from zx
        tape.backward(zx)
    assert y.grad is None


def test_serialization_roundtrip_bit_exact():
    rng = np.random.default_rng(11)
    for arr in [
        rng.normal(size=(2, 3, 4)).astype(np.float32),
        rng.normal(size=(5,)).astype(np.float64),
        np.float32(3.25).reshape(()),
    ]:
        buf = io.BytesIO()
        write_tensor(buf, arr)
        buf.seek(0)
        back = read_tensor(buf)
        assert back.dtype == arr.dtype
        assert back.shape == arr.shape
        assert np.array_equal(back.view(np.uint8) if back.ndim else back, arr.view(np.uint8) if arr.ndim else arr)


def test_serialization_truncation_detected():
    buf = io.BytesIO()
    write_tensor(buf, np.ones(4, dtype=np.float32))
    blob = buf.getvalue()[:-2]
    with pytest.raises(ContractError):
        read_tensor(io.BytesIO(blob))
