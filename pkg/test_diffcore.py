import numpy as np
import pytest

import diffcore as dc


def test_softmax_uniform():
    p = dc.softmax_rows(dc.Tensor(np.full(4, 3.0)))
    assert p.data == pytest.approx([0.25] * 4)

def test_softmax_large_logits():
    p = dc.softmax_rows(dc.Tensor([[1000.0, 1000.0], [0.0, -1e9]]))
    assert np.isfinite(p.data).all()
    assert p.data[0] == pytest.approx([0.5, 0.5])
    assert p.data[1] == pytest.approx([1.0, 0.0])

def test_clip_value():
    assert dc.clip(dc.Tensor(1.5), 0.8, 1.2).item() == 1.2

def test_log_floor():
    x = dc.Tensor([0.0, 1.0], requires_grad=True)
    y = dc.log(x)
    assert y.data[0] == pytest.approx(np.log(1e-12))
    dc.backward(dc.reduce_sum(y))
    assert x.grad[0] == 0.0
    assert x.grad[1] == 1.0

def test_sum_grad():
    x = dc.Tensor([1.0, 2.0, 3.0], requires_grad=True)
    dc.backward(dc.reduce_sum(x))
    assert list(x.grad) == [1.0, 1.0, 1.0]

def test_mean_square_grad():
    x = dc.Tensor([1.0, 2.0], requires_grad=True)
    dc.backward(dc.reduce_mean(x * x))
    assert x.grad == pytest.approx([1.0, 2.0])

def test_stop_grad():
    x = dc.Tensor([0.5, -1.5], requires_grad=True)
    w = dc.Tensor([2.0, 3.0], requires_grad=True)
    s = dc.stop_grad(x)
    assert np.array_equal(s.data, x.data)
    dc.backward(dc.reduce_sum(s * w))
    assert np.array_equal(x.grad, np.zeros(2))
    assert np.array_equal(w.grad, x.data)

def test_grads_accumulate_until_zeroed():
    x = dc.Tensor([1.0, 2.0], requires_grad=True)
    dc.backward(dc.reduce_sum(x * 3.0))
    dc.backward(dc.reduce_sum(x * 3.0))
    assert list(x.grad) == [6.0, 6.0]
    x.zero_grad()
    dc.backward(dc.reduce_sum(x))
    assert list(x.grad) == [1.0, 1.0]

def test_shared_input_visited_once():
    # y is used twice; its entry must still be replayed a single time
    x = dc.Tensor(2.0, requires_grad=True)
    y = x * x
    dc.backward(y * y + y)
    # d/dx (x^4 + x^2) = 4x^3 + 2x
    assert x.grad == pytest.approx(36.0)

def test_tape_order():
    x = dc.Tensor([1.0, 2.0], requires_grad=True)
    loss = dc.reduce_sum(dc.tanh(x * 2.0) + x)
    tape = dc.Tape(loss)
    seqs = [t._entry.seq for t in tape.entries]
    assert seqs == sorted(seqs)
    assert tape.entries[-1] is loss

def test_backward_needs_scalar():
    x = dc.Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(dc.RankError):
        dc.backward(x * 2.0)

def test_shape_errors():
    with pytest.raises(dc.ShapeError):
        dc.matmul(dc.Tensor(np.ones((2, 3))), dc.Tensor(np.ones(2)))
    with pytest.raises(dc.ShapeError):
        dc.add(dc.Tensor(np.ones(2)), dc.Tensor(np.ones(3)))
    with pytest.raises(dc.ShapeError):
        dc.gather_index(dc.Tensor(np.ones(3)), 5)
    with pytest.raises(dc.DiffError):
        dc.forward_op('conv', [dc.Tensor(1.0)])

def test_no_tape_without_grad():
    y = dc.tanh(dc.Tensor([1.0]) * 2.0)
    assert y._entry is None and not y.requires_grad

def test_minimum():
    a = dc.Tensor([1.0, 5.0], requires_grad=True)
    b = dc.Tensor([3.0, 2.0], requires_grad=True)
    m = dc.minimum(a, b)
    assert list(m.data) == [1.0, 2.0]
    dc.backward(dc.reduce_sum(m))
    assert list(a.grad) == [1.0, 0.0]
    assert list(b.grad) == [0.0, 1.0]

def test_numpy_on_the_left():
    x = dc.Tensor([1.0, 2.0], requires_grad=True)
    y = np.array([3.0, 4.0]) - x
    assert isinstance(y, dc.Tensor)
    dc.backward(dc.reduce_sum(y))
    assert list(x.grad) == [-1.0, -1.0]

def test_backward_deterministic():
    def grads():
        rng = np.random.default_rng(3)
        w = dc.Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        x = dc.Tensor(rng.normal(size=4))
        dc.backward(dc.reduce_sum(dc.log(dc.softmax_rows(dc.matmul(w, x)))))
        return w.grad
    assert np.array_equal(grads(), grads())

def test_finite_diff_quadratic():
    p = dc.Tensor(3.0, requires_grad=True)
    report = dc.finite_diff_check(lambda: p * p, [p], h=1e-5)
    assert report.max_rel_error < 1e-6
    assert report.passed

def test_finite_diff_constant():
    p = dc.Tensor([1.0, 2.0], requires_grad=True)
    report = dc.finite_diff_check(lambda: dc.reduce_sum(p * 0.0) + 4.0, [p])
    assert report.max_rel_error == 0.0

def test_finite_diff_composite_ops():
    rng = np.random.default_rng(0)
    w = dc.Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    b = dc.Tensor(rng.normal(size=3), requires_grad=True)
    x = rng.normal(size=4)

    def f():
        h = dc.tanh(dc.matmul(w, x) + b)
        z = dc.stack([dc.exp(dc.gather_index(h, 0)), dc.relu(dc.gather_index(h, 1) + 2.0)])
        p = dc.softmax_rows(dc.stack([h, h * 2.0]))
        return dc.reduce_mean(dc.log(p)) + dc.reduce_sum(z)
    assert dc.finite_diff_check(f, [w, b]).passed

def test_finite_diff_rejects_bad_step():
    p = dc.Tensor(1.0, requires_grad=True)
    with pytest.raises(ValueError):
        dc.finite_diff_check(lambda: p * p, [p], h=0.0)

def test_finite_diff_nonfinite():
    p = dc.Tensor(1.0, requires_grad=True)
    with pytest.raises(dc.NumericsError):
        dc.finite_diff_check(lambda: p * np.inf, [p])
