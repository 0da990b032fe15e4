import numpy as np
import pytest

from mrrn.autodiff import (Adam, AdamState, Tape, Tensor, adam_step, add, backward, batch_norm, conv2d,
                           grad_check, maxpool2x2, no_grad, relu, softmax_ce_loss, sum_all)
from mrrn.autodiff.gradcheck import kink_threshold, relative_error
from oracles import adam_mp


def T(a, grad=False):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


# ---------------------------------------------------------------- tape

def test_sum_gradient_is_ones(rng):
    x = T(rng.standard_normal((2, 3, 4, 4)), grad=True)
    with Tape() as tape:
        loss = sum_all(x)
    tape.backward(loss)
    assert np.array_equal(x.grad, np.ones(x.shape))


def test_fan_out_accumulates(rng):
    x = T(rng.standard_normal((1, 2, 3, 3)), grad=True)
    with Tape() as tape:
        y = relu(x)
        loss = add(sum_all(y), sum_all(y))
    tape.backward(loss)
    assert np.array_equal(x.grad, 2.0 * (x.data > 0))


def test_tape_is_topological_and_visited_once(rng):
    x = T(rng.standard_normal((1, 1, 2, 2)), grad=True)
    calls = []
    with Tape() as tape:
        y = relu(x)
        z = add(y, x)
        loss = sum_all(z)
    produced = set()
    leaves = {id(x)}
    for op in tape.ops:
        for t in op.inputs:
            assert id(t) in produced or id(t) in leaves
        produced.add(id(op.output))
        inner = op.backward
        op.backward = lambda g, inner=inner, name=op.name: (calls.append(name), inner(g))[1]
    names = [op.name for op in tape.ops]
    tape.backward(loss)
    assert calls == names[::-1]
    assert np.array_equal(x.grad, (x.data > 0) + 1.0)


def test_backward_rejects_foreign_loss(rng):
    x = T(rng.standard_normal((1, 1, 2, 2)), grad=True)
    with Tape():
        loss = sum_all(x)
    other = Tape()
    with pytest.raises(ValueError, match="tape"):
        other.backward(loss)
    with pytest.raises(ValueError, match="tape"):
        backward(T(1.0))


def test_backward_needs_scalar_or_seed(rng):
    x = T(rng.standard_normal((1, 1, 2, 2)), grad=True)
    with Tape() as tape:
        y = relu(x)
    with pytest.raises(ValueError, match="scalar"):
        tape.backward(y)


def test_no_grad_records_nothing(rng):
    x = T(rng.standard_normal((1, 1, 2, 2)), grad=True)
    with Tape() as tape, no_grad():
        sum_all(relu(x))
    assert len(tape) == 0


def test_backward_releases_tape(rng):
    x = T(rng.standard_normal((1, 1, 2, 2)), grad=True)
    with Tape() as tape:
        loss = sum_all(x)
    tape.backward(loss)
    assert len(tape) == 0 and loss._tape is None


def test_gradients_finite_and_shaped(rng):
    x = T(rng.standard_normal((2, 2, 4, 4)), grad=True)
    w = T(rng.standard_normal((6, 2, 3, 3)), grad=True)
    g, b = T(np.ones(6), grad=True), T(np.zeros(6), grad=True)
    with Tape() as tape:
        loss = softmax_ce_loss(relu(batch_norm(conv2d(x, w), g, b)), rng.integers(0, 6, (2, 4, 4)))
    tape.backward(loss)
    for t in (x, w, g, b):
        assert t.grad.shape == t.shape and np.isfinite(t.grad).all()


def test_single_threaded_forward_backward_is_bitwise_repeatable(rng):
    from mrrn.training import threads

    x0 = rng.standard_normal((2, 3, 8, 8))
    w0 = rng.standard_normal((4, 3, 3, 3))

    def run():
        x, w = T(x0, grad=True), T(w0, grad=True)
        with Tape() as tape:
            loss = sum_all(maxpool2x2(relu(conv2d(x, w))))
        tape.backward(loss)
        return loss.data.tobytes() + x.grad.tobytes() + w.grad.tobytes()

    with threads(1):
        assert run() == run()


# ---------------------------------------------------------------- grad_check

def test_relative_error_is_normwise():
    assert relative_error(np.array([1.0, 0.0]), np.array([1.0, 0.0])) == 0.0
    assert relative_error(np.zeros(3), np.zeros(3)) == 0.0
    assert abs(relative_error(np.array([3.0, 4.0]), np.array([3.0, 4.5])) - 0.5 / np.hypot(3, 4.5)) < 1e-15


def test_kink_threshold():
    assert kink_threshold(np.float64) == 1e-4
    assert kink_threshold(np.float32) == 2e-3


def _conv_sample(rng):
    return {"x": rng.standard_normal((1, 2, 4, 5)), "w": rng.standard_normal((3, 2, 3, 3)),
            "b": rng.standard_normal(3)}


def test_grad_check_linear_conv_f64():
    rep = grad_check(lambda x, w, b: conv2d(x, w, b), _conv_sample, precision="f64", instances=5)
    assert rep.max_rel_error < 1e-8 and rep.instances == 5


def test_grad_check_bn_and_ce_f64():
    bn = grad_check(lambda x, g, b: batch_norm(x, g, b),
                    lambda r: {"x": r.standard_normal((2, 2, 3, 3)), "g": r.standard_normal(2),
                               "b": r.standard_normal(2)}, instances=5)
    ce = grad_check(lambda z, t: softmax_ce_loss(z, t),
                    lambda r: {"z": r.standard_normal((2, 6, 2, 2)), "t": r.integers(0, 6, (2, 2, 2))},
                    instances=5)
    assert bn.passed and bn.max_rel_error < 1e-5
    assert ce.passed and ce.max_rel_error < 1e-5


def test_grad_check_resamples_near_kinks():
    rep = grad_check(lambda x: relu(x), lambda r: {"x": r.standard_normal((1, 1, 4, 4)) * 1e-3},
                     instances=3, max_resamples=10_000)
    assert rep.resamples > 0 and rep.passed


def test_grad_check_detects_wrong_gradient():
    from mrrn.autodiff.ops import _emit

    def bad_square(x):
        return _emit("bad", (x,), x.data ** 2, lambda g: (g * x.data,))  # missing factor 2

    rep = grad_check(bad_square, lambda r: {"x": r.standard_normal((1, 1, 2, 2))}, instances=3)
    assert not rep.passed and rep.max_rel_error > 0.1


# ---------------------------------------------------------------- ADAM

def test_adam_zero_gradient_leaves_params():
    p = np.array([1.0, -2.0, 3.5])
    adam_step([p], [np.zeros(3)], AdamState())
    assert p.tolist() == [1.0, -2.0, 3.5]


def test_adam_first_step_example():
    p = np.array([0.0])
    state = AdamState(lr=0.1)
    adam_step([p], [np.array([1.0])], state)
    assert state.t == 1
    assert abs(p[0] - (-0.1 / (1 + 1e-8))) < 1e-18
    assert f"{p[0]:.10f}" == "-0.0999999990"


def test_adam_shape_mismatch():
    with pytest.raises(ValueError):
        adam_step([np.zeros(3)], [np.zeros(2)], AdamState())
    with pytest.raises(ValueError):
        adam_step([np.zeros(3)], [np.zeros(3), np.zeros(3)], AdamState())


def test_adam_state_shapes_and_counter(rng):
    params = [rng.standard_normal((2, 3)), rng.standard_normal(4)]
    state = AdamState()
    for t in range(1, 4):
        adam_step(params, [np.ones_like(p) for p in params], state)
        assert state.t == t
    assert [m.shape for m in state.m] == [(2, 3), (4,)] and [v.shape for v in state.v] == [(2, 3), (4,)]


@pytest.mark.parametrize("lr,p0,a", [(1e-4, 3.0, 1.0), (0.1, -2.5, 4.0), (0.05, 0.3, 0.5)])
def test_adam_quadratic_trajectory_vs_mp(lr, p0, a):
    # f(p) = a/2 (p - 1)^2
    p = np.array([p0])
    state = AdamState(lr=lr)
    ours = []
    for _ in range(5):
        adam_step([p], [a * (p - 1.0)], state)
        ours.append(p[0])
    ref = adam_mp(p0, lambda q: a * (q - 1), 5, lr=lr)
    assert max(abs(o - float(r)) for o, r in zip(ours, ref)) < 1e-12


def test_adam_wrapper_steps_tensors():
    w = Tensor(np.array([0.0]), requires_grad=True)
    opt = Adam([w], lr=0.1)
    w.grad = np.array([1.0])
    opt.step()
    assert abs(w.data[0] + 0.1 / (1 + 1e-8)) < 1e-18
    opt.zero_grad()
    assert w.grad is None


def test_directional_mode_agrees_on_correct_gradient():
    rep = grad_check(lambda x, w, b: conv2d(x, w, b), _conv_sample, instances=5, directions=3)
    assert rep.passed and rep.max_rel_error < 1e-8


def test_directional_mode_detects_wrong_gradient():
    from mrrn.autodiff.ops import _emit

    def bad_square(x):
        return _emit("bad", (x,), x.data ** 2, lambda g: (g * x.data,))

    rep = grad_check(bad_square, lambda r: {"x": r.standard_normal((1, 1, 3, 3))}, instances=3, directions=2)
    assert not rep.passed and rep.max_rel_error > 0.1


def test_kink_tol_overrides_default_margin():
    # with a huge margin no point of a dense relu input can be accepted
    with pytest.raises(RuntimeError, match="kink"):
        grad_check(lambda x: relu(x), lambda r: {"x": r.standard_normal((1, 1, 4, 4))},
                   instances=1, max_resamples=5, kink_tol=10.0)
