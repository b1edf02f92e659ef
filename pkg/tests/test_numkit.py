import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cmsf import numkit
from cmsf.numkit import (BatchNormState, NumericError, SgdOptimizer, ShapeError,
                         Tape, Tensor)

from conftest import central_diff_grad, max_rel_error

GRAD_TOL = 1e-4
FD_STEP = 1e-5


def test_matmul_identity():
    m = np.arange(12, dtype=float).reshape(3, 4)
    out = numkit.matmul(np.eye(3), m)
    assert np.array_equal(out.value, m)


def test_matmul_direct():
    out = numkit.matmul([[1, 2], [3, 4]], [[0], [1]])
    assert np.array_equal(out.value, [[2], [4]])


def test_matmul_shape_error_names_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\) x \(2, 2\)"):
        numkit.matmul(np.zeros((2, 3)), np.zeros((2, 2)))


def test_matmul_gradient_matches_finite_differences(rng):
    a = Tensor(rng.standard_normal((5, 7)))
    b = rng.standard_normal((7, 3))

    def loss():
        return numkit.sum_all(numkit.matmul(a, b)).value[0, 0]

    tape = Tape()
    tape.backward(numkit.sum_all(numkit.matmul(a, b, tape), tape))
    fd = central_diff_grad(loss, a.value, FD_STEP)
    assert max_rel_error(a.grad, fd) < GRAD_TOL
    # analytic form: gradient of sum(a@b) wrt a is ones @ b.T
    assert np.allclose(a.grad, np.ones((5, 3)) @ b.T)


def test_relu_definition():
    out = numkit.relu([[-1.0, 0.0, 2.0]])
    assert np.array_equal(out.value, [[0.0, 0.0, 2.0]])


def test_relu_and_bias_gradients(rng):
    x = Tensor(rng.standard_normal((4, 6)) + 0.1)
    b = Tensor(rng.standard_normal((1, 6)))

    def forward(tape=None):
        return numkit.sum_all(numkit.relu(numkit.add_bias(x, b, tape), tape), tape)

    tape = Tape()
    tape.backward(forward(tape))
    for p in (x, b):
        fd = central_diff_grad(lambda: forward().value[0, 0], p.value, FD_STEP)
        assert max_rel_error(p.grad, fd) < GRAD_TOL


def test_batch_norm_normalizes_columns(rng):
    state = BatchNormState(5)
    x = rng.standard_normal((32, 5)) * 3.0 + 1.0
    out = numkit.batch_norm_1d(x, state, training=True)
    assert np.allclose(out.value.mean(axis=0), 0.0, atol=1e-12)
    assert np.allclose(out.value.var(axis=0), 1.0, atol=1e-4)


def test_batch_norm_batch_of_one_rejected():
    with pytest.raises(ShapeError, match="batch size"):
        numkit.batch_norm_1d(np.ones((1, 3)), BatchNormState(3), training=True)


def test_batch_norm_running_stats_used_in_eval(rng):
    state = BatchNormState(3)
    for _ in range(50):
        numkit.batch_norm_1d(rng.standard_normal((16, 3)) * 2 + 5, state, True)
    out = numkit.batch_norm_1d(np.full((4, 3), 5.0), state, training=False)
    assert np.all(np.abs(out.value) < 1.0)  # close to the running mean


@pytest.mark.parametrize("training", [True, False])
def test_batch_norm_gradient_matches_finite_differences(rng, training):
    state = BatchNormState(4)
    state.gamma.value[...] = rng.uniform(0.5, 1.5, (1, 4))
    state.beta.value[...] = rng.standard_normal((1, 4))
    state.running_mean[...] = rng.standard_normal((1, 4))
    state.running_var[...] = rng.uniform(0.5, 2.0, (1, 4))
    x = Tensor(rng.standard_normal((6, 4)))
    frozen = (state.running_mean.copy(), state.running_var.copy())

    def forward(tape=None):
        state.running_mean[...] = frozen[0]
        state.running_var[...] = frozen[1]
        y = numkit.batch_norm_1d(x, state, training, tape)
        return numkit.mean_rowwise_dot(y, weights, tape)

    weights = rng.standard_normal((6, 4))
    tape = Tape()
    tape.backward(forward(tape))
    for p in (x, state.gamma, state.beta):
        fd = central_diff_grad(lambda: forward().value[0, 0], p.value, FD_STEP)
        assert max_rel_error(p.grad, fd) < GRAD_TOL


def test_l2_normalize_direct():
    out = numkit.l2_row_normalize([[3.0, 4.0]])
    assert np.allclose(out.value, [[0.6, 0.8]])


def test_l2_normalize_unit_row_unchanged():
    row = np.array([[1.0, 0.0, 0.0]])
    assert np.allclose(numkit.l2_row_normalize(row).value, row)


def test_l2_normalize_degenerate_row_names_index():
    x = np.array([[1.0, 0.0], [0.0, 0.0]])
    with pytest.raises(NumericError, match="row 1"):
        numkit.l2_row_normalize(x)


def test_l2_normalize_gradient_matches_finite_differences(rng):
    x = Tensor(rng.standard_normal((3, 5)))
    weights = rng.standard_normal((3, 5))

    def forward(tape=None):
        return numkit.mean_rowwise_dot(
            numkit.l2_row_normalize(x, tape=tape), weights, tape)

    tape = Tape()
    tape.backward(forward(tape))
    fd = central_diff_grad(lambda: forward().value[0, 0], x.value, FD_STEP)
    assert max_rel_error(x.grad, fd) < GRAD_TOL


@settings(max_examples=30, deadline=None)
@given(st.lists(st.lists(st.floats(-10, 10), min_size=3, max_size=3),
                min_size=1, max_size=5))
def test_l2_normalize_idempotent(rows):
    x = np.array(rows)
    if np.any(np.linalg.norm(x, axis=1) < 1e-6):
        return
    once = numkit.l2_row_normalize(x).value
    twice = numkit.l2_row_normalize(once).value
    assert np.max(np.abs(once - twice)) < 1e-12


def test_backward_requires_scalar_loss():
    t = Tape()
    out = numkit.matmul(Tensor(np.ones((2, 2))), np.ones((2, 2)), t)
    with pytest.raises(ShapeError, match="scalar"):
        t.backward(out)


def test_backward_sum_gives_ones():
    theta = Tensor(np.arange(6, dtype=float).reshape(2, 3))
    tape = Tape()
    tape.backward(numkit.sum_all(theta, tape))
    assert np.array_equal(theta.grad, np.ones((2, 3)))


def test_backward_half_squared_norm_gives_theta(rng):
    theta = Tensor(rng.standard_normal((3, 4)))
    tape = Tape()
    loss = numkit.scale(numkit.sum_all(numkit.mul(theta, theta, tape), tape),
                        0.5, tape)
    tape.backward(loss)
    assert np.allclose(theta.grad, theta.value)


def test_unreachable_parameter_gets_zero_gradient(rng):
    used = Tensor(rng.standard_normal((2, 2)))
    unused = Tensor(rng.standard_normal((2, 2)))
    tape = Tape()
    tape.backward(numkit.sum_all(used, tape))
    assert np.array_equal(unused.grad, np.zeros((2, 2)))


def test_backward_deterministic(rng):
    x0 = rng.standard_normal((4, 4))

    def run():
        x = Tensor(x0.copy())
        tape = Tape()
        y = numkit.relu(numkit.matmul(x, x0.T, tape), tape)
        tape.backward(numkit.sum_all(y, tape))
        return x.grad.copy()

    a, b = run(), run()
    assert np.array_equal(a, b)


def test_fused_loss_gradients_match_finite_differences(rng):
    x = Tensor(rng.standard_normal((1, 8)))
    idx = [1, 4, 6]

    def forward(tape=None):
        lse = numkit.logsumexp_all(x, tape)
        return numkit.sub(lse, numkit.mean_select(x, idx, tape), tape)

    tape = Tape()
    tape.backward(forward(tape))
    fd = central_diff_grad(lambda: forward().value[0, 0], x.value, FD_STEP)
    assert max_rel_error(x.grad, fd) < GRAD_TOL


def test_cross_entropy_gradient_matches_finite_differences(rng):
    logits = Tensor(rng.standard_normal((5, 4)))
    labels = np.array([0, 1, 2, 3, 1])

    def forward(tape=None):
        return numkit.cross_entropy_mean(logits, labels, tape)

    tape = Tape()
    tape.backward(forward(tape))
    fd = central_diff_grad(lambda: forward().value[0, 0], logits.value, FD_STEP)
    assert max_rel_error(logits.grad, fd) < GRAD_TOL


def test_cross_entropy_label_out_of_range():
    with pytest.raises(ValueError, match="out of range"):
        numkit.cross_entropy_mean(np.zeros((2, 3)), [0, 3])


# -- optimizer and schedule --------------------------------------------------


def test_sgd_plain_step():
    p = Tensor(np.array([[1.0, 2.0]]))
    opt = SgdOptimizer([p], lr0=0.1, momentum=0.0, weight_decay=0.0)
    p.grad[...] = np.array([[1.0, -1.0]])
    opt.step()
    assert np.allclose(p.value, [[0.9, 2.1]])


def test_sgd_zero_grad_zero_velocity_keeps_param():
    p = Tensor(np.array([[3.0]]))
    opt = SgdOptimizer([p], lr0=0.1, momentum=0.9, weight_decay=0.0)
    opt.step()
    assert p.value[0, 0] == 3.0


def test_sgd_momentum_matches_hand_unrolled_recurrence():
    p = Tensor(np.array([[1.0]]))
    opt = SgdOptimizer([p], lr0=0.1, momentum=0.9, weight_decay=1e-4)
    grads = [0.5, -0.2]
    ref_p, ref_v = 1.0, 0.0
    for g in grads:
        p.zero_grad()
        p.grad[0, 0] = g
        opt.step()
        ref_v = 0.9 * ref_v + (g + 1e-4 * ref_p)
        ref_p = ref_p - 0.1 * ref_v
        assert p.value[0, 0] == pytest.approx(ref_p, rel=1e-15)


def test_cosine_lr_endpoints():
    assert numkit.cosine_lr(0, 100, 0.05) == pytest.approx(0.05)
    assert numkit.cosine_lr(100, 100, 0.05) == pytest.approx(0.0, abs=1e-18)
    assert numkit.cosine_lr(50, 100, 0.05) == pytest.approx(0.025)


def test_cosine_lr_step_beyond_total_rejected():
    with pytest.raises(ValueError):
        numkit.cosine_lr(101, 100, 0.05)


def test_no_nan_propagation():
    with pytest.raises(NumericError):
        numkit.matmul(np.array([[1e308]]), np.array([[1e308]]))
