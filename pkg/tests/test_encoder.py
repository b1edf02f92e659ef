import numpy as np
import pytest

from cmsf import numkit
from cmsf.encoder import (EncoderPair, MLPSpec, load_checkpoint,
                          save_checkpoint)
from cmsf.numkit import Tape

from conftest import central_diff_grad, max_rel_error


def make_pair(dim=6, m=0.99, seed=0):
    return EncoderPair.create(dim, m, np.random.default_rng(seed))


def test_mlp_spec_rejects_activated_final_layer():
    with pytest.raises(ValueError, match="final layer"):
        MLPSpec([4, 8, 4], batch_norm=[True, False], relu=[True, True])


def test_forward_target_rows_are_unit(rng):
    pair = make_pair()
    u = pair.forward_target(rng.standard_normal((8, 6)))
    assert np.allclose(np.linalg.norm(u, axis=1), 1.0, atol=1e-9)


def test_forward_online_rows_are_unit(rng):
    pair = make_pair()
    v = pair.forward_online(rng.standard_normal((8, 6)), Tape())
    assert np.allclose(np.linalg.norm(v.value, axis=1), 1.0, atol=1e-9)


def test_target_equals_online_trunk_at_init(rng):
    pair = make_pair()
    x = rng.standard_normal((5, 6))
    u = pair.forward_target(x)
    # same trunk weights, same eval-mode batch norm
    g = pair.online.forward(x, tape=None, training=False)
    expected = numkit.l2_row_normalize(g).value
    assert np.array_equal(u, expected)


def test_forward_target_deterministic(rng):
    x = rng.standard_normal((4, 6))
    a = make_pair(seed=7).forward_target(x)
    b = make_pair(seed=7).forward_target(x)
    assert np.array_equal(a, b)


def test_forward_target_mutates_nothing(rng):
    pair = make_pair()
    before = [a.copy() for a in pair.target.arrays() + pair.online.arrays()]
    pair.forward_target(rng.standard_normal((4, 6)))
    after = pair.target.arrays() + pair.online.arrays()
    for b, a in zip(before, after):
        assert np.array_equal(b, a)


def test_no_gradient_reaches_target(rng):
    pair = make_pair()
    tape = Tape()
    v = pair.forward_online(rng.standard_normal((4, 6)), tape)
    loss = numkit.mean_all(v, tape)
    tape.backward(loss)
    for p in pair.target.parameters():
        assert np.array_equal(p.grad, np.zeros_like(p.value))


def test_online_gradient_matches_finite_differences(rng):
    pair = make_pair(dim=4)
    x = rng.standard_normal((4, 4))
    weights = rng.standard_normal((4, 4))
    params = pair.trainable_parameters()
    # freeze batch-norm running stats so the forward is a pure function
    snapshots = [(m.bn[i].running_mean.copy(), m.bn[i].running_var.copy())
                 for m in (pair.online, pair.predictor)
                 for i in range(len(m.bn)) if m.bn[i] is not None]

    def restore():
        j = 0
        for m in (pair.online, pair.predictor):
            for i in range(len(m.bn)):
                if m.bn[i] is not None:
                    m.bn[i].running_mean[...] = snapshots[j][0]
                    m.bn[i].running_var[...] = snapshots[j][1]
                    j += 1

    def forward(tape=None):
        restore()
        v = pair.forward_online(x, tape if tape is not None else Tape(), training=True)
        return numkit.mean_rowwise_dot(v, weights, tape)

    tape = Tape()
    tape.backward(forward(tape))
    check = np.random.default_rng(0).choice(len(params), 3, replace=False)
    for pi in check:
        p = params[pi]
        fd = central_diff_grad(lambda: forward().value[0, 0], p.value)
        assert max_rel_error(p.grad, fd) < 1e-4


@pytest.mark.parametrize("m,expected", [(1.0, 2.0), (0.0, 4.0), (0.5, 3.0)])
def test_momentum_update_arithmetic(m, expected):
    pair = make_pair(m=m)
    for arr in pair.target.arrays():
        arr[...] = 2.0
    for arr in pair.online.arrays():
        arr[...] = 4.0
    pair.momentum_update()
    for arr in pair.target.arrays():
        assert np.allclose(arr, expected)


def test_momentum_geometric_contraction(rng):
    pair = make_pair(m=0.9)
    for arr in pair.target.arrays():
        arr += rng.standard_normal(arr.shape)
    d0 = sum(float(np.sum((t - o) ** 2))
             for t, o in zip(pair.target.arrays(), pair.online.arrays())) ** 0.5
    for s in range(1, 6):
        pair.momentum_update()
        d = sum(float(np.sum((t - o) ** 2))
                for t, o in zip(pair.target.arrays(), pair.online.arrays())) ** 0.5
        assert d == pytest.approx(0.9 ** s * d0, rel=1e-9)


def test_predictor_only_on_online_path(rng):
    pair = make_pair()
    # corrupting the predictor must not change the target path
    x = rng.standard_normal((3, 6))
    u_before = pair.forward_target(x)
    for p in pair.predictor.parameters():
        p.value += 100.0
    assert np.array_equal(u_before, pair.forward_target(x))
    v = pair.forward_online(x, Tape())
    assert not np.allclose(v.value, u_before)


def test_checkpoint_roundtrip(tmp_path, rng):
    pair = make_pair(seed=3)
    x = rng.standard_normal((4, 6))
    pair.forward_online(x, Tape(), training=True)  # move running stats
    path = tmp_path / "enc.ckpt"
    save_checkpoint(pair, path)
    loaded = load_checkpoint(path)
    assert loaded.momentum_m == pair.momentum_m
    for a, b in zip(pair.online.arrays() + pair.predictor.arrays()
                    + pair.target.arrays(),
                    loaded.online.arrays() + loaded.predictor.arrays()
                    + loaded.target.arrays()):
        assert np.array_equal(a, b)
    assert np.array_equal(pair.forward_target(x), loaded.forward_target(x))


def test_checkpoint_rejects_garbage(tmp_path):
    p = tmp_path / "bad.ckpt"
    p.write_bytes(b"\x10\x00\x00\x00" + b'{"magic": "nope"}' + b"\n")
    with pytest.raises(ValueError):
        load_checkpoint(p)
