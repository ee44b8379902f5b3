"""
Tests for the masked in-betweening network, its losses and the linear baseline.
"""

import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from sparsemotion import tensorcore as tc  # noqa: E402
from sparsemotion.config import InterpConfig  # noqa: E402
from sparsemotion.errors import ValidationError  # noqa: E402
from sparsemotion.gradcheck import finite_diff_check  # noqa: E402
from sparsemotion.interpnet import (  # noqa: E402
    PART_TABLE_SIZE,
    InterpBatch,
    InterpNet,
    gradcheck_case,
    interpolate,
    interpolate_linear,
    linear_interp_baseline,
    loss_ce,
    loss_interp,
    loss_smooth,
    make_batch,
    predict_masked,
)
from sparsemotion.keyframe import MOTION_BASE, MOTION_MASK, FrameType, mask_sequence, schedule  # noqa: E402
from sparsemotion.tensorcore import Parameter  # noqa: E402

pytestmark = pytest.mark.usefixtures("float64")


def _dense(T, seed=0):
    return np.random.default_rng(seed).integers(0, MOTION_BASE, size=(4, T))


def test_make_batch_pads_to_common_length():
    batch, seqs = make_batch([_dense(7), _dense(4, seed=1)], s=3)
    assert batch.tokens.shape == (2, 4, 7)
    assert batch.frame_type.shape == (2, 7)
    assert (batch.frame_type[1, 4:] == FrameType.PAD).all()
    assert batch.valid[1].sum() == 4
    # T=7, s=3: anchors 0, 3 and t_last 6
    assert batch.masked[0].tolist() == [False, True, True, False, True, True, False]
    assert len(seqs) == 2


def test_forward_shape(tiny_interp):
    net = InterpNet(tiny_interp, seed=0)
    batch, _ = make_batch([_dense(9), _dense(6, seed=2)], s=3)
    logits = net.forward_batch(batch)
    assert logits.shape == (2, 4, 9, MOTION_BASE)
    assert len(net.part_tables()) == 4
    assert net.part_table(0).shape[0] == PART_TABLE_SIZE


def test_pad_frames_do_not_leak_into_valid_frames(tiny_interp):
    net = InterpNet(tiny_interp, seed=0)
    net.eval()
    batch, _ = make_batch([_dense(5)], s=2, length=8)
    other = np.array(batch.tokens)
    other[:, :, 5:] = np.random.default_rng(9).integers(0, MOTION_BASE, size=(1, 4, 3))
    a = net(batch.tokens, batch.frame_type).data
    b = net(other, batch.frame_type).data
    np.testing.assert_allclose(a[:, :, :5], b[:, :, :5], atol=1e-12)


def test_tied_parts_are_permutation_equivariant():
    cfg = InterpConfig(d_model=16, n_temporal_layers=1, n_part_layers=1, n_heads=2, d_ffn=32, max_offset=8, tie_parts=True)
    net = InterpNet(cfg, seed=1)
    assert net.tables[0] is net.tables[3]
    batch, _ = make_batch([_dense(6)], s=2)
    perm = [2, 0, 3, 1]
    base = net(batch.tokens, batch.frame_type).data
    permuted = net(batch.tokens[:, perm], batch.frame_type, part_ids=perm).data
    np.testing.assert_allclose(permuted, base[:, perm], atol=1e-9)


def test_predict_masked_matches_bruteforce_argmax():
    rng = np.random.default_rng(5)
    masked = mask_sequence(_dense(7), schedule(7, 3))
    logits = rng.normal(size=(4, 7, MOTION_BASE))
    positions, ids = predict_masked(logits, masked)
    assert positions.tolist() == [1, 2, 4, 5]
    for p in range(4):
        for j, t in enumerate(positions):
            assert ids[p, j] == max(range(MOTION_BASE), key=lambda v: logits[p, t, v])


def test_loss_ce_sums_over_masked_frames_only():
    rng = np.random.default_rng(6)
    dense = _dense(3)
    batch, _ = make_batch([dense], s=2)
    raw = rng.normal(size=(1, 4, 3, MOTION_BASE))
    eps = 0.1
    term = loss_ce(tc.Tensor(raw), batch, label_smoothing=eps)

    expected = 0.0
    for p in range(4):
        row = raw[0, p, 1]  # only frame 1 is masked for T=3, s=2
        logp = row - row.max() - np.log(np.exp(row - row.max()).sum())
        q = np.full(MOTION_BASE, eps / (MOTION_BASE - 1))
        q[dense[p, 1]] = 1.0 - eps
        expected += -(q * logp).sum()
    assert term.count == 4
    assert term.item() == pytest.approx(expected, rel=1e-10)


def _onehot_logits(ids):
    logits = np.zeros(ids.shape + (MOTION_BASE,))
    np.put_along_axis(logits, ids[..., None], 1.0, axis=-1)
    return logits


def test_smoothness_terms_skip_pairs_touching_pad():
    rng = np.random.default_rng(7)
    frame_type = np.array([[0, 1, 1, 2, 1, 0]])
    ids = rng.integers(0, MOTION_BASE, size=(1, 4, 6))
    batch = InterpBatch(tokens=ids, frame_type=frame_type, targets=ids)
    tables = [tc.Tensor(rng.normal(size=(PART_TABLE_SIZE, 3))) for _ in range(4)]
    vel, acc = loss_smooth(_onehot_logits(ids), batch, tables)

    exp_vel, exp_acc = [], []
    for p in range(4):
        e = tables[p].data[ids[0, p]]
        exp_vel.append(np.mean([((e[t + 1] - e[t]) ** 2).mean() for t in (0, 1, 4)]))
        exp_acc.append(((e[2] - 2 * e[1] + e[0]) ** 2).mean())
    assert vel.count == 3
    assert acc.count == 1
    assert vel.item() == pytest.approx(np.mean(exp_vel), rel=1e-10)
    assert acc.item() == pytest.approx(np.mean(exp_acc), rel=1e-10)


def test_smoothness_gradient_reaches_tables_not_logits():
    rng = np.random.default_rng(8)
    ids = rng.integers(0, MOTION_BASE, size=(1, 4, 5))
    batch = InterpBatch(tokens=ids, frame_type=np.zeros((1, 5), dtype=np.int64), targets=ids)
    logits = Parameter(_onehot_logits(ids))
    tables = [Parameter(rng.normal(size=(PART_TABLE_SIZE, 3))) for _ in range(4)]
    vel, acc = loss_smooth(logits, batch, tables)
    (vel.value + acc.value).backward()
    assert logits.grad is None or not np.any(logits.grad)
    assert all(t.grad is not None and np.any(t.grad) for t in tables)


def test_smoothness_empty_when_no_valid_pairs():
    ids = np.zeros((1, 4, 1), dtype=np.int64)
    batch = InterpBatch(tokens=ids, frame_type=np.zeros((1, 1), dtype=np.int64), targets=ids)
    tables = [tc.Tensor(np.ones((PART_TABLE_SIZE, 2))) for _ in range(4)]
    vel, acc = loss_smooth(_onehot_logits(ids), batch, tables)
    assert vel.empty and acc.empty
    assert vel.item() == 0.0


def test_loss_interp_combines_terms(tiny_interp):
    net = InterpNet(tiny_interp, seed=3)
    batch, _ = make_batch([_dense(8)], s=3)
    out = loss_interp(net, batch)
    cfg = net.config
    expected = out.ce.item() + cfg.lambda_v * out.vel.item() + cfg.lambda_a * out.acc.item()
    assert out.total.item() == pytest.approx(expected, rel=1e-10)


def _line_tables():
    # Row i sits at coordinate i on a line, so blends snap to the nearest integer id.
    table = np.zeros((PART_TABLE_SIZE, 2))
    table[:, 0] = np.arange(PART_TABLE_SIZE)
    return [table] * 4


def test_linear_baseline_blends_flanking_anchors():
    dense = np.zeros((4, 7), dtype=np.int64)
    dense[:, 0] = 10
    dense[:, 6] = 70
    masked = mask_sequence(dense, schedule(7, 6))
    positions, ids = linear_interp_baseline(masked, _line_tables())
    assert positions.tolist() == [1, 2, 3, 4, 5]
    assert ids[0].tolist() == [20, 30, 40, 50, 60]


def test_linear_baseline_matches_bruteforce_nearest():
    rng = np.random.default_rng(10)
    tables = [rng.normal(size=(PART_TABLE_SIZE, 4)) for _ in range(4)]
    dense = _dense(9, seed=11)
    masked = mask_sequence(dense, schedule(9, 4))
    positions, ids = linear_interp_baseline(masked, tables)
    for p in range(4):
        for j, t in enumerate(positions):
            a, b = (0, 4) if t < 4 else (4, 8)
            alpha = (t - a) / (b - a)
            target = (1 - alpha) * tables[p][dense[p, a]] + alpha * tables[p][dense[p, b]]
            dists = [np.sum((tables[p][v] - target) ** 2) for v in range(MOTION_BASE)]
            assert ids[p, j] == int(np.argmin(dists))


def test_interpolate_keeps_anchors_and_fills_masks(tiny_interp):
    net = InterpNet(tiny_interp, seed=4)
    dense = _dense(13, seed=12)
    sched = schedule(13, 4)
    out = interpolate(net, dense, sched)
    assert out.shape == (4, 13)
    np.testing.assert_array_equal(out[:, sched.fixed], dense[:, sched.fixed])
    assert not (out == MOTION_MASK).any()
    assert out.max() < MOTION_BASE

    linear = interpolate_linear(_line_tables(), dense, sched)
    np.testing.assert_array_equal(linear[:, sched.fixed], dense[:, sched.fixed])


def test_interpolate_stride_one_is_identity(tiny_interp):
    net = InterpNet(tiny_interp, seed=4)
    dense = _dense(5, seed=13)
    np.testing.assert_array_equal(interpolate(net, dense, schedule(5, 1)), dense)


@pytest.mark.parametrize("kind", ["vel", "acc", "interp"])
def test_interp_losses_pass_gradcheck(kind):
    loss, params = gradcheck_case(kind)
    report = finite_diff_check(loss, params, max_checks_per_param=8)
    assert report.passed, report.worst()


def test_gradcheck_case_rejects_unknown_kind():
    with pytest.raises(ValidationError):
        gradcheck_case("jerk")
