"""Tests for the module system and attention blocks."""

import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from sparsemotion import tensorcore as tc  # noqa: E402
from sparsemotion.errors import CheckpointError, ValidationError  # noqa: E402
from sparsemotion.layers import (  # noqa: E402
    FeedForward,
    LayerNorm,
    Linear,
    Module,
    MultiHeadAttention,
)


class Pair(Module):
    def __init__(self, rng):
        self.blocks = [Linear(3, 3, rng), Linear(3, 2, rng, bias=False)]
        self.norm = LayerNorm(2)

    def forward(self, x):
        return self.norm(self.blocks[1](self.blocks[0](x)))


@pytest.fixture(autouse=True)
def float64():
    with tc.default_dtype(np.float64):
        yield


def test_named_parameters_use_dotted_paths():
    names = [n for n, _ in Pair(np.random.default_rng(0)).named_parameters()]
    assert names == [
        "blocks.0.weight",
        "blocks.0.bias",
        "blocks.1.weight",
        "norm.gamma",
        "norm.beta",
    ]


def test_shared_parameter_listed_once():
    rng = np.random.default_rng(0)
    m = Pair(rng)
    m.blocks[1] = m.blocks[0]
    assert len(m.parameters()) == 4


def test_train_eval_flag_reaches_children():
    m = Pair(np.random.default_rng(0))
    m.eval()
    assert not any(child.training for child in m.modules())
    m.train()
    assert all(child.training for child in m.modules())


def test_load_state_dict_reports_missing_and_unexpected_keys():
    m = Pair(np.random.default_rng(0))
    state = m.state_dict()
    state.pop("norm.beta")
    state["extra"] = np.zeros(1)
    with pytest.raises(CheckpointError) as exc:
        m.load_state_dict(state)
    assert exc.value.differing_keys == ["extra", "norm.beta"]


def test_load_state_dict_rejects_shape_mismatch():
    m = Pair(np.random.default_rng(0))
    state = m.state_dict()
    state["norm.gamma"] = np.ones(5)
    with pytest.raises(CheckpointError):
        m.load_state_dict(state)


def test_state_dict_round_trip_copies_values():
    a = Pair(np.random.default_rng(0))
    b = Pair(np.random.default_rng(1))
    b.load_state_dict(a.state_dict())
    x = tc.Tensor(np.random.default_rng(2).normal(size=(4, 3)))
    np.testing.assert_allclose(a(x).data, b(x).data)


def test_feed_forward_keeps_shape():
    ffn = FeedForward(4, 8, np.random.default_rng(0))
    out = ffn(tc.Tensor(np.ones((2, 3, 4))))
    assert out.shape == (2, 3, 4)


def test_attention_heads_must_divide_width():
    with pytest.raises(ValidationError):
        MultiHeadAttention(6, 4, np.random.default_rng(0))


def _attention(max_offset=None):
    attn = MultiHeadAttention(8, 2, np.random.default_rng(3), max_offset=max_offset)
    attn.capture_weights = True
    return attn


def test_masked_keys_get_zero_weight():
    attn = _attention()
    x = tc.Tensor(np.random.default_rng(4).normal(size=(1, 4, 8)))
    key_mask = np.array([[True, False, True, False]])
    attn(x, attn.project_kv(x), key_mask=key_mask)
    w = attn.last_weights
    assert w.shape == (1, 2, 4, 4)
    assert np.all(w[..., 1] == 0.0) and np.all(w[..., 3] == 0.0)
    np.testing.assert_allclose(w.sum(axis=-1), 1.0)


def test_causal_rule_hides_future_keys():
    attn = _attention()
    x = tc.Tensor(np.random.default_rng(5).normal(size=(2, 5, 8)))
    attn(x, attn.project_kv(x), causal=True)
    w = attn.last_weights
    future = np.triu(np.ones((5, 5), dtype=bool), k=1)
    assert np.all(w[:, :, future] == 0.0)


def test_relative_bias_clips_far_offsets_to_one_parameter():
    attn = _attention(max_offset=1)
    attn.rel_bias.data[:] = 0.0
    attn.rel_bias.data[2] = 5.0  # offset >= +1
    x = tc.Tensor(np.zeros((1, 4, 8)))
    q = tc.Tensor(np.zeros((1, 1, 8)))
    attn(q, attn.project_kv(x), q_pos=np.array([0]), k_pos=np.arange(4))
    w = attn.last_weights[0, 0, 0]
    # keys 1, 2 and 3 all sit at a clipped offset of +1
    assert w[1] == pytest.approx(w[2])
    assert w[2] == pytest.approx(w[3])
    assert w[1] > w[0]


def test_incremental_keys_match_full_projection():
    attn = _attention(max_offset=2)
    x = tc.Tensor(np.random.default_rng(6).normal(size=(1, 3, 8)))
    full = attn.project_kv(x)
    parts = attn.project_kv(tc.take(x, (slice(None), slice(0, 2))))
    parts = parts.append(attn.project_kv(tc.take(x, (slice(None), slice(2, 3)))))
    q = tc.take(x, (slice(None), slice(2, 3)))
    a = attn(q, full, q_pos=np.array([2]), k_pos=np.arange(3)).data
    b = attn(q, parts, q_pos=np.array([2]), k_pos=np.arange(3)).data
    np.testing.assert_allclose(a, b, atol=1e-12)
