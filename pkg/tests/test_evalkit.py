"""
Tests for token-space evaluation: masked accuracy, perplexity, diversity.
"""

import math
import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from sparsemotion.backbone import build_model  # noqa: E402
from sparsemotion.config import RunConfig  # noqa: E402
from sparsemotion.errors import ValidationError  # noqa: E402
from sparsemotion.evalkit import (  # noqa: E402
    BANNER,
    EvalReport,
    InterpEval,
    chance_band,
    eval_diversity,
    eval_interpolation,
    eval_perplexity,
    l1_diversity,
    split_windows,
    step_counts,
)
from sparsemotion.interpnet import PART_TABLE_SIZE, InterpNet  # noqa: E402
from sparsemotion.tokenstream import PARTS, synth_sample  # noqa: E402
from sparsemotion.trainer import FAMILIES  # noqa: E402


def _samples(n=3, motion_len=30):
    return [synth_sample(1, i, motion_len) for i in range(n)]


def _tables(seed=0):
    rng = np.random.default_rng(seed)
    return [rng.normal(size=(PART_TABLE_SIZE, 4)) for _ in PARTS]


def _oracle(masked, dense):
    positions = masked.masked_positions
    return positions, dense[:, positions]


def test_split_windows_share_boundary_frames():
    dense = np.arange(40).reshape(4, 10)
    windows = split_windows(dense, 4)
    assert [w[0].tolist() for w in windows] == [[0, 1, 2, 3], [3, 4, 5, 6], [6, 7, 8, 9]]
    assert len(split_windows(dense, None)) == 1
    assert len(split_windows(dense, 20)) == 1
    with pytest.raises(ValidationError):
        split_windows(dense, 1)


def test_oracle_predictor_scores_perfectly():
    result = eval_interpolation(None, _samples(), s=6, window_len=13, predict=_oracle, tables=_tables())
    assert result.total > 0
    assert result.mean_accuracy == 1.0
    assert all(acc == 1.0 for acc in result.accuracy.values())
    assert result.linear_only == 0
    assert result.delta >= 0.0
    assert 0.0 <= result.p_value <= 1.0


def test_eval_interpolation_with_network(tiny_interp):
    net = InterpNet(tiny_interp, seed=0)
    result = eval_interpolation(net, _samples(2), s=3, window_len=10)
    assert result.stride == 3
    # 30 frames split into windows of 10 sharing boundaries: 0-9, 9-18, 18-27, 27-29
    assert result.total == 2 * (6 + 6 + 6 + 1)
    data = result.to_dict()
    assert set(data["accuracy"]) == set(PARTS)
    assert 0.0 <= data["mean_accuracy"] <= 1.0


def test_eval_interpolation_needs_a_predictor():
    with pytest.raises(ValidationError):
        eval_interpolation(None, _samples(1), s=6)


def test_p_value_from_discordant_tokens():
    counts = dict.fromkeys(PARTS, 0)
    won = InterpEval(6, counts, counts, total=10, net_only=10, linear_only=0)
    assert won.p_value == pytest.approx(0.5**10)
    tied = InterpEval(6, counts, counts, total=10, net_only=0, linear_only=0)
    assert tied.p_value == 1.0
    lost = InterpEval(6, counts, counts, total=10, net_only=0, linear_only=5)
    assert lost.p_value == pytest.approx(1.0)


def test_chance_band_brackets_uniform_guessing():
    lo, hi = chance_band(10_000)
    assert 0.0 <= lo < 1 / 256 < hi <= 1.0


def test_perplexity_per_family(tiny_backbone):
    model = build_model(tiny_backbone, seed=0)
    run = RunConfig(history_len=2, chunk_len=2, stride=3, window=4)
    model.train()
    ppl = eval_perplexity(model, _samples(2), run)
    assert set(ppl) == set(FAMILIES)
    assert all(math.isfinite(v) and v >= 1.0 for v in ppl.values())
    assert model.training


def test_l1_diversity():
    a = np.zeros((3, 2))
    b = np.ones((3, 2))
    c = np.full((3, 2), 3.0)
    # pair distances 2, 6, 4
    assert l1_diversity([a, b, c]) == pytest.approx(4.0)
    with pytest.raises(ValidationError):
        l1_diversity([a])


def test_diversity_over_seeds(tiny_backbone):
    model = build_model(tiny_backbone, seed=0)
    audio = synth_sample(0, 0, 36).audio
    value = eval_diversity(model, None, audio, n_seeds=2, P=1, N=2, s=6, temperature=1.0, interp_mode="linear")
    assert value >= 0.0
    with pytest.raises(ValidationError):
        eval_diversity(model, None, audio, n_seeds=1, P=1, N=2, s=6, interp_mode="linear")


def test_step_counts():
    assert step_counts(120, 6, 5) == {
        "frames": 120,
        "keyframes": 20,
        "decoder_steps": 20,
        "dense_decoder_steps": 120,
    }
    assert step_counts(121, 6, 5)["decoder_steps"] == 25


def test_eval_report_validates_ranges():
    with pytest.raises(ValidationError):
        EvalReport(masked_token_accuracy={"face": 1.2})
    with pytest.raises(ValidationError):
        EvalReport(perplexity={"a2m": 0.5})
    EvalReport(perplexity={"a2m": float("nan")})


def test_eval_report_build():
    counts = {p: 5 for p in PARTS}
    interp = InterpEval(6, counts, dict.fromkeys(PARTS, 2), total=10, net_only=3, linear_only=0)
    report = EvalReport.build(interp, {"a2m": 3.5}, 0.25, step_counts(120, 6, 5))
    data = report.to_dict()
    assert data["banner"] == BANNER
    assert data["masked_token_accuracy"]["face"] == 0.5
    assert data["vs_linear"]["delta"] == pytest.approx(0.3)
    assert data["vs_linear"]["masked_positions"] == 10
    assert data["l1_diversity"] == 0.25
