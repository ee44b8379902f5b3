"""
Tests for the task mixture, training templates, stage losses and stage loops.
"""

import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from sparsemotion import tensorcore as tc  # noqa: E402
from sparsemotion.backbone import VocabLayout, build_model  # noqa: E402
from sparsemotion.config import RunConfig, Settings  # noqa: E402
from sparsemotion.errors import CheckpointError, ValidationError  # noqa: E402
from sparsemotion.keyframe import MOTION_PAD  # noqa: E402
from sparsemotion.metrics_store import MetricsStore, read_jsonl  # noqa: E402
from sparsemotion.tokenstream import synth_sample  # noqa: E402
from sparsemotion.trainer import (  # noqa: E402
    CHECKPOINT_DIR,
    build_pools,
    build_template,
    load_backbone,
    make_step_batch,
    run_stage,
    sample_task,
    stage_loss,
    task_probabilities,
)

LAYOUT = VocabLayout.default()


def _run(**kw):
    base = dict(history_len=2, chunk_len=2, stride=3, window=4, batch=2, prefetch=0, log_every=1)
    base.update(kw)
    return RunConfig(**base)


def _samples(n=4, motion_len=30):
    return [synth_sample(0, i, motion_len) for i in range(n)]


def test_task_probabilities_uniform_at_tau_zero():
    probs = task_probabilities({"a": 100, "b": 1}, 0.0)
    assert probs == pytest.approx({"a": 0.5, "b": 0.5})


def test_task_probabilities_proportional_at_tau_one():
    probs = task_probabilities({"a": 100, "b": 1}, 1.0)
    assert probs["a"] == pytest.approx(100 / 101)
    assert probs["b"] == pytest.approx(1 / 101)


@pytest.mark.parametrize("sizes,tau", [({"a": 3}, 1.5), ({"a": 3, "b": 0}, 0.5), ({}, 0.5)])
def test_task_probabilities_rejects_bad_input(sizes, tau):
    with pytest.raises(ValidationError):
        task_probabilities(sizes, tau)


@pytest.mark.parametrize("tau", [0.0, 0.5, 1.0])
def test_sample_task_follows_mixture(tau):
    pools = {"big": np.arange(100), "small": np.array([7])}
    rng = np.random.default_rng(0)
    n = 100_000
    draws = [sample_task(pools, tau, rng) for _ in range(n)]
    small = [index for family, index in draws if family == "small"]
    p = task_probabilities({"big": 100, "small": 1}, tau)["small"]
    assert abs(len(small) - n * p) < 3 * np.sqrt(n * p * (1 - p))
    assert set(small) == {7}


def test_build_pools_sizes_and_determinism():
    pools = build_pools(20, {"a2m": 0.25}, ("a2m", "t2m"), seed=3)
    assert len(pools["a2m"]) == 5
    assert len(pools["t2m"]) == 20
    assert np.all(np.diff(pools["a2m"]) > 0)
    again = build_pools(20, {"a2m": 0.25}, ("a2m", "t2m"), seed=3)
    np.testing.assert_array_equal(pools["a2m"], again["a2m"])
    with pytest.raises(ValidationError):
        build_pools(0, {}, ("a2m",), seed=0)


def test_keyframe_template_left_pads_history():
    sample = _samples(1)[0]
    template = build_template(sample, "kf_motion", "pretrain", _run(), LAYOUT, 256)
    assert template.target == "motion"
    assert template.y.shape == (6, 4)
    assert template.y_valid.tolist() == [False, False, True, True, True, True]
    assert template.supervised.tolist() == [False, False, True, True, True, True]
    assert (template.y[:2] == MOTION_PAD).all()
    # targets are every third frame of the dense stream
    np.testing.assert_array_equal(template.y[2:].T, sample.motion_array()[:, 0:12:3])


def test_s2_template_truncates_history():
    sample = _samples(1)[0]
    run = _run(stage="s2")
    template = build_template(sample, "a2m", "s2", run, LAYOUT, 256, start=3, history_keep=1)
    assert template.y.shape == (4, 4)
    assert template.y_valid.tolist() == [False, True, True, True]
    assert template.supervised.tolist() == [False, False, True, True]
    assert template.y[0, 0] == MOTION_PAD
    with pytest.raises(ValidationError):
        build_template(sample, "a2m", "s2", run, LAYOUT, 256, start=3, history_keep=2)


def test_speech_text_templates():
    sample = _samples(1)[0]
    a2t = build_template(sample, "a2t", "pretrain", _run(), LAYOUT, 256)
    assert a2t.target == "text"
    np.testing.assert_array_equal(a2t.y, sample.transcript)
    assert a2t.supervised.all()
    t2a = build_template(sample, "t2a", "pretrain", _run(), LAYOUT, 256)
    assert t2a.target == "audio"
    np.testing.assert_array_equal(t2a.y, sample.audio.tokens)
    assert "text" in t2a.packed.spans


def test_unknown_family_and_bad_start():
    sample = _samples(1)[0]
    with pytest.raises(ValidationError):
        build_template(sample, "m2a", "pretrain", _run(), LAYOUT, 256)
    with pytest.raises(ValidationError):
        build_template(sample, "kf_motion", "pretrain", _run(), LAYOUT, 256, start=9)


def test_step_batch_depends_only_on_seed_and_step():
    samples = _samples()
    pools = build_pools(len(samples), {}, ("kf_motion", "a2t", "t2a"), seed=0)
    run = _run()
    a = make_step_batch(samples, pools, run, LAYOUT, 256, step=5)
    b = make_step_batch(samples, pools, run, LAYOUT, 256, step=5)
    assert [t.task_family for t in a] == [t.task_family for t in b]
    for x, y in zip(a, b, strict=True):
        np.testing.assert_array_equal(x.y, y.y)
        np.testing.assert_array_equal(x.packed.ids, y.packed.ids)


def test_dense_stage_loss_has_no_balance_term(tiny_backbone):
    model = build_model(tiny_backbone, seed=0)
    run = _run()
    sample = _samples(1)[0]
    templates = [build_template(sample, f, "pretrain", run, model.layout, 256) for f in ("kf_motion", "a2t")]
    loss = stage_loss(model, templates, run)
    assert loss.l_moe.empty
    assert loss.total.item() == loss.ce.item()
    assert loss.ce.count == 4 * 4 + sample.transcript.size
    assert loss.metrics()["l_moe"] is None


@pytest.mark.parametrize("lambda_moe", [0.0, 0.01])
def test_router_gradient_only_through_balance_term(tiny_backbone, lambda_moe):
    model = build_model(tiny_backbone, seed=0)
    model.upcycle(tiny_backbone.n_experts, tiny_backbone.top_k, seed=0, router_std=0.5)
    run = _run(stage="s1", lambda_moe=lambda_moe)
    sample = _samples(1)[0]
    templates = [build_template(sample, "a2m", "s1", run, model.layout, 256)]
    loss = stage_loss(model, templates, run)
    assert not loss.l_moe.empty
    tc.backward(loss.total)
    router_grads = [layer.router.grad for layer in model.moe_layers()]
    touched = any(g is not None and np.any(g) for g in router_grads)
    assert touched == (lambda_moe > 0)


def test_run_stage_prefetch_matches_sync(tiny_backbone, tmp_path):
    samples = _samples()
    results = []
    for depth in (0, 2):
        settings = Settings(run=_run(steps=2, prefetch=depth), backbone=tiny_backbone)
        results.append(run_stage(settings, samples, tmp_path / f"p{depth}"))
    sync, prefetched = results
    assert [h["step"] for h in sync.history] == [1, 2]
    assert [h["ce"] for h in sync.history] == pytest.approx([h["ce"] for h in prefetched.history])
    assert (tmp_path / "p0" / CHECKPOINT_DIR / "manifest.json").exists()


def test_resumed_run_matches_uninterrupted(tiny_backbone, tmp_path):
    samples = _samples()
    full = run_stage(Settings(run=_run(steps=4), backbone=tiny_backbone), samples, tmp_path / "full")
    run_stage(Settings(run=_run(steps=2), backbone=tiny_backbone), samples, tmp_path / "split")
    resumed = run_stage(Settings(run=_run(steps=4), backbone=tiny_backbone), samples, tmp_path / "split", resume=True)
    assert [h["step"] for h in resumed.history] == [3, 4]
    expected = full.model.state_dict()
    for name, value in resumed.model.state_dict().items():
        np.testing.assert_allclose(value, expected[name], rtol=1e-6, atol=1e-7)


def test_resume_rejects_changed_config(tiny_backbone, tmp_path):
    samples = _samples()
    run_stage(Settings(run=_run(steps=1), backbone=tiny_backbone), samples, tmp_path)
    with pytest.raises(CheckpointError) as exc:
        run_stage(Settings(run=_run(steps=2, tau=0.9), backbone=tiny_backbone), samples, tmp_path, resume=True)
    assert exc.value.differing_keys == ["tau"]


def test_s1_upcycles_pretrain_checkpoint(tiny_backbone, tmp_path):
    samples = _samples()
    pre = run_stage(Settings(run=_run(steps=1), backbone=tiny_backbone), samples, tmp_path / "pre")
    settings = Settings(run=_run(stage="s1", steps=1), backbone=tiny_backbone)
    with pytest.raises(ValidationError):
        run_stage(settings, samples, tmp_path / "s1")
    s1 = run_stage(settings, samples, tmp_path / "s1", init=pre.checkpoint)
    assert s1.model.is_sparse
    assert s1.history[0]["l_moe"] is not None
    model, meta = load_backbone(s1.checkpoint)
    assert model.is_sparse and meta["stage"] == "s1"

    s2 = Settings(run=_run(stage="s2", steps=1), backbone=tiny_backbone)
    with pytest.raises(CheckpointError):
        run_stage(s2, samples, tmp_path / "s2", init=pre.checkpoint)


def test_interp_stage_logs_smoothness(tiny_interp, tmp_path):
    store = MetricsStore(tmp_path / "metrics.jsonl")
    settings = Settings(run=_run(stage="interp", steps=2), interp=tiny_interp)
    result = run_stage(settings, _samples(), tmp_path, store=store)
    assert result.stage == "interp"
    assert all(h["l_vel"] is not None and h["l_moe"] is None for h in result.history)
    records = read_jsonl(tmp_path / "metrics.jsonl")
    assert [r["step"] for r in records] == [1, 2]
    assert all(r["stage"] == "interp" for r in records)


def test_interp_stage_stride_one_skips_training(tiny_interp, tmp_path):
    settings = Settings(run=_run(stage="interp", steps=3, stride=1), interp=tiny_interp)
    result = run_stage(settings, _samples(2), tmp_path)
    assert result.history == []
    assert (tmp_path / CHECKPOINT_DIR / "manifest.json").exists()


@pytest.mark.slow
def test_pretrain_overfits_small_corpus(tiny_backbone, tmp_path):
    settings = Settings(run=_run(steps=150, batch=4, lr=3e-3, wd=0.0, log_every=50), backbone=tiny_backbone)
    result = run_stage(settings, _samples(2), tmp_path)
    ce = [h["ce"] for h in result.history]
    assert np.mean(ce[-10:]) < 0.8 * np.mean(ce[:10])
