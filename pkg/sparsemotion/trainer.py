"""Staged training: task mixture, per-family templates, stage losses and loops.

Stages run in order ``pretrain -> s1 -> s2``; the dense backbone is upcycled
to experts exactly once, when ``s1`` initializes from a pretrain checkpoint.
The interpolation network trains separately (``stage: interp``).

Every step's batch is drawn from ``default_rng([seed, step])`` so a resumed
run sees the same batches as an uninterrupted one.
"""

from __future__ import annotations

import logging
import math
import queue
import threading
from collections.abc import Callable, Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from sparsemotion import moe
from sparsemotion import tensorcore as tc
from sparsemotion.backbone import (
    ChunkWindow,
    PackedInput,
    PrefixLM,
    VocabLayout,
    build_model,
    pack_segments,
    pack_template,
)
from sparsemotion.checkpoint import diff_config, load_checkpoint, save_checkpoint
from sparsemotion.config import BackboneConfig, RunConfig, Settings, settings_from_flat
from sparsemotion.errors import CheckpointError, ValidationError
from sparsemotion.interpnet import InterpBatch, InterpNet, loss_interp, make_batch
from sparsemotion.keyframe import MOTION_PAD, keyframe_tokens, left_pad_history
from sparsemotion.metrics_store import MetricsStore
from sparsemotion.optim import AdamW, AdamWConfig
from sparsemotion.tensorcore import LossTerm, Tensor
from sparsemotion.tokenstream import (
    CODEBOOKS,
    INSTRUCTION_WORDS,
    PairedSample,
    augment_audio_variants,
    make_stream,
    padded_audio_window,
    synth_sample,
)

logger = logging.getLogger(__name__)

FAMILIES = ("kf_motion", "a2t", "t2a", "a2m", "t2m")
STAGE_FAMILIES = {
    "pretrain": ("kf_motion", "a2t", "t2a"),
    "s1": ("a2m", "t2m"),
    "s2": ("a2m", "t2m"),
}
PREVIOUS_STAGE = {"s1": "pretrain", "s2": "s1"}
TASK_PROMPTS = {
    "kf_motion": ("generate", "keyframes"),
    "a2t": ("transcribe", "audio"),
    "t2a": ("speak", "text"),
    "a2m": ("generate", "motion", "from", "audio"),
    "t2m": ("generate", "motion", "from", "text"),
}
ARCH_KEYS = (
    "n_enc_layers",
    "n_dec_layers",
    "d_model",
    "n_heads",
    "d_ffn",
    "max_positions",
    "rel_buckets",
    "use_position_bias",
)
MOE_KEYS = ("n_experts", "top_k")
# Keys that may change between a run and its resumption.
RESUME_FREE_KEYS = {"steps", "log_every", "checkpoint_every", "prefetch"}
CHECKPOINT_DIR = "checkpoint"


def task_prompt(family: str) -> np.ndarray:
    return np.array([INSTRUCTION_WORDS[w] for w in TASK_PROMPTS[family]], dtype=np.int64)


def task_probabilities(sizes: Mapping[str, int], tau: float) -> dict[str, float]:
    """``p_i = n_i^tau / sum_j n_j^tau``."""
    if not 0.0 <= tau <= 1.0:
        raise ValidationError(f"tau must be in [0, 1], got {tau}")
    if not sizes:
        raise ValidationError("no task pools")
    empty = [name for name, n in sizes.items() if n <= 0]
    if empty:
        raise ValidationError(f"empty task pool(s): {empty}")
    weights = np.array([float(n) ** tau for n in sizes.values()])
    return dict(zip(sizes, (weights / weights.sum()).tolist(), strict=True))


def sample_task(pools: Mapping[str, Sequence[int]], tau: float, rng: np.random.Generator) -> tuple[str, int]:
    """Draw a family from the temperature mixture, then a uniform pool member."""
    probs = task_probabilities({name: len(pool) for name, pool in pools.items()}, tau)
    names = list(probs)
    family = names[int(rng.choice(len(names), p=list(probs.values())))]
    pool = pools[family]
    return family, int(pool[int(rng.integers(len(pool)))])


def build_pools(
    n_samples: int,
    fractions: Mapping[str, float],
    families: Sequence[str],
    seed: int,
) -> dict[str, np.ndarray]:
    """Per-family pools of sample indices; ``fractions`` default to 1.0."""
    if n_samples < 1:
        raise ValidationError("dataset is empty")
    pools = {}
    for k, family in enumerate(families):
        fraction = float(fractions.get(family, 1.0))
        size = min(n_samples, max(1, round(fraction * n_samples)))
        order = np.random.default_rng([seed, k]).permutation(n_samples)
        pools[family] = np.sort(order[:size])
    return pools


@dataclass(frozen=True)
class TrainingTemplate:
    """One packed encoder input and its decoder targets.

    ``y`` is (L, 4) part ids for motion targets, (L,) otherwise. ``y_valid``
    is False on left-padded history; ``supervised`` marks the positions whose
    tokens enter the loss.
    """

    task_family: str
    packed: PackedInput
    target: str
    y: np.ndarray
    y_valid: np.ndarray
    supervised: np.ndarray

    def __post_init__(self):
        n = self.y.shape[0]
        if self.y_valid.shape != (n,) or self.supervised.shape != (n,):
            raise ValidationError(f"template masks do not match target length {n}")
        if np.any(self.supervised & ~self.y_valid):
            raise ValidationError("supervised positions must be valid")

    @property
    def sup_positions(self) -> np.ndarray:
        return np.flatnonzero(self.supervised)


def motion_window_lengths(stage: str, family: str, run: RunConfig) -> tuple[int, int]:
    """(history P, target length upper bound) for a motion template."""
    if stage == "s2":
        return run.history_len, run.chunk_len
    if family == "kf_motion":
        return run.history_len, run.window
    return 0, run.window


def _motion_template(
    sample: PairedSample,
    family: str,
    stage: str,
    run: RunConfig,
    layout: VocabLayout,
    max_positions: int,
    start: int,
    history_keep: int | None,
) -> TrainingTemplate:
    s = run.stride
    kf = keyframe_tokens(sample.motion_array(), s)
    K = kf.shape[1]
    P, n_max = motion_window_lengths(stage, family, run)
    n = min(n_max, K)
    if not 0 <= start <= K - n:
        raise ValidationError(f"window start {start} outside [0, {K - n}]")
    history, mask = left_pad_history(kf, start, P)
    if history_keep is not None:
        if not 0 <= history_keep < max(P, 1):
            raise ValidationError(f"history_keep {history_keep} outside [0, {P})")
        cut = P - history_keep
        history[:, :cut] = MOTION_PAD
        mask[:cut] = False

    prompt = task_prompt(family)
    if family == "a2m":
        audio = padded_audio_window(sample.audio, (start - P) * s, (start + n) * s)
    else:
        audio = make_stream("audio", [])
    if family == "t2m":
        if sample.transcript.size == 0:
            raise ValidationError("sample has no transcript for a t2m template")
        prompt = np.concatenate([prompt, sample.transcript])

    window = ChunkWindow(prompt, audio, history, mask, n)
    target = kf[:, start : start + n]
    return TrainingTemplate(
        task_family=family,
        packed=pack_template(window, layout, max_positions),
        target="motion",
        y=np.concatenate([history, target], axis=1).T.copy(),
        y_valid=np.concatenate([mask, np.ones(n, dtype=bool)]),
        supervised=np.concatenate([np.zeros(P, dtype=bool), np.ones(n, dtype=bool)]),
    )


def build_template(
    sample: PairedSample,
    family: str,
    stage: str,
    run: RunConfig,
    layout: VocabLayout,
    max_positions: int,
    start: int = 0,
    history_keep: int | None = None,
) -> TrainingTemplate:
    """Deterministic packing of ``sample`` for ``family``.

    ``start`` is the first target keyframe; ``history_keep`` truncates the
    motion history to its most recent entries (short-context augmentation).
    """
    if family not in FAMILIES:
        raise ValidationError(f"unknown task family '{family}'")
    if family in ("kf_motion", "a2m", "t2m"):
        return _motion_template(sample, family, stage, run, layout, max_positions, start, history_keep)

    if sample.transcript.size == 0 or len(sample.audio) == 0:
        raise ValidationError(f"sample lacks audio or transcript for an {family} template")
    audio = sample.audio.tokens
    audio_valid = audio != CODEBOOKS["audio"].pad_id
    if family == "a2t":
        spans = [("task", task_prompt(family), None), ("audio", audio, audio_valid)]
        y, target, sup = sample.transcript, "text", np.ones(sample.transcript.size, dtype=bool)
    else:
        spans = [("task", task_prompt(family), None), ("text", sample.transcript, None)]
        y, target, sup = audio, "audio", audio_valid
    return TrainingTemplate(
        task_family=family,
        packed=pack_segments(layout, spans, max_positions),
        target=target,
        y=np.array(y, dtype=np.int64),
        y_valid=np.ones(y.size, dtype=bool),
        supervised=np.array(sup, dtype=bool),
    )


def template_ce(
    model: PrefixLM,
    template: TrainingTemplate,
    label_smoothing: float,
    routing: list | None = None,
) -> LossTerm:
    """Teacher-forced CE summed over the template's supervised tokens."""
    memory = model.encode_packed(template.packed, routing=routing)
    state = model.new_state(memory)
    valid_in = np.concatenate([[True], template.y_valid[:-1]])[None]
    ignore = ~template.supervised[None]
    y = template.y[None]
    if template.target == "motion":
        inputs = model.shift_right(model.embed_motion(y))
        hidden = model.decode(state, memory, inputs, valid_in, routing=routing)
        terms = [
            tc.cross_entropy(logits, y[..., p], label_smoothing, ignore, reduction="sum")
            for p, logits in enumerate(model.part_logits(hidden))
        ]
    else:
        inputs = model.shift_right(model.embed_stream(template.target, y))
        hidden = model.decode(state, memory, inputs, valid_in, routing=routing)
        logits = model.stream_logits(template.target, hidden)
        terms = [tc.cross_entropy(logits, y, label_smoothing, ignore, reduction="sum")]
    live = [t for t in terms if not t.empty]
    if not live:
        return LossTerm(Tensor(0.0), 0)
    total = live[0].value
    for t in live[1:]:
        total = total + t.value
    return LossTerm(total, sum(t.count for t in live))


@dataclass
class StageLoss:
    total: Tensor
    ce: LossTerm
    l_moe: LossTerm
    routing: list[moe.RoutingRecord] = field(default_factory=list)

    def metrics(self) -> dict[str, Any]:
        stats = moe.collect_stats(self.routing)
        return {
            "ce": self.ce.item(),
            "l_moe": self.l_moe.item() if not self.l_moe.empty else None,
            "tokens": self.ce.count,
            "f_e": {layer: s.f.round(6).tolist() for layer, s in stats.items()},
        }


def stage_loss(model: PrefixLM, templates: Sequence[TrainingTemplate], run: RunConfig) -> StageLoss:
    """Mean token CE over supervised positions plus ``lambda_moe * l_moe`` after upcycling."""
    routing: list[moe.RoutingRecord] = []
    summed: Tensor | None = None
    count = 0
    for template in templates:
        term = template_ce(model, template, run.label_smoothing, routing)
        if term.empty:
            continue
        summed = term.value if summed is None else summed + term.value
        count += term.count
    ce = LossTerm(summed * (1.0 / count), count) if summed is not None else LossTerm(Tensor(0.0), 0)
    balance = moe.load_balance_loss(routing) if model.is_sparse else LossTerm(Tensor(0.0), 0)
    lam = run.effective_lambda_moe
    total = ce.value + balance.value * lam if lam > 0 and not balance.empty else ce.value
    return StageLoss(total, ce, balance, routing)


def draw_window(
    sample: PairedSample,
    family: str,
    stage: str,
    run: RunConfig,
    rng: np.random.Generator,
) -> tuple[int, int | None]:
    """Random target start and optional history truncation for a motion template."""
    if family not in ("kf_motion", "a2m", "t2m"):
        return 0, None
    K = math.ceil(sample.motion_len / run.stride)
    P, n_max = motion_window_lengths(stage, family, run)
    n = min(n_max, K)
    start = int(rng.integers(0, K - n + 1))
    keep = None
    if stage == "s2" and P > 0 and rng.random() < run.short_context_prob:
        keep = int(rng.integers(0, P))
    return start, keep


def make_step_batch(
    samples: Sequence[PairedSample],
    pools: Mapping[str, Sequence[int]],
    run: RunConfig,
    layout: VocabLayout,
    max_positions: int,
    step: int,
) -> list[TrainingTemplate]:
    rng = np.random.default_rng([run.seed, step])
    batch = []
    for _ in range(run.batch):
        family, index = sample_task(pools, run.tau, rng)
        sample = samples[index]
        if run.stage == "s2" and family == "a2m" and run.audio_variants > 1:
            variant = int(rng.integers(run.audio_variants))
            if variant:
                sample = augment_audio_variants(sample, variant + 1, seed=run.seed)[variant]
        start, keep = draw_window(sample, family, run.stage, run, rng)
        batch.append(build_template(sample, family, run.stage, run, layout, max_positions, start, keep))
    return batch


class BatchPrefetcher(threading.Thread):
    """Builds step batches ahead of the optimizer through a bounded queue."""

    def __init__(self, build: Callable[[int], Any], steps: range, depth: int = 2):
        super().__init__(daemon=True)
        self.build = build
        self.steps = steps
        self.batches: queue.Queue = queue.Queue(maxsize=max(1, depth))
        self.stop_event = threading.Event()
        self.error: BaseException | None = None

    def run(self):
        for step in self.steps:
            if self.stop_event.is_set():
                return
            try:
                item = (step, self.build(step))
            except Exception as e:
                logger.error("BatchPrefetcher error at step %d: %s", step, e)
                self.error = e
                item = (step, None)
            if not self._put(item) or self.error is not None:
                return

    def _put(self, item) -> bool:
        while not self.stop_event.is_set():
            try:
                self.batches.put(item, timeout=1)
                return True
            except queue.Full:
                continue
        return False

    def get(self) -> tuple[int, Any]:
        step, batch = self.batches.get()
        if batch is None and self.error is not None:
            raise self.error
        return step, batch

    def stop(self):
        self.stop_event.set()


class _SyncBatches:
    def __init__(self, build: Callable[[int], Any], steps: range):
        self.build = build
        self.steps = iter(steps)

    def get(self) -> tuple[int, Any]:
        step = next(self.steps)
        return step, self.build(step)

    def start(self):
        pass

    def stop(self):
        pass


def batch_source(build: Callable[[int], Any], steps: range, depth: int):
    source = BatchPrefetcher(build, steps, depth) if depth > 0 else _SyncBatches(build, steps)
    source.start()
    return source


@dataclass
class StageResult:
    stage: str
    steps: int
    checkpoint: Path
    history: list[dict[str, Any]]
    model: PrefixLM | InterpNet


def _checkpoint_meta(settings: Settings, step: int, kind: str, **extra) -> dict[str, Any]:
    return {
        "kind": kind,
        "stage": settings.run.stage,
        "step": step,
        "seed": settings.run.seed,
        "config": settings.to_flat(),
        **extra,
    }


def _save(path: Path, model, optimizer: AdamW, meta: dict[str, Any]) -> Path:
    arrays = {f"model/{k}": v for k, v in model.state_dict().items()}
    arrays.update({f"optim/{k}": v for k, v in optimizer.state_dict().items()})
    return save_checkpoint(path, arrays, meta)


def _check_resume(meta: Mapping[str, Any], settings: Settings, kind: str) -> None:
    if meta.get("kind") != kind:
        raise CheckpointError(f"checkpoint holds a '{meta.get('kind')}' model, expected '{kind}'", ["kind"])
    flat = settings.to_flat()
    keys = sorted(k for k in flat if k not in RESUME_FREE_KEYS)
    differing = diff_config(flat, meta.get("config", {}), keys)
    if differing:
        raise CheckpointError("resume config differs from the checkpoint", differing)


def load_backbone(path: str | Path) -> tuple[PrefixLM, dict[str, Any]]:
    """Rebuild a backbone from a checkpoint directory; returns (model, meta)."""
    ckpt = load_checkpoint(path)
    if ckpt.meta.get("kind") != "backbone":
        raise CheckpointError(f"{path} is not a backbone checkpoint", ["kind"])
    config = settings_from_flat(ckpt.meta["config"]).backbone
    model = build_model(config, ckpt.meta.get("seed", 0), sparse=bool(ckpt.meta.get("sparse")))
    model.load_state_dict(ckpt.section("model/"))
    return model, ckpt.meta


def load_interp(path: str | Path) -> tuple[InterpNet, dict[str, Any]]:
    ckpt = load_checkpoint(path)
    if ckpt.meta.get("kind") != "interp":
        raise CheckpointError(f"{path} is not an interpolation checkpoint", ["kind"])
    net = InterpNet(settings_from_flat(ckpt.meta["config"]).interp, ckpt.meta.get("seed", 0))
    net.load_state_dict(ckpt.section("model/"))
    return net, ckpt.meta


def _prepare_backbone(
    settings: Settings,
    init: str | Path | None,
    resume_dir: Path | None,
) -> tuple[PrefixLM, AdamW, int]:
    run, cfg = settings.run, settings.backbone
    opt_cfg = AdamWConfig(lr=run.lr, weight_decay=run.wd, max_grad_norm=run.max_grad_norm)
    if resume_dir is not None:
        ckpt = load_checkpoint(resume_dir)
        _check_resume(ckpt.meta, settings, "backbone")
        model = build_model(cfg, run.seed, sparse=bool(ckpt.meta.get("sparse")))
        model.load_state_dict(ckpt.section("model/"))
        optimizer = AdamW(dict(model.named_parameters()), opt_cfg)
        optimizer.load_state_dict(ckpt.section("optim/"))
        logger.info("Resuming %s from step %d", run.stage, ckpt.meta["step"])
        return model, optimizer, int(ckpt.meta["step"])

    previous = PREVIOUS_STAGE.get(run.stage)
    if previous is None:
        if init is not None:
            raise ValidationError("pretrain starts from scratch; use --resume to continue a run")
        model = build_model(cfg, run.seed)
    else:
        if init is None:
            raise ValidationError(f"stage {run.stage} needs --init with a {previous} checkpoint")
        ckpt = load_checkpoint(init)
        found = ckpt.meta.get("stage")
        if ckpt.meta.get("kind") != "backbone" or found != previous:
            raise CheckpointError(f"--init checkpoint is from stage '{found}', expected '{previous}'", ["stage"])
        sparse = bool(ckpt.meta.get("sparse"))
        keys = list(ARCH_KEYS + (MOE_KEYS if sparse else ()))
        differing = diff_config(settings.to_flat(), ckpt.meta.get("config", {}), keys)
        if differing:
            raise CheckpointError("--init checkpoint config differs from the run config", differing)
        model = build_model(cfg, run.seed, sparse=sparse)
        model.load_state_dict(ckpt.section("model/"))
        if not model.is_sparse:
            model.upcycle(cfg.n_experts, cfg.top_k, run.seed, cfg.router_init_std)
    return model, AdamW(dict(model.named_parameters()), opt_cfg), 0


def run_stage(
    settings: Settings,
    samples: Sequence[PairedSample],
    out_dir: str | Path,
    init: str | Path | None = None,
    resume: bool = False,
    store: MetricsStore | None = None,
    pool_fractions: Mapping[str, float] | None = None,
) -> StageResult:
    """Train one stage and write ``<out_dir>/checkpoint``.

    Args:
        settings: Run, backbone and interpolation settings.
        samples: Training corpus.
        out_dir: Output directory for the checkpoint.
        init: Checkpoint of the previous stage (required for s1 and s2).
        resume: Continue from ``<out_dir>/checkpoint`` of the same stage.
        store: Per-step metrics sink.
        pool_fractions: Fraction of the corpus in each family's pool.
    """
    run = settings.run
    if run.stage == "interp":
        return run_interp_training(settings, samples, out_dir, resume=resume, store=store)
    out_dir = Path(out_dir)
    ckpt_dir = out_dir / CHECKPOINT_DIR
    model, optimizer, start = _prepare_backbone(settings, init, ckpt_dir if resume else None)
    pools = build_pools(len(samples), pool_fractions or {}, STAGE_FAMILIES[run.stage], run.seed)
    sizes = {name: len(pool) for name, pool in pools.items()}
    logger.info(
        "Stage %s: %d params, pools %s, p(t)=%s",
        run.stage,
        model.num_parameters(),
        sizes,
        {k: round(v, 4) for k, v in task_probabilities(sizes, run.tau).items()},
    )

    max_positions = settings.backbone.max_positions

    def build(step: int) -> list[TrainingTemplate]:
        return make_step_batch(samples, pools, run, model.layout, max_positions, step)

    monitor = moe.CollapseMonitor()
    history: list[dict[str, Any]] = []
    source = batch_source(build, range(start, run.steps), run.prefetch)
    try:
        for _ in range(start, run.steps):
            step, batch = source.get()
            model.train()
            optimizer.zero_grad()
            loss = stage_loss(model, batch, run)
            tc.backward(loss.total)
            grad_norm = optimizer.step()
            metrics = {**loss.metrics(), "grad_norm": grad_norm, "l_vel": None, "l_acc": None}
            history.append({"step": step + 1, **metrics})
            if store is not None:
                store.log_train_step(run.stage, step + 1, metrics)
            if (step + 1) % run.log_every == 0 or step + 1 == run.steps:
                logger.info(
                    "[%s] step %d/%d ce=%.4f l_moe=%s grad_norm=%.3f",
                    run.stage,
                    step + 1,
                    run.steps,
                    metrics["ce"],
                    "-" if metrics["l_moe"] is None else f"{metrics['l_moe']:.4f}",
                    grad_norm,
                )
                if model.is_sparse:
                    monitor.update(moe.collect_stats(loss.routing))
            if run.checkpoint_every and (step + 1) % run.checkpoint_every == 0:
                _save(ckpt_dir, model, optimizer, _checkpoint_meta(settings, step + 1, "backbone", sparse=model.is_sparse))
    finally:
        source.stop()
    path = _save(ckpt_dir, model, optimizer, _checkpoint_meta(settings, run.steps, "backbone", sparse=model.is_sparse))
    return StageResult(run.stage, run.steps, path, history, model)


def interp_step_batch(samples: Sequence[PairedSample], run: RunConfig, step: int) -> InterpBatch:
    """Random dense crops of one streaming window (``N * s + 1`` frames)."""
    rng = np.random.default_rng([run.seed, step])
    length = run.chunk_len * run.stride + 1
    crops = []
    for _ in range(run.batch):
        dense = samples[int(rng.integers(len(samples)))].motion_array()
        width = min(length, dense.shape[1])
        start = int(rng.integers(0, dense.shape[1] - width + 1))
        crops.append(dense[:, start : start + width])
    batch, _ = make_batch(crops, run.stride)
    return batch


def run_interp_training(
    settings: Settings,
    samples: Sequence[PairedSample],
    out_dir: str | Path,
    resume: bool = False,
    store: MetricsStore | None = None,
) -> StageResult:
    """Optimize the interpolation loss on masked dense windows, apart from the backbone."""
    run = settings.run
    if not samples:
        raise ValidationError("dataset is empty")
    ckpt_dir = Path(out_dir) / CHECKPOINT_DIR
    opt_cfg = AdamWConfig(lr=run.lr, weight_decay=run.wd, max_grad_norm=run.max_grad_norm)
    net = InterpNet(settings.interp, seed=run.seed)
    optimizer = AdamW(dict(net.named_parameters()), opt_cfg)
    start = 0
    if resume:
        ckpt = load_checkpoint(ckpt_dir)
        _check_resume(ckpt.meta, settings, "interp")
        net.load_state_dict(ckpt.section("model/"))
        optimizer.load_state_dict(ckpt.section("optim/"))
        start = int(ckpt.meta["step"])

    history: list[dict[str, Any]] = []
    if run.stride == 1:
        logger.warning("Stride 1 masks no frames; the interpolation loss is constant 0, skipping training")
        path = _save(ckpt_dir, net, optimizer, _checkpoint_meta(settings, start, "interp", stride=run.stride))
        return StageResult("interp", start, path, history, net)

    source = batch_source(lambda step: interp_step_batch(samples, run, step), range(start, run.steps), run.prefetch)
    try:
        for _ in range(start, run.steps):
            step, batch = source.get()
            net.train()
            optimizer.zero_grad()
            loss = loss_interp(net, batch)
            tc.backward(loss.total)
            grad_norm = optimizer.step()
            metrics = {
                "ce": loss.ce.item() / max(loss.ce.count, 1),
                "l_moe": None,
                "l_vel": loss.vel.item(),
                "l_acc": loss.acc.item(),
                "grad_norm": grad_norm,
                "tokens": loss.ce.count,
            }
            history.append({"step": step + 1, **metrics})
            if store is not None:
                store.log_train_step("interp", step + 1, metrics)
            if (step + 1) % run.log_every == 0 or step + 1 == run.steps:
                logger.info(
                    "[interp] step %d/%d ce/token=%.4f l_vel=%.5f l_acc=%.5f",
                    step + 1,
                    run.steps,
                    metrics["ce"],
                    metrics["l_vel"],
                    metrics["l_acc"],
                )
            if run.checkpoint_every and (step + 1) % run.checkpoint_every == 0:
                _save(ckpt_dir, net, optimizer, _checkpoint_meta(settings, step + 1, "interp", stride=run.stride))
    finally:
        source.stop()
    path = _save(ckpt_dir, net, optimizer, _checkpoint_meta(settings, run.steps, "interp", stride=run.stride))
    return StageResult("interp", run.steps, path, history, net)


def gradcheck_case(stage: str) -> tuple[Callable[[], Tensor], dict[str, Tensor]]:
    """Stage objective of a tiny backbone on one short synthetic sample."""
    cfg = BackboneConfig(
        n_enc_layers=1,
        n_dec_layers=1,
        d_model=8,
        n_heads=2,
        d_ffn=12,
        max_positions=64,
        rel_buckets=4,
        n_experts=3,
        top_k=1,
        router_init_std=0.5,
    )
    run = RunConfig(stage=stage, history_len=2, chunk_len=2, stride=3, window=4, lambda_moe=0.5)
    model = build_model(cfg, seed=1, sparse=stage != "pretrain")
    rng = np.random.default_rng(7)
    for layer in model.moe_layers():
        for expert in layer.experts:
            expert.w_in.weight.data = expert.w_in.weight.data + 0.2 * rng.normal(size=expert.w_in.weight.shape)
    sample = synth_sample(3, 0, motion_len=12)
    K = math.ceil(sample.motion_len / run.stride)
    templates = []
    for family in STAGE_FAMILIES[stage]:
        n = min(motion_window_lengths(stage, family, run)[1], K)
        templates.append(build_template(sample, family, stage, run, model.layout, cfg.max_positions, start=K - n))

    def loss() -> Tensor:
        return stage_loss(model, templates, run).total

    return loss, dict(model.named_parameters())
