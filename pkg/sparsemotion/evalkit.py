"""Desk-scale evaluation in token space.

Masked-token accuracy of the interpolation network (against linear blending,
with a paired one-sided binomial test), teacher-forced perplexity per task
family and an L1 diversity statistic over sampled generations.
"""

from __future__ import annotations

import logging
import math
from collections.abc import Callable, Mapping, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from itertools import combinations
from typing import Any

import numpy as np
from scipy import stats

from sparsemotion import tensorcore as tc
from sparsemotion.backbone import PrefixLM, Sampling
from sparsemotion.config import RunConfig, worker_count
from sparsemotion.errors import ValidationError
from sparsemotion.interpnet import InterpNet, linear_interp_baseline, net_tables, predict_masked
from sparsemotion.keyframe import MOTION_BASE, MaskedSequence, mask_sequence, schedule
from sparsemotion.streamer import backbone_part_tables, run_to_end, start_session
from sparsemotion.tokenstream import PARTS, PairedSample, TokenStream
from sparsemotion.trainer import FAMILIES, build_template, template_ce

logger = logging.getLogger(__name__)

BANNER = (
    "Token-space proxies (masked accuracy, perplexity, embedding L1 diversity); "
    "not comparable to published gesture benchmark numbers such as FGD or BC."
)

# (masked sequence, dense ground truth) -> (positions, (4, M) ids)
Predictor = Callable[[MaskedSequence, np.ndarray], tuple[np.ndarray, np.ndarray]]


def network_predictor(net: InterpNet) -> Predictor:
    def predict(masked: MaskedSequence, dense: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        with tc.no_grad():
            logits = net(masked.tokens[None], masked.frame_type[None]).data[0]
        return predict_masked(logits, masked)

    return predict


def linear_predictor(tables: Sequence[np.ndarray]) -> Predictor:
    def predict(masked: MaskedSequence, dense: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return linear_interp_baseline(masked, tables)

    return predict


def split_windows(dense: np.ndarray, length: int | None) -> list[np.ndarray]:
    """Consecutive windows of ``length`` frames sharing their boundary frame."""
    T = dense.shape[1]
    if length is None or length >= T:
        return [dense]
    if length < 2:
        raise ValidationError(f"window length must be >= 2, got {length}")
    windows, start = [], 0
    while start < T - 1:
        windows.append(dense[:, start : min(start + length, T)])
        start += length - 1
    return windows


@dataclass
class InterpEval:
    stride: int
    correct: dict[str, int]
    linear_correct: dict[str, int]
    total: int
    net_only: int
    linear_only: int

    @property
    def accuracy(self) -> dict[str, float]:
        return {p: self.correct[p] / self.total if self.total else 0.0 for p in PARTS}

    @property
    def linear_accuracy(self) -> dict[str, float]:
        return {p: self.linear_correct[p] / self.total if self.total else 0.0 for p in PARTS}

    @property
    def mean_accuracy(self) -> float:
        return sum(self.correct.values()) / (self.total * len(PARTS)) if self.total else 0.0

    @property
    def mean_linear_accuracy(self) -> float:
        return sum(self.linear_correct.values()) / (self.total * len(PARTS)) if self.total else 0.0

    @property
    def delta(self) -> float:
        return self.mean_accuracy - self.mean_linear_accuracy

    @property
    def p_value(self) -> float:
        """One-sided exact test on discordant tokens: the network wins more often."""
        discordant = self.net_only + self.linear_only
        if discordant == 0:
            return 1.0
        return float(stats.binomtest(self.net_only, discordant, 0.5, alternative="greater").pvalue)

    def to_dict(self) -> dict[str, Any]:
        return {
            "stride": self.stride,
            "masked_positions": self.total,
            "accuracy": self.accuracy,
            "linear_accuracy": self.linear_accuracy,
            "mean_accuracy": self.mean_accuracy,
            "mean_linear_accuracy": self.mean_linear_accuracy,
            "delta_vs_linear": self.delta,
            "p_value": self.p_value,
        }


def _score_window(
    dense: np.ndarray,
    s: int,
    predict: Predictor,
    baseline: Predictor,
) -> tuple[np.ndarray, np.ndarray, int]:
    masked = mask_sequence(dense, schedule(dense.shape[1], s))
    if masked.masked_positions.size == 0:
        return np.zeros((len(PARTS), 0), bool), np.zeros((len(PARTS), 0), bool), 0
    truth = dense[:, masked.masked_positions]
    positions, ids = predict(masked, dense)
    _, linear_ids = baseline(masked, dense)
    if not np.array_equal(positions, masked.masked_positions):
        raise ValidationError("predictor returned positions other than the masked frames")
    return ids == truth, linear_ids == truth, int(positions.size)


def eval_interpolation(
    net: InterpNet | None,
    samples: Sequence[PairedSample],
    s: int,
    window_len: int | None = None,
    predict: Predictor | None = None,
    tables: Sequence[np.ndarray] | None = None,
) -> InterpEval:
    """Masked-token accuracy per part against the linear baseline.

    ``predict`` replaces the network (oracle checks); ``tables`` replaces the
    network's embedding tables for the linear baseline.
    """
    if net is None and (predict is None or tables is None):
        raise ValidationError("eval_interpolation needs a network or both a predictor and tables")
    predict = predict or network_predictor(net)
    baseline = linear_predictor(tables if tables is not None else net_tables(net))
    windows = [w for sample in samples for w in split_windows(sample.motion_array(), window_len)]

    with ThreadPoolExecutor(max_workers=worker_count()) as pool:
        scored = list(pool.map(lambda w: _score_window(w, s, predict, baseline), windows))

    correct = dict.fromkeys(PARTS, 0)
    linear_correct = dict.fromkeys(PARTS, 0)
    total = net_only = linear_only = 0
    for hits, linear_hits, n in scored:
        total += n
        for p, part in enumerate(PARTS):
            correct[part] += int(hits[p].sum())
            linear_correct[part] += int(linear_hits[p].sum())
        net_only += int((hits & ~linear_hits).sum())
        linear_only += int((~hits & linear_hits).sum())
    result = InterpEval(s, correct, linear_correct, total, net_only, linear_only)
    logger.info(
        "Interpolation s=%d: accuracy %.4f vs linear %.4f over %d masked frames (p=%.3g)",
        s,
        result.mean_accuracy,
        result.mean_linear_accuracy,
        total,
        result.p_value,
    )
    return result


def chance_band(n: int, confidence: float = 0.99, p: float = 1.0 / MOTION_BASE) -> tuple[float, float]:
    """Central binomial interval of the accuracy a chance-level predictor reaches on ``n`` tokens."""
    lo, hi = stats.binom.interval(confidence, n, p)
    return float(lo) / n, float(hi) / n


def family_stage(family: str, run: RunConfig) -> str:
    if family in ("kf_motion", "a2t", "t2a"):
        return "pretrain"
    return run.stage if run.stage in ("s1", "s2") else "s1"


def eval_perplexity(
    model: PrefixLM,
    samples: Sequence[PairedSample],
    run: RunConfig,
    families: Sequence[str] = FAMILIES,
) -> dict[str, float]:
    """``exp`` of the unsmoothed teacher-forced CE per task family."""
    was_training = model.training
    model.eval()

    def score(args: tuple[str, PairedSample]) -> tuple[str, float, int]:
        family, sample = args
        template = build_template(
            sample, family, family_stage(family, run), run, model.layout, model.config.max_positions
        )
        with tc.no_grad():
            term = template_ce(model, template, 0.0)
        return family, term.item(), term.count

    try:
        jobs = [(family, sample) for family in families for sample in samples]
        with ThreadPoolExecutor(max_workers=worker_count()) as pool:
            scored = list(pool.map(score, jobs))
    finally:
        model.train(was_training)
    sums = dict.fromkeys(families, 0.0)
    counts = dict.fromkeys(families, 0)
    for family, value, count in scored:
        sums[family] += value
        counts[family] += count
    return {f: math.exp(sums[f] / counts[f]) if counts[f] else float("nan") for f in families}


def embedding_trajectory(dense: np.ndarray, tables: Sequence[np.ndarray]) -> np.ndarray:
    """(T, 4 * d) concatenation of the part embeddings of a dense (4, T) stream."""
    return np.concatenate([np.asarray(tables[p])[dense[p]] for p in range(len(PARTS))], axis=1)


def l1_diversity(trajectories: Sequence[np.ndarray]) -> float:
    """Mean over pairs of the per-frame L1 distance between trajectories."""
    if len(trajectories) < 2:
        raise ValidationError("diversity needs at least two trajectories")
    dists = [float(np.abs(a - b).sum(axis=1).mean()) for a, b in combinations(trajectories, 2)]
    return float(np.mean(dists))


def eval_diversity(
    model: PrefixLM,
    interp: InterpNet | None,
    audio: TokenStream,
    n_seeds: int,
    P: int,
    N: int,
    s: int,
    temperature: float = 1.0,
    interp_mode: str = "network",
) -> float:
    """L1 diversity of ``n_seeds`` sampled generations on identical audio."""
    if n_seeds < 2:
        raise ValidationError(f"n_seeds must be >= 2, got {n_seeds}")
    tables = net_tables(interp) if interp is not None else backbone_part_tables(model)
    trajectories = []
    for seed in range(n_seeds):
        session = start_session(
            model, interp, audio, P, N, s, sampling=Sampling(temperature, seed=seed), interp_mode=interp_mode
        )
        run_to_end(session)
        trajectories.append(embedding_trajectory(np.asarray(session.buffer.dense), tables))
    value = l1_diversity(trajectories)
    logger.info("L1 diversity over %d seeds (temperature %.2f): %.4f", n_seeds, temperature, value)
    return value


def step_counts(n_frames: int, s: int, N: int) -> dict[str, int]:
    """Decoder steps for a session against decoding every frame."""
    K = math.ceil(n_frames / s)
    return {
        "frames": n_frames,
        "keyframes": K,
        "decoder_steps": math.ceil(K / N) * N,
        "dense_decoder_steps": math.ceil(n_frames / N) * N,
    }


@dataclass
class EvalReport:
    masked_token_accuracy: dict[str, float] = field(default_factory=dict)
    linear_accuracy: dict[str, float] = field(default_factory=dict)
    vs_linear: dict[str, float] = field(default_factory=dict)
    perplexity: dict[str, float] = field(default_factory=dict)
    l1_diversity: float | None = None
    step_counts: dict[str, int] = field(default_factory=dict)
    banner: str = BANNER

    def __post_init__(self):
        for part, acc in {**self.masked_token_accuracy, **self.linear_accuracy}.items():
            if not 0.0 <= acc <= 1.0:
                raise ValidationError(f"accuracy for {part} outside [0, 1]: {acc}")
        for family, ppl in self.perplexity.items():
            if not math.isnan(ppl) and ppl < 1.0:
                raise ValidationError(f"perplexity for {family} below 1: {ppl}")

    @classmethod
    def build(
        cls,
        interp: InterpEval | None = None,
        perplexity: Mapping[str, float] | None = None,
        diversity: float | None = None,
        steps: Mapping[str, int] | None = None,
    ) -> EvalReport:
        return cls(
            masked_token_accuracy=interp.accuracy if interp else {},
            linear_accuracy=interp.linear_accuracy if interp else {},
            vs_linear=(
                {"delta": interp.delta, "p_value": interp.p_value, "masked_positions": interp.total}
                if interp
                else {}
            ),
            perplexity=dict(perplexity or {}),
            l1_diversity=diversity,
            step_counts=dict(steps or {}),
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "banner": self.banner,
            "masked_token_accuracy": self.masked_token_accuracy,
            "linear_accuracy": self.linear_accuracy,
            "vs_linear": self.vs_linear,
            "perplexity": self.perplexity,
            "l1_diversity": self.l1_diversity,
            "step_counts": self.step_counts,
        }
