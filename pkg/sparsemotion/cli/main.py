#!/usr/bin/env python3
"""
sparse-motion command line.

Subcommands cover the whole pipeline: synthesize a paired corpus, train the
staged backbone and the interpolation network, stream generation from audio
tokens, profile sessions, evaluate and inspect expert routing.

Exit codes: 0 on success, 1 on validation errors (bad flags, configs or
checkpoints), 2 on runtime failures. Errors are printed to stderr as one JSON
line ``{"code": ..., "message": ...}``.

Usage:
    python -m sparsemotion.cli synth-data --seed 7 --n 100 --len 120 --out runs/data
"""

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any

import numpy as np

from sparsemotion import evalkit, gradcheck, moe, streamer, trainer
from sparsemotion import tensorcore as tc
from sparsemotion.backbone import Sampling
from sparsemotion.config import Settings, load_settings, read_yaml
from sparsemotion.errors import ValidationError
from sparsemotion.keyframe import keyframe_tokens
from sparsemotion.metrics_store import MetricsStore
from sparsemotion.tokenstream import (
    PARTS,
    SynthConfig,
    dataset_header,
    make_stream,
    motion_entropies,
    read_dataset,
    read_token_file,
    synth_dataset,
    write_dataset,
    write_token_file,
)

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"

# CLI flag dest -> flat config key
OVERRIDE_FLAGS = {
    "stage": "stage",
    "steps": "steps",
    "tau": "tau",
    "lambda_moe": "lambda_moe",
    "history_p": "P",
    "chunk_n": "N",
    "stride": "stride",
    "window": "window",
    "lr": "lr",
    "wd": "wd",
    "batch": "batch",
    "seed": "seed",
}


class CliParser(argparse.ArgumentParser):
    """Argument parser that exits with code 1 on usage errors."""

    def error(self, message):
        self.print_usage(sys.stderr)
        _emit_error("usage", message)
        sys.exit(1)


def _emit_error(code: str, message: str) -> None:
    sys.stderr.write(json.dumps({"code": code, "message": message}) + "\n")


def _write_json(path: Path, payload: Any) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    logger.info("Wrote %s", path)
    return path


def _settings(args, checkpoint_meta: dict | None = None) -> Settings:
    """Defaults < checkpoint config < --config file < explicit flags."""
    flags = {key: getattr(args, dest) for dest, key in OVERRIDE_FLAGS.items() if getattr(args, dest, None) is not None}
    if checkpoint_meta is None:
        return load_settings(args.config, flags)
    merged = dict(checkpoint_meta.get("config", {}))
    if args.config:
        merged.update(read_yaml(args.config))
    merged.update(flags)
    return load_settings(None, merged)


def _load_samples(path: str | None) -> tuple[dict, list]:
    if path is None:
        raise ValidationError("--data is required")
    return read_dataset(path)


def _load_audio(path: str):
    _, streams = read_token_file(path)
    if "audio" not in streams:
        raise ValidationError(f"{path} holds no audio stream")
    return streams["audio"]


def _load_prefill(path: str | None, s: int, P: int) -> np.ndarray | None:
    if path is None:
        return None
    _, streams = read_token_file(path)
    missing = [p for p in PARTS if p not in streams]
    if missing:
        raise ValidationError(f"prefill file {path} lacks part streams {missing}")
    kf = keyframe_tokens({p: streams[p].tokens for p in PARTS}, s)
    if kf.shape[1] < P:
        raise ValidationError(f"prefill file yields {kf.shape[1]} keyframes, P={P} needed")
    return kf[:, :P]


def cmd_synth_data(args) -> int:
    config = SynthConfig(n_samples=args.n, motion_len=args.len)
    samples = synth_dataset(args.seed or 0, config)
    path = write_dataset(Path(args.out) / "dataset.jsonl", samples, dataset_header(config, args.seed or 0))
    summary: dict[str, Any] = {"path": str(path), "samples": len(samples), "motion_len": args.len}
    if samples:
        first = samples[0]
        tokens = write_token_file(Path(args.out) / "sample_0.tokens.jsonl", {"audio": first.audio, **first.motion}, {"index": 0})
        summary["sample_tokens"] = str(tokens)
        h, h_cond = motion_entropies(samples)
        summary["face_entropy_bits"] = round(h, 4)
        summary["face_conditional_entropy_bits"] = round(h_cond, 4)
    print(json.dumps(summary, sort_keys=True))
    return 0


def cmd_train(args) -> int:
    settings = _settings(args)
    header, samples = _load_samples(args.data)
    out = Path(args.out)
    store = MetricsStore(jsonl_path=out / "metrics.jsonl", db_path=args.db, run_id=f"{settings.run.stage}-{settings.run.seed}")
    with tc.default_dtype(np.float64 if args.float64 else np.float32):
        result = trainer.run_stage(
            settings,
            samples,
            out,
            init=args.init,
            resume=args.resume,
            store=store,
            pool_fractions=header.get("task_mix"),
        )
    final = result.history[-1] if result.history else {}
    print(json.dumps({"stage": result.stage, "steps": result.steps, "checkpoint": str(result.checkpoint), "final": final}, sort_keys=True, default=str))
    return 0


def _open_session(args):
    model, meta = trainer.load_backbone(args.checkpoint)
    settings = _settings(args, meta)
    run = settings.run
    interp = None
    if args.interp_checkpoint:
        interp, _ = trainer.load_interp(args.interp_checkpoint)
    mode = args.interp_mode or ("network" if interp is not None else "linear")
    audio = _load_audio(args.audio)
    prefill = _load_prefill(args.prefill, run.stride, run.history_len)
    session = streamer.start_session(
        model,
        interp,
        audio,
        run.history_len,
        run.chunk_len,
        run.stride,
        prefill=prefill,
        sampling=Sampling(args.temperature, seed=run.seed),
        interp_mode=mode,
    )
    return session


def cmd_generate(args) -> int:
    session = _open_session(args)
    report = streamer.run_to_end(session, pipelined=args.pipelined)
    buf = session.buffer
    streams = {p: make_stream(p, buf.dense[i]) for i, p in enumerate(PARTS)}
    meta = {
        "dense_start": buf.dense_start,
        "keyframes": buf.keyframes.tolist(),
        "stride": buf.s,
        "chunk_n": buf.N,
        "chain_head": list(buf.head),
    }
    path = write_token_file(Path(args.out) / "generated.jsonl", streams, meta)
    print(json.dumps({"path": str(path), "frames": report.frames, "decoder_steps": report.decoder_steps}))
    return 0


def cmd_profile(args) -> int:
    session = _open_session(args)
    out = Path(args.out)
    store = MetricsStore(jsonl_path=out / "chunks.jsonl", db_path=args.db)
    report = streamer.run_to_end(session, pipelined=args.pipelined, store=store)
    _write_json(out / "profile.json", report.to_dict())
    print(streamer.format_runtime_table(report))
    return 0


def cmd_eval(args) -> int:
    _, samples = _load_samples(args.data)
    model = interp = None
    meta = None
    if args.checkpoint:
        model, meta = trainer.load_backbone(args.checkpoint)
    if args.interp_checkpoint:
        interp, _ = trainer.load_interp(args.interp_checkpoint)
    if model is None and interp is None:
        raise ValidationError("eval needs --checkpoint and/or --interp-checkpoint")
    run = _settings(args, meta).run

    interp_eval = None
    if interp is not None:
        interp_eval = evalkit.eval_interpolation(interp, samples, run.stride, run.chunk_len * run.stride + 1)
    perplexity = evalkit.eval_perplexity(model, samples, run) if model is not None else None
    diversity = None
    if model is not None and args.n_seeds:
        diversity = evalkit.eval_diversity(
            model,
            interp,
            samples[0].audio,
            args.n_seeds,
            run.history_len,
            run.chunk_len,
            run.stride,
            temperature=args.temperature or 1.0,
            interp_mode="network" if interp is not None else "linear",
        )
    report = evalkit.EvalReport.build(
        interp_eval,
        perplexity,
        diversity,
        evalkit.step_counts(samples[0].motion_len, run.stride, run.chunk_len),
    )
    _write_json(Path(args.out) / "eval.json", report.to_dict())
    print(report.banner)
    return 0


def cmd_inspect_routing(args) -> int:
    model, meta = trainer.load_backbone(args.checkpoint)
    if not model.is_sparse:
        raise ValidationError("checkpoint has no expert layers")
    run = _settings(args, meta).run
    header, samples = _load_samples(args.data)
    pools = trainer.build_pools(len(samples), header.get("task_mix", {}), trainer.STAGE_FAMILIES[run.stage], run.seed)
    stats: dict[str, moe.RoutingStats] = {}
    model.eval()
    with tc.no_grad():
        for step in range(args.batches):
            batch = trainer.make_step_batch(samples, pools, run, model.layout, model.config.max_positions, step)
            loss = trainer.stage_loss(model, batch, run)
            stats = moe.merge_stats(stats, moe.collect_stats(loss.routing))
    collapse = moe.collapse_monitor([stats], args.threshold)
    _write_json(
        Path(args.out) / "routing.json",
        {
            "layers": {name: s.to_dict() for name, s in stats.items()},
            "collapse": {"threshold": collapse.threshold, "shares": collapse.shares, "flagged": collapse.flagged},
        },
    )
    print(moe.format_routing_table(stats))
    return 0


def cmd_gradcheck(args) -> int:
    result = gradcheck.run_suite(args.names or None, tolerance=args.tolerance)
    payload = result.to_dict()
    _write_json(Path(args.out) / "gradcheck.json", payload)
    print(json.dumps({"passed": result.passed, "max_error": {k: r.max_error for k, r in result.reports.items()}}, sort_keys=True))
    return 0 if result.passed else 1


def _add_session_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--checkpoint", required=True, help="Backbone checkpoint directory")
    p.add_argument("--interp-checkpoint", help="Interpolation checkpoint directory")
    p.add_argument("--audio", required=True, help="Token file holding an 'audio' stream")
    p.add_argument("--prefill", help="Token file with ground-truth part streams for the history")
    p.add_argument("--stride", type=int, help="Keyframe stride s")
    p.add_argument("--chunk-n", dest="chunk_n", type=int, help="Keyframes per chunk N")
    p.add_argument("--temperature", type=float, default=0.0, help="Sampling temperature (0 = greedy)")
    p.add_argument("--interp-mode", choices=streamer.INTERP_MODES, help="network or linear in-betweening")
    p.add_argument("--pipelined", action="store_true", help="Overlap decoding with interpolation")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, help="Run seed")
    common.add_argument("--config", help="YAML file with flat config keys")
    common.add_argument("--out", default="out", help="Output directory (default: out)")
    common.add_argument("--verbose", "-v", action="store_true", help="Enable verbose logging")

    parser = CliParser(
        prog="sparse-motion",
        description="Sparse keyframe motion generation from audio tokens",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
    # Synthesize a corpus, pretrain, then upcycle into experts
    sparse-motion synth-data --seed 7 --n 100 --len 120 --out runs/data
    sparse-motion train --stage pretrain --data runs/data/dataset.jsonl --out runs/pre
    sparse-motion train --stage s1 --init runs/pre/checkpoint --data runs/data/dataset.jsonl --out runs/s1

    # Stream keyframes and interpolate to dense frames
    sparse-motion generate --checkpoint runs/s2/checkpoint --interp-checkpoint runs/interp/checkpoint \\
        --audio runs/data/sample_0.tokens.jsonl --out runs/gen
        """,
    )
    sub = parser.add_subparsers(dest="command", required=True, parser_class=CliParser)

    p = sub.add_parser("synth-data", parents=[common], help="Write a synthetic paired corpus")
    p.add_argument("--n", type=int, default=64, help="Number of samples")
    p.add_argument("--len", type=int, default=120, help="Motion frames per sample")
    p.set_defaults(handler=cmd_synth_data)

    p = sub.add_parser("train", parents=[common], help="Run one training stage")
    p.add_argument("--stage", choices=("pretrain", "s1", "s2", "interp"))
    p.add_argument("--data", help="Dataset file from synth-data")
    p.add_argument("--init", help="Checkpoint of the previous stage")
    p.add_argument("--resume", action="store_true", help="Continue <out>/checkpoint")
    p.add_argument("--steps", type=int)
    p.add_argument("--tau", type=float)
    p.add_argument("--lambda-moe", dest="lambda_moe", type=float)
    p.add_argument("--P", dest="history_p", type=int)
    p.add_argument("--N", dest="chunk_n", type=int)
    p.add_argument("--stride", type=int)
    p.add_argument("--window", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--wd", type=float)
    p.add_argument("--batch", type=int)
    p.add_argument("--db", help="Optional DuckDB file for step metrics")
    p.add_argument("--float64", action="store_true", help="Train at 64-bit precision")
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("generate", parents=[common], help="Stream generation from audio tokens")
    _add_session_flags(p)
    p.set_defaults(handler=cmd_generate)

    p = sub.add_parser("profile", parents=[common], help="Profile a streaming session")
    _add_session_flags(p)
    p.add_argument("--db", help="Optional DuckDB file for chunk profiles")
    p.set_defaults(handler=cmd_profile)

    p = sub.add_parser("eval", parents=[common], help="Token-space evaluation report")
    p.add_argument("--data", help="Held-out dataset file")
    p.add_argument("--checkpoint", help="Backbone checkpoint directory")
    p.add_argument("--interp-checkpoint", help="Interpolation checkpoint directory")
    p.add_argument("--stride", type=int)
    p.add_argument("--chunk-n", dest="chunk_n", type=int)
    p.add_argument("--n-seeds", type=int, default=0, help="Seeds for the diversity statistic (0 = skip)")
    p.add_argument("--temperature", type=float, default=1.0)
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser("inspect-routing", parents=[common], help="Per-layer expert routing statistics")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", help="Dataset file")
    p.add_argument("--batches", type=int, default=4)
    p.add_argument("--threshold", type=float, default=0.9, help="Top-1 share flagged as collapse")
    p.set_defaults(handler=cmd_inspect_routing)

    p = sub.add_parser("gradcheck", parents=[common], help="Finite-difference check of every loss")
    p.add_argument("--names", nargs="*", help="Subset of registered checks")
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.set_defaults(handler=cmd_gradcheck)
    return parser


def main(argv: list[str] | None = None) -> int:
    """Main CLI entry point."""
    parser = build_parser()
    args = parser.parse_args(argv)

    logging.basicConfig(level=logging.INFO, format=LOG_FORMAT)
    if args.verbose:
        logging.getLogger().setLevel(logging.DEBUG)

    try:
        return args.handler(args)
    except ValidationError as e:
        logger.debug("Validation error", exc_info=True)
        _emit_error(e.code, str(e))
        return 1
    except Exception as e:
        logger.debug("Runtime error", exc_info=True)
        _emit_error("runtime", str(e))
        return 2


if __name__ == "__main__":
    sys.exit(main())
