#!/usr/bin/env python3
"""
Decoder-step and throughput scaling across keyframe strides.

Runs one streaming session per (stride, N) on a synthetic audio stream and
writes the table as JSON. Models are freshly initialized unless checkpoint
directories are given; step counts do not depend on weights, FPS and TTFF do.

Usage:
    python bench/stride_scaling.py --strides 4 6 8 --chunk-n 2 5 --out runs/scaling.json
    python bench/stride_scaling.py --checkpoint 4=runs/s4/checkpoint --checkpoint 6=runs/s6/checkpoint
"""

import argparse
import json
import logging
import os
import sys
from pathlib import Path

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from sparsemotion.backbone import build_model  # noqa: E402
from sparsemotion.config import load_settings  # noqa: E402
from sparsemotion.interpnet import InterpNet  # noqa: E402
from sparsemotion.streamer import compare_strides  # noqa: E402
from sparsemotion.tokenstream import synth_sample  # noqa: E402
from sparsemotion.trainer import load_backbone, load_interp  # noqa: E402

logger = logging.getLogger(__name__)


def _parse_pairs(values: list[str] | None) -> dict[int, str]:
    pairs = {}
    for value in values or []:
        stride, _, path = value.partition("=")
        pairs[int(stride)] = path
    return pairs


def main() -> int:
    parser = argparse.ArgumentParser(description="Stride scaling benchmark")
    parser.add_argument("--strides", type=int, nargs="+", default=[4, 6, 8])
    parser.add_argument("--chunk-n", type=int, nargs="+", default=[2, 5])
    parser.add_argument("--frames", type=int, default=240, help="Motion frames of the synthetic clip")
    parser.add_argument("--config", help="YAML file with flat config keys")
    parser.add_argument("--checkpoint", action="append", help="stride=path to a backbone checkpoint")
    parser.add_argument("--interp-checkpoint", action="append", help="stride=path to an interpolation checkpoint")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--out", default="stride_scaling.json")
    args = parser.parse_args()

    logging.basicConfig(level=logging.INFO, format="%(asctime)s - %(name)s - %(levelname)s - %(message)s")

    settings = load_settings(args.config, {"seed": args.seed})
    backbones = _parse_pairs(args.checkpoint)
    interps = _parse_pairs(args.interp_checkpoint)
    models = {}
    for s in args.strides:
        model = load_backbone(backbones[s])[0] if s in backbones else build_model(settings.backbone, args.seed, sparse=True)
        interp = load_interp(interps[s])[0] if s in interps else InterpNet(settings.interp, args.seed)
        models[s] = (model, interp)

    audio = synth_sample(args.seed, 0, args.frames).audio
    rows = compare_strides(models, args.strides, args.chunk_n, audio, settings.run.history_len)

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps([row.to_dict() for row in rows], indent=2) + "\n")
    for row in rows:
        print(
            f"s={row.stride:<2d} N={row.chunk_n:<2d} steps={row.decoder_steps:<5d} "
            f"ratio={row.step_ratio:.3f} fps={row.fps:8.1f} ttff={row.ttff_ms:7.1f}ms"
        )
    logger.info("Wrote %s", out)
    return 0


if __name__ == "__main__":
    sys.exit(main())
