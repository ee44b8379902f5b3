"""
sparse-motion: streaming keyframe motion generation from discrete audio tokens.

A prefix language model with upcycled expert layers decodes sparse motion
keyframes; a bidirectional interpolation network fills the frames between them.
"""

from .backbone import PrefixLM, build_model
from .interpnet import InterpNet
from .streamer import run_to_end, start_session
from .trainer import run_stage

__version__ = "0.1.0"
__all__ = ["InterpNet", "PrefixLM", "build_model", "run_stage", "run_to_end", "start_session"]
