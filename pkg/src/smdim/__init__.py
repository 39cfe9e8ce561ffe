"""Masked discrete diffusion over REMI tokens with a Mamba/FFN/attention denoiser."""

from .diffusion import AbsorbingKernel, make_schedule, sample
from .midi import Note, Score, parse_midi, write_midi
from .model import ModelConfig, init_parameters, smdim_forward
from .remi import Vocabulary, build_vocabulary, decode, encode
from .tensor import Tape, Tensor, backward

__version__ = "0.1.0"

__all__ = [
    "AbsorbingKernel", "make_schedule", "sample",
    "Note", "Score", "parse_midi", "write_midi",
    "ModelConfig", "init_parameters", "smdim_forward",
    "Vocabulary", "build_vocabulary", "decode", "encode",
    "Tape", "Tensor", "backward",
]
