"""Simultaneous translation with a mixture of wait-k attention experts."""

from .data import Vocab, generate_task
from .model import ModelConfig, Transformer
from .policy import UNBOUNDED, schedule_g, simulate_stream
from .training import TrainConfig, run_training

__all__ = ["Vocab", "generate_task", "ModelConfig", "Transformer", "UNBOUNDED", "schedule_g",
           "simulate_stream", "TrainConfig", "run_training"]
__version__ = "0.1.0"
