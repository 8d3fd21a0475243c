"""Heterogeneous-domain embedding with a two-stage multi-label trainer.

A shared 1-D CNN with RoI pooling turns each raw feature source into a
fixed-length embedding. Stage I trains it to tell the sources apart, and
Stage II reads the per-source embeddings with a Bi-LSTM into one sigmoid head
per label. Everything runs on the small reverse-mode engine in ``autodiff``.
"""

from .autodiff import Tape, Tensor, backward, grad_check
from .checkpoint import Checkpoint
from .config import TrainConfig
from .data import CompoundRecord, Dataset, DomainSpec, synth_generate
from .embedder import EmbedderConfig
from .metrics import (
    EvalBatch,
    average_precision,
    coverage,
    hamming_loss,
    one_error,
    oracle_metrics,
    ranking_loss,
)
from .multitask import ModelConfig

__version__ = "0.1.0"

__all__ = [
    "Checkpoint",
    "CompoundRecord",
    "Dataset",
    "DomainSpec",
    "EmbedderConfig",
    "EvalBatch",
    "ModelConfig",
    "Tape",
    "Tensor",
    "TrainConfig",
    "average_precision",
    "backward",
    "coverage",
    "grad_check",
    "hamming_loss",
    "one_error",
    "oracle_metrics",
    "ranking_loss",
    "synth_generate",
]
