"""Stage II: Bi-LSTM across the per-source embeddings and one binary head per label."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import CompoundRecord, DomainSpec
from .embedder import EmbedderConfig, check_sources, embed_batch, embed_record
from .embedder import init_params as init_embedder
from .extractor import init_classifier

ENCODERS = ("bilstm", "concat")


@dataclass
class ModelConfig:
    embedder: EmbedderConfig = field(default_factory=EmbedderConfig)
    hidden: int = 64
    threshold: float = 0.5
    # "concat" feeds the stacked embeddings straight to the heads (no Bi-LSTM)
    encoder: str = "bilstm"

    def __post_init__(self):
        if isinstance(self.embedder, dict):
            self.embedder = EmbedderConfig(**self.embedder)
        if self.hidden < 1:
            raise ValueError("hidden must be >= 1")
        if not 0.0 < self.threshold < 1.0:
            raise ValueError(f"threshold must lie in (0, 1), got {self.threshold}")
        if self.encoder not in ENCODERS:
            raise ValueError(f"encoder must be one of {ENCODERS}, got {self.encoder!r}")

    def to_dict(self) -> dict:
        return asdict(self)


def _glorot(rng: np.random.Generator, shape: tuple[int, int]) -> Tensor:
    limit = math.sqrt(6.0 / sum(shape))
    return Tensor(rng.uniform(-limit, limit, size=shape), requires_grad=True)


def init_encoder(input_dim: int, hidden: int, rng: np.random.Generator) -> dict[str, Tensor]:
    params = {}
    for direction in ("fwd", "bwd"):
        params[f"lstm.{direction}.w_x"] = _glorot(rng, (input_dim, 4 * hidden))
        params[f"lstm.{direction}.w_h"] = _glorot(rng, (hidden, 4 * hidden))
        params[f"lstm.{direction}.b"] = Tensor(np.zeros(4 * hidden), requires_grad=True)
    return params


def init_heads(input_dim: int, q: int, rng: np.random.Generator) -> dict[str, Tensor]:
    return {"heads.W": _glorot(rng, (input_dim, q)), "heads.b": Tensor(np.zeros(q), requires_grad=True)}


def init_model(specs: Sequence[DomainSpec], q: int, cfg: ModelConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    """All parameters of the framework, in a fixed order.

    Checks every source against the embedder's shape algebra first, so a source
    that is too short fails here rather than mid-training.
    """
    check_sources(specs, cfg.embedder)
    k = len(specs)
    e = cfg.embedder.embedding_dim
    params = init_embedder(cfg.embedder, rng)
    params.update(init_classifier(e, k, rng))
    if cfg.encoder == "bilstm":
        params.update(init_encoder(e, cfg.hidden, rng))
        params.update(init_heads(2 * cfg.hidden, q, rng))
    else:
        params.update(init_heads(k * e, q, rng))
    return params


def _run_direction(steps: Sequence[Tensor], params: Mapping[str, Tensor], direction: str) -> Tensor:
    w_x, w_h, b = (params[f"lstm.{direction}.{n}"] for n in ("w_x", "w_h", "b"))
    hidden = w_h.shape[0]
    lead = steps[0].shape[:-1]
    h = Tensor(np.zeros(lead + (hidden,)))
    c = Tensor(np.zeros(lead + (hidden,)))
    for x in steps:
        h, c = ad.lstm_cell(x, h, c, w_x, w_h, b)
    return h


def encode_sequence(embeddings: Sequence[Tensor], params: Mapping[str, Tensor]) -> Tensor:
    """Final forward state after the last source ⊕ final backward state after the first.

    ``embeddings`` is the EmbeddingSet in domain-id order; each entry is ``(E,)``
    or a batch ``(N, E)``. Output is ``(2H,)`` or ``(N, 2H)``.
    """
    if len(embeddings) == 0:
        raise ValueError("encode_sequence needs at least one embedding")
    forward = _run_direction(embeddings, params, "fwd")
    backward = _run_direction(list(reversed(embeddings)), params, "bwd")
    return ad.concat([forward, backward], axis=-1)


def head_logits(embeddings: Sequence[Tensor], params: Mapping[str, Tensor], cfg: ModelConfig) -> Tensor:
    if cfg.encoder == "bilstm":
        shared = encode_sequence(embeddings, params)
    else:
        shared = ad.concat(list(embeddings), axis=-1)
    return ad.add(ad.matmul(shared, params["heads.W"]), params["heads.b"])


def batch_logits(
    features: Mapping[int, np.ndarray], params: Mapping[str, Tensor], cfg: ModelConfig
) -> tuple[Tensor, list[Tensor]]:
    """Logits ``(N, q)`` for ``{domain_id: (N, L_j)}``, plus the embeddings used."""
    embeddings = embed_batch(features, params, cfg.embedder)
    return head_logits(embeddings, params, cfg), embeddings


def predict_scores(
    rec: CompoundRecord, params: Mapping[str, Tensor], cfg: ModelConfig, specs: Sequence[DomainSpec]
) -> Tensor:
    """Raw logits ``(q,)`` for one record: embed, encode, affine heads."""
    embeddings = embed_record(rec, params, cfg.embedder, specs)
    return head_logits(embeddings, params, cfg)


def stage2_loss(logits: Tensor, y) -> Tensor:
    """Sigmoid cross-entropy summed over labels and averaged over the batch."""
    target = np.asarray(y, dtype=np.float64)
    if target.shape != logits.shape:
        raise ad.ShapeError(f"logits {logits.shape} vs labels {target.shape}")
    if not np.isin(target, (0.0, 1.0)).all():
        raise ValueError("labels must be binary")
    per = ad.sigmoid_cross_entropy(logits, target)
    n = 1 if logits.data.ndim == 1 else logits.shape[0]
    return ad.mul(ad.sum_(per), 1.0 / n)


def predict_labels(logits, threshold: float = 0.5) -> np.ndarray:
    """Bit j is set iff sigmoid(logit_j) >= threshold."""
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    x = logits.data if isinstance(logits, Tensor) else np.asarray(logits, dtype=np.float64)
    return (ad.stable_sigmoid(x) >= threshold).astype(np.int8)
