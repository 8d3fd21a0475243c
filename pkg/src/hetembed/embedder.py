"""Shared 1-D CNN that turns a raw feature vector of any length into a fixed-size embedding.

Pipeline per source: conv -> relu -> maxpool -> conv -> relu -> maxpool -> conv
-> relu -> RoI pool -> flatten. Each raw vector is read as a single-channel
sequence, and the same parameters serve every source.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import CompoundRecord, DomainSpec

Params = dict[str, Tensor]

CONV_NAMES = ("embed.conv1", "embed.conv2", "embed.conv3")


@dataclass
class EmbedderConfig:
    channels: list[int] = field(default_factory=lambda: [32, 48, 96])
    kernel_width: int = 8
    pool_width: int = 4
    # stride 1 keeps 80-feature sources admissible under the default stack
    pool_stride: int = 1
    roi_bins: int = 32

    def __post_init__(self):
        if len(self.channels) != 3 or any(c < 1 for c in self.channels):
            raise ValueError(f"channels must be three positive ints, got {self.channels}")
        for name in ("kernel_width", "pool_width", "pool_stride", "roi_bins"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")

    @property
    def embedding_dim(self) -> int:
        return self.channels[2] * self.roi_bins

    def to_dict(self) -> dict:
        return asdict(self)


class SourceTooShortError(ValueError):
    pass


def output_length(length: int, cfg: EmbedderConfig) -> int:
    """Length of the last conv feature map, or a value < 1 if the stack does not fit."""
    for layer in range(3):
        if length < cfg.kernel_width:
            return 0
        length = ad.conv_output_length(length, cfg.kernel_width)
        if layer < 2:
            if length < cfg.pool_width:
                return 0
            length = ad.pool_output_length(length, cfg.pool_width, cfg.pool_stride)
    return length


def min_source_length(cfg: EmbedderConfig) -> int:
    """Smallest raw length the stack accepts, by inverting the shape algebra."""
    need = cfg.kernel_width  # input of conv3
    for _ in range(2):
        need = (need - 1) * cfg.pool_stride + cfg.pool_width  # input of the pool
        need = need + cfg.kernel_width - 1  # input of the conv before it
    return need


def check_sources(specs: Sequence[DomainSpec], cfg: EmbedderConfig) -> None:
    """Fail at build time if any source is too short for the conv/pool stack."""
    need = min_source_length(cfg)
    for s in specs:
        if s.dim < need:
            raise SourceTooShortError(
                f"source {s.name!r} has {s.dim} features; the embedder needs at least {need}"
            )


def init_params(cfg: EmbedderConfig, rng: np.random.Generator) -> Params:
    params: Params = {}
    c_in = 1
    for name, c_out in zip(CONV_NAMES, cfg.channels):
        fan_in, fan_out = c_in * cfg.kernel_width, c_out * cfg.kernel_width
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        params[f"{name}.kernels"] = Tensor(
            rng.uniform(-limit, limit, size=(c_out, c_in, cfg.kernel_width)), requires_grad=True
        )
        params[f"{name}.bias"] = Tensor(np.zeros(c_out), requires_grad=True)
        c_in = c_out
    return params


def embed_source(raw, params: Mapping[str, Tensor], cfg: EmbedderConfig) -> Tensor:
    """Embed one source: ``(L,)`` -> ``(E,)`` or a batch ``(N, L)`` -> ``(N, E)``."""
    x = raw if isinstance(raw, Tensor) else Tensor(raw)
    batched = x.data.ndim == 2
    if x.data.ndim not in (1, 2):
        raise ad.ShapeError(f"embed_source expects (L,) or (N, L), got {x.shape}")
    length = x.shape[-1]
    if output_length(length, cfg) < 1:
        raise SourceTooShortError(f"raw length {length} is below the minimum {min_source_length(cfg)}")
    h = ad.reshape(x, (x.shape[0], 1, length) if batched else (1, length))
    for layer, name in enumerate(CONV_NAMES):
        h = ad.relu(ad.conv1d(h, params[f"{name}.kernels"], params[f"{name}.bias"]))
        if layer < 2:
            h = ad.max_pool1d(h, cfg.pool_width, cfg.pool_stride)
    h = ad.roi_pool1d(h, cfg.roi_bins)
    return ad.reshape(h, (x.shape[0], cfg.embedding_dim) if batched else (cfg.embedding_dim,))


def embed_record(rec: CompoundRecord, params: Mapping[str, Tensor], cfg: EmbedderConfig, specs: Sequence[DomainSpec]) -> list[Tensor]:
    """EmbeddingSet for one record, ordered by domain id."""
    out = []
    for s in sorted(specs, key=lambda s: s.id):
        if s.id not in rec.features:
            raise KeyError(f"record {rec.id!r} has no source {s.name!r} (id {s.id})")
        out.append(embed_source(rec.features[s.id], params, cfg))
    return out


def embed_batch(
    features: Mapping[int, np.ndarray], params: Mapping[str, Tensor], cfg: EmbedderConfig
) -> list[Tensor]:
    """Embeddings for a batch: ``{domain_id: (N, L_j)}`` -> list of ``(N, E)`` by domain id."""
    return [embed_source(features[d], params, cfg) for d in sorted(features)]
