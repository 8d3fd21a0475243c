"""Stage I: softmax classification of which feature source an embedding came from.

Training the shared embedder against this classifier pushes the sources apart
(more domain-specific embeddings), the opposite of gradient-reversal schemes.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable, Mapping, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import Dataset
from .embedder import EmbedderConfig, embed_batch

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    """A loss became NaN or infinite."""


def init_classifier(embedding_dim: int, k: int, rng: np.random.Generator) -> dict[str, Tensor]:
    limit = math.sqrt(6.0 / (embedding_dim + k))
    return {
        "domain.W": Tensor(rng.uniform(-limit, limit, size=(embedding_dim, k)), requires_grad=True),
        "domain.b": Tensor(np.zeros(k), requires_grad=True),
    }


def domain_logits(e: Tensor, params: Mapping[str, Tensor]) -> Tensor:
    w, b = params["domain.W"], params["domain.b"]
    if e.shape[-1] != w.shape[0]:
        raise ad.ShapeError(f"embedding length {e.shape[-1]} != classifier input {w.shape[0]}")
    return ad.add(ad.matmul(e, w), b)


def classify_domain(e: Tensor, params: Mapping[str, Tensor]) -> Tensor:
    """Probability over source types for one embedding (or a batch)."""
    return ad.softmax(domain_logits(e, params))


def source_nll(embeddings: Tensor, source_ids: Sequence[int], params: Mapping[str, Tensor]) -> Tensor:
    """Mean negative log-likelihood of the true source; ``embeddings`` is ``(n, E)``."""
    ids = np.asarray(source_ids, dtype=np.int64)
    if embeddings.data.ndim != 2 or len(ids) != embeddings.shape[0]:
        raise ad.ShapeError(f"need (n, E) embeddings and n ids, got {embeddings.shape} and {len(ids)}")
    if len(ids) == 0:
        raise ValueError("stage-1 loss needs a non-empty batch")
    k = params["domain.b"].shape[0]
    if ids.min() < 0 or ids.max() >= k:
        raise ValueError(f"source ids must lie in [0, {k}), got {sorted(set(ids.tolist()))}")
    onehot = np.zeros((len(ids), k))
    onehot[np.arange(len(ids)), ids] = 1.0
    logp = ad.log_softmax(domain_logits(embeddings, params))
    return ad.mul(ad.sum_(ad.mul(logp, onehot)), -1.0 / len(ids))


def stage1_loss(batch: Sequence[tuple[Tensor, int]], params: Mapping[str, Tensor]) -> Tensor:
    """Loss over explicit ``(embedding, source id)`` pairs."""
    if not batch:
        raise ValueError("stage-1 loss needs a non-empty batch")
    return source_nll(ad.stack([e for e, _ in batch]), [s for _, s in batch], params)


def stage1_batch_loss(per_domain: Sequence[Tensor], params: Mapping[str, Tensor]) -> Tensor:
    """Loss for a stratified batch: one ``(N, E)`` block per source, in id order."""
    n = per_domain[0].shape[0]
    ids = np.repeat(np.arange(len(per_domain)), n)
    return source_nll(ad.concat(per_domain, axis=0), ids, params)


def source_accuracy(ds: Dataset, params: Mapping[str, Tensor], cfg: EmbedderConfig, batch_size: int = 256) -> float:
    """Fraction of (record, source) pairs whose source is the argmax."""
    if ds.m == 0:
        raise ValueError("accuracy needs a non-empty dataset")
    hits = total = 0
    for start in range(0, ds.m, batch_size):
        part = ds.records[start : start + batch_size]
        feats = {s.id: np.stack([r.features[s.id] for r in part]) for s in ds.specs}
        for d, e in enumerate(embed_batch(feats, params, cfg)):
            pred = domain_logits(e, params).data.argmax(axis=-1)
            hits += int((pred == d).sum())
            total += len(part)
    return hits / total


@dataclass
class Stage1Result:
    params: dict[str, Tensor]
    history: list[dict]


def pretrain_stage1(
    train: Dataset,
    params: dict[str, Tensor],
    cfg: EmbedderConfig,
    optimizer,
    epochs: int,
    batch_size: int,
    rng: np.random.Generator,
    holdout: Optional[Dataset] = None,
    early_stop_accuracy: float = 0.99,
    patience: int = 5,
    on_epoch: Optional[Callable[[dict], None]] = None,
) -> Stage1Result:
    """Fit embedder + source classifier by minimising the source NLL.

    Every batch carries all sources of its records, so each step sees all k
    classes. Stops early once held-out accuracy stays at or above
    ``early_stop_accuracy`` for ``patience`` consecutive epochs. Only the
    ``embed.*`` and ``domain.*`` entries of ``params`` are updated.
    """
    if train.m == 0:
        raise ValueError("stage 1 needs a non-empty training set")
    trainable = [n for n in params if n.startswith(("embed.", "domain."))]
    params = dict(params)
    history: list[dict] = []
    streak = 0
    eval_set = holdout if holdout is not None and holdout.m else train
    for epoch in range(1, epochs + 1):
        order = rng.permutation(train.m)
        total, batches = 0.0, 0
        for b, start in enumerate(range(0, train.m, batch_size)):
            part = [train.records[i] for i in order[start : start + batch_size]]
            feats = {s.id: np.stack([r.features[s.id] for r in part]) for s in train.specs}
            with ad.Tape() as tape:
                loss = stage1_batch_loss(embed_batch(feats, params, cfg), params)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingDiverged(f"stage 1: non-finite loss {value} at epoch {epoch}, batch {b}")
            ad.backward(loss, tape)
            params = optimizer.step(params, trainable)
            total += value
            batches += 1
        acc = source_accuracy(eval_set, params, cfg)
        row = {"epoch": epoch, "loss": total / batches, "holdout_accuracy": acc}
        history.append(row)
        log.info("stage1 epoch %d loss %.5f holdout_acc %.4f", epoch, row["loss"], acc)
        if on_epoch:
            on_epoch(row)
        streak = streak + 1 if acc >= early_stop_accuracy else 0
        if streak >= patience:
            break
    return Stage1Result(params, history)
