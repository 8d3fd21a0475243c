"""Two-stage training, evaluation, prediction, the linear baseline and the ablation ladder."""

from __future__ import annotations

import copy
import csv
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .checkpoint import Checkpoint
from .config import TrainConfig
from .data import (
    ATC_CLASSES,
    DataError,
    Dataset,
    DomainSpec,
    Standardizer,
    assemble_dataset,
    load_domain_csv,
    load_labels_csv,
    split,
    split_checksum,
    synth_generate,
)
from .extractor import TrainingDiverged, pretrain_stage1, stage1_batch_loss
from .metrics import EvalBatch, MetricRow, average_precision, metric_report, report_csv
from .multitask import ModelConfig, batch_logits, init_model, predict_labels, stage2_loss
from .optim import make_optimizer

log = logging.getLogger(__name__)

VARIANTS = {
    "linear_combination": "(a) raw features concatenated, one logistic regression per label",
    "cnn": "(b) CNN embeddings concatenated into the heads, no Bi-LSTM, no Stage I",
    "cnn_bilstm": "(c) CNN + Bi-LSTM, no Stage I",
    "cnn_bilstm_domain_specific": "(d) Stage I pretraining, then CNN + Bi-LSTM",
}


class SpecMismatchError(DataError):
    pass


# --------------------------------------------------------------------- data


def load_dataset(cfg: TrainConfig) -> Dataset:
    """Dataset from CSV files when ``data.domains`` is set, else from the generator."""
    d = cfg.data
    if d.domains:
        specs = [DomainSpec(i, e.name, e.dim) for i, e in enumerate(d.domains)]
        maps = []
        for spec, entry in zip(specs, d.domains):
            if not entry.path:
                raise DataError(f"domain {entry.name!r} has no path")
            maps.append(load_domain_csv(entry.path, spec))
        names = tuple(d.label_names) if d.label_names else ATC_CLASSES
        labels = load_labels_csv(d.labels, names) if d.labels else None
        return assemble_dataset(maps, specs, labels, d.replicate_on, d.impute, names)
    if d.synthetic is None:
        raise DataError("config has neither data.domains nor data.synthetic")
    s = d.synthetic
    return synth_generate(
        k=s.k,
        dims=s.dims,
        q=s.q,
        m=s.m,
        dependency=s.dependency,
        seed=cfg.seed,
        signature=s.signature,
        noise=s.noise,
        linear=s.linear,
    )


@dataclass
class Splits:
    train: Dataset
    val: Dataset
    test: Dataset
    standardizer: Standardizer
    checksum: str


def prepare_splits(cfg: TrainConfig, ds: Dataset) -> Splits:
    tr, va, te = split(ds, cfg.data.split, cfg.seed, cfg.data.group_by_compound)
    checksum = split_checksum(tr, va, te)
    st = Standardizer.fit(tr) if cfg.data.standardize else Standardizer.identity(ds.specs)
    return Splits(st.apply(tr), st.apply(va), st.apply(te), st, checksum)


def _streams(seed: int) -> dict[str, np.random.Generator]:
    names = ("embedder", "stage1", "stage2", "linear")
    seqs = np.random.SeedSequence(seed).spawn(len(names))
    return {n: np.random.default_rng(s) for n, s in zip(names, seqs)}


def _features(records, specs) -> dict[int, np.ndarray]:
    return {s.id: np.stack([r.features[s.id] for r in records]) for s in specs}


# ----------------------------------------------------------------- scoring


def _threads() -> int:
    raw = os.environ.get("HETEMBED_THREADS")
    if raw:
        try:
            return max(1, int(raw))
        except ValueError:
            log.warning("ignoring HETEMBED_THREADS=%r", raw)
    return os.cpu_count() or 1


def compute_logits(ds: Dataset, params, model_cfg: ModelConfig, chunk: int = 128) -> np.ndarray:
    """Logits ``(m, q)`` for every record, in record order."""
    if ds.m == 0:
        return np.zeros((0, params["heads.b"].shape[0]))
    starts = list(range(0, ds.m, chunk))

    def run(start: int) -> np.ndarray:
        feats = _features(ds.records[start : start + chunk], ds.specs)
        return batch_logits(feats, params, model_cfg)[0].data

    workers = min(_threads(), len(starts))
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            parts = list(pool.map(run, starts))
    else:
        parts = [run(s) for s in starts]
    return np.concatenate(parts, axis=0)


def eval_batch(ds: Dataset, scores: np.ndarray, threshold: float) -> EvalBatch:
    return EvalBatch(scores, ds.labels(), predict_labels(scores, threshold))


def _val_ap(ds: Dataset, scores: np.ndarray) -> float:
    b = EvalBatch(scores, ds.labels())
    return average_precision(b.subset(b.true.any(axis=1)))


# ------------------------------------------------------------------- train


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    stage1_history: list[dict]
    stage2_history: list[dict]
    splits: Splits
    checkpoint_sha256: Optional[str] = None
    files: dict[str, str] = field(default_factory=dict)


def train(cfg: TrainConfig, out_dir=None, dataset: Optional[Dataset] = None) -> TrainResult:
    """Stage I (source classification) then Stage II (multi-label) training.

    Stage II updates the embedder together with the Bi-LSTM and heads; with
    ``stage2.aux_ext_weight > 0`` the Stage I loss is added to its objective.
    The parameters with the best validation Average Precision are kept.
    """
    ds = dataset if dataset is not None else load_dataset(cfg)
    if ds.m == 0:
        raise DataError("dataset is empty")
    if not ds.labeled:
        raise DataError("training needs labels for every record")
    splits = prepare_splits(cfg, ds)
    rngs = _streams(cfg.seed)
    params = init_model(ds.specs, ds.q, cfg.model, rngs["embedder"])

    stage1_history: list[dict] = []
    if cfg.stage1.enabled and cfg.stage1.epochs > 0:
        result = pretrain_stage1(
            splits.train,
            params,
            cfg.model.embedder,
            make_optimizer(cfg.optimizer),
            cfg.stage1.epochs,
            cfg.stage1.batch_size,
            rngs["stage1"],
            holdout=splits.val,
            early_stop_accuracy=cfg.stage1.early_stop_accuracy,
            patience=cfg.stage1.patience,
        )
        params, stage1_history = result.params, result.history

    params, stage2_history = _train_stage2(cfg, splits, params, rngs["stage2"])
    ckpt = Checkpoint(cfg, list(ds.specs), ds.label_names, splits.standardizer, params)
    res = TrainResult(ckpt, stage1_history, stage2_history, splits)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        res.checkpoint_sha256 = ckpt.save(out / "model.ckpt")
        write_history(out / "stage1_history.csv", stage1_history, ["epoch", "loss", "holdout_accuracy"])
        write_history(out / "stage2_history.csv", stage2_history, ["epoch", "loss", "val_average_precision"])
        res.files = {
            "checkpoint": str(out / "model.ckpt"),
            "stage1_history": str(out / "stage1_history.csv"),
            "stage2_history": str(out / "stage2_history.csv"),
        }
    return res


def _train_stage2(cfg: TrainConfig, splits: Splits, params, rng):
    s2 = cfg.stage2
    aux = s2.aux_ext_weight
    prefixes = ("embed.", "lstm.", "heads.") + (("domain.",) if aux > 0 else ())
    trainable = [n for n in params if n.startswith(prefixes)]
    opt = make_optimizer(cfg.optimizer)
    train_set, val_set = splits.train, splits.val
    history = []
    val_ds = val_set if val_set.m else train_set
    best_ap = _val_ap(val_ds, compute_logits(val_ds, params, cfg.model))
    history.append({"epoch": 0, "loss": float("nan"), "val_average_precision": best_ap})
    best = dict(params)
    stale = 0
    for epoch in range(1, s2.epochs + 1):
        order = rng.permutation(train_set.m)
        total, batches = 0.0, 0
        for b, start in enumerate(range(0, train_set.m, s2.batch_size)):
            part = [train_set.records[i] for i in order[start : start + s2.batch_size]]
            feats = _features(part, train_set.specs)
            y = np.stack([r.label for r in part]).astype(np.float64)
            with ad.Tape() as tape:
                logits, embeddings = batch_logits(feats, params, cfg.model)
                loss = stage2_loss(logits, y)
                if aux > 0:
                    loss = ad.add(loss, ad.mul(stage1_batch_loss(embeddings, params), aux))
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingDiverged(f"stage 2: non-finite loss {value} at epoch {epoch}, batch {b}")
            ad.backward(loss, tape)
            params = opt.step(params, trainable)
            total += value
            batches += 1
        ap = _val_ap(val_ds, compute_logits(val_ds, params, cfg.model))
        history.append({"epoch": epoch, "loss": total / batches, "val_average_precision": ap})
        log.info("stage2 epoch %d loss %.5f val_ap %.4f", epoch, total / batches, ap)
        if ap > best_ap:
            best_ap, best, stale = ap, dict(params), 0
        else:
            stale += 1
            if stale >= s2.patience:
                break
    return best, history


def write_history(path, rows: Sequence[dict], columns: Sequence[str]) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([repr(row[c]) if isinstance(row[c], float) else row[c] for c in columns])


# --------------------------------------------------------- evaluate/predict


def check_compatible(ckpt: Checkpoint, ds: Dataset) -> None:
    theirs = {s.id: s for s in ds.specs}
    for s in ckpt.specs:
        other = theirs.get(s.id)
        if other is None or other.name != s.name or other.dim != s.dim:
            found = f"{other.name!r} (dim {other.dim})" if other else "nothing"
            raise SpecMismatchError(f"domain {s.id}: checkpoint has {s.name!r} (dim {s.dim}), dataset has {found}")
    if len(ds.specs) != len(ckpt.specs):
        raise SpecMismatchError(f"dataset has {len(ds.specs)} domains, checkpoint {len(ckpt.specs)}")
    for r in ds.records:
        for s in ckpt.specs:
            if s.id not in r.features:
                raise SpecMismatchError(f"record {r.id!r} is missing domain {s.name!r}")


def evaluate(ckpt: Checkpoint, ds: Dataset, out_dir=None) -> list[MetricRow]:
    """All five metrics over ``ds``; writes ``metrics.csv`` when ``out_dir`` is given."""
    if ds.m == 0:
        raise DataError("cannot evaluate on an empty dataset")
    check_compatible(ckpt, ds)
    if not ds.labeled:
        raise DataError("evaluation needs labels for every record")
    data = ckpt.standardizer.apply(ds)
    scores = compute_logits(data, ckpt.params, ckpt.config.model)
    rows = metric_report(eval_batch(data, scores, ckpt.config.model.threshold))
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.csv").write_text(report_csv(rows), encoding="utf-8")
    return rows


@dataclass
class Prediction:
    ids: list[str]
    logits: np.ndarray
    labels: np.ndarray
    label_names: tuple[str, ...]

    @property
    def empty(self) -> np.ndarray:
        return ~self.labels.any(axis=1)

    def to_csv(self, path) -> None:
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(
                ["id"]
                + [f"logit_{n}" for n in self.label_names]
                + [f"pred_{n}" for n in self.label_names]
                + ["empty_prediction"]
            )
            for i, key in enumerate(self.ids):
                w.writerow(
                    [key]
                    + [repr(float(v)) for v in self.logits[i]]
                    + [int(v) for v in self.labels[i]]
                    + [int(self.empty[i])]
                )


def predict(ckpt: Checkpoint, ds: Dataset, out_path=None) -> Prediction:
    """Logits and thresholded label sets per record; labels in ``ds`` are ignored."""
    if ds.m == 0:
        raise DataError("cannot predict on an empty dataset")
    check_compatible(ckpt, ds)
    data = ckpt.standardizer.apply(ds)
    scores = compute_logits(data, ckpt.params, ckpt.config.model)
    pred = Prediction(ds.ids(), scores, predict_labels(scores, ckpt.config.model.threshold), ckpt.label_names)
    if out_path is not None:
        pred.to_csv(out_path)
    return pred


# ---------------------------------------------------------- linear baseline


@dataclass
class BaselineResult:
    params: dict[str, Tensor]
    history: list[dict]
    report: list[MetricRow]
    val_scores: np.ndarray


def _concat_raw(ds: Dataset) -> np.ndarray:
    return np.hstack([ds.features(s.id) for s in sorted(ds.specs, key=lambda s: s.id)])


def baseline_linear(cfg: TrainConfig, splits: Splits) -> BaselineResult:
    """One logistic regression per label on the concatenated raw features.

    Trained with the same sigmoid cross-entropy, optimizer, batch size, epoch
    budget and early stopping as Stage II; scored on the validation split.
    """
    if splits.train.m == 0:
        raise DataError("baseline needs a non-empty training set")
    rng = _streams(cfg.seed)["linear"]
    x_train, y_train = _concat_raw(splits.train), splits.train.labels().astype(np.float64)
    val = splits.val if splits.val.m else splits.train
    x_val = _concat_raw(val)
    d, q = x_train.shape[1], y_train.shape[1]
    limit = math.sqrt(6.0 / (d + q))
    params = {
        "linear.W": Tensor(rng.uniform(-limit, limit, size=(d, q)), requires_grad=True),
        "linear.b": Tensor(np.zeros(q), requires_grad=True),
    }
    names = list(params)

    def scores(p, x):
        return x @ p["linear.W"].data + p["linear.b"].data

    opt = make_optimizer(cfg.optimizer)
    best_ap = _val_ap(val, scores(params, x_val))
    best, stale = dict(params), 0
    history = [{"epoch": 0, "loss": float("nan"), "val_average_precision": best_ap}]
    bs = cfg.stage2.batch_size
    for epoch in range(1, cfg.stage2.epochs + 1):
        order = rng.permutation(len(x_train))
        total, batches = 0.0, 0
        for start in range(0, len(x_train), bs):
            idx = order[start : start + bs]
            with ad.Tape() as tape:
                logits = ad.add(ad.matmul(Tensor(x_train[idx]), params["linear.W"]), params["linear.b"])
                loss = stage2_loss(logits, y_train[idx])
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingDiverged(f"linear baseline: non-finite loss {value} at epoch {epoch}")
            ad.backward(loss, tape)
            params = opt.step(params, names)
            total += value
            batches += 1
        ap = _val_ap(val, scores(params, x_val))
        history.append({"epoch": epoch, "loss": total / batches, "val_average_precision": ap})
        if ap > best_ap:
            best_ap, best, stale = ap, dict(params), 0
        else:
            stale += 1
            if stale >= cfg.stage2.patience:
                break
    val_scores = scores(best, x_val)
    report = metric_report(eval_batch(val, val_scores, cfg.model.threshold))
    return BaselineResult(best, history, report, val_scores)


# ---------------------------------------------------------- ablation ladder


@dataclass
class LadderRow:
    variant: str
    metrics: dict[str, float]
    split_checksum: str


def variant_config(cfg: TrainConfig, variant: str) -> TrainConfig:
    v = copy.deepcopy(cfg)
    if variant in ("cnn", "cnn_bilstm"):
        # no domain extractor at all: neither pretraining nor the auxiliary term
        v.model.encoder = "concat" if variant == "cnn" else "bilstm"
        v.stage1.enabled = False
        v.stage2.aux_ext_weight = 0.0
    elif variant == "cnn_bilstm_domain_specific":
        v.model.encoder = "bilstm"
        v.stage1.enabled = True
    elif variant != "linear_combination":
        raise ValueError(f"unknown variant {variant!r}")
    return v


def run_ablation_ladder(
    cfg: TrainConfig, dataset: Optional[Dataset] = None, variants: Sequence[str] = tuple(VARIANTS)
) -> list[LadderRow]:
    """Train every variant on one shared split and score each on validation."""
    ds = dataset if dataset is not None else load_dataset(cfg)
    splits = prepare_splits(cfg, ds)
    rows = []
    for variant in variants:
        vcfg = variant_config(cfg, variant)
        if variant == "linear_combination":
            report = baseline_linear(vcfg, splits).report
        else:
            res = train(vcfg, dataset=ds)
            if res.splits.checksum != splits.checksum:
                raise RuntimeError("variants ended up on different splits")
            val = res.splits.val if res.splits.val.m else res.splits.train
            scores = compute_logits(val, res.checkpoint.params, vcfg.model)
            report = metric_report(eval_batch(val, scores, vcfg.model.threshold))
        rows.append(LadderRow(variant, {r.metric: r.value for r in report}, splits.checksum))
        log.info("ladder %s: %s", variant, rows[-1].metrics)
    return rows


def ladder_csv(rows: Sequence[LadderRow]) -> str:
    from .metrics import METRICS

    lines = ["variant," + ",".join(METRICS) + ",split_checksum"]
    for r in rows:
        lines.append(",".join([r.variant] + [repr(r.metrics[m]) for m in METRICS] + [r.split_checksum]))
    return "\n".join(lines) + "\n"
