"""Command-line entry point for training, scoring and checking multi-domain label models.

Exit codes: 0 success, 1 domain error (bad data, config, checkpoint, failed
gradient check), 2 usage error.
"""

from __future__ import annotations

import argparse
import copy
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .autodiff import ShapeError
from .checkpoint import Checkpoint, CheckpointError
from .config import ConfigError, DomainEntry, TrainConfig
from .data import ATC_CLASSES, DataError, Dataset, load_labels_csv, load_score_csv, split, synth_generate, write_dataset
from .embedder import SourceTooShortError
from .extractor import TrainingDiverged
from .metrics import EvalBatch, MetricDomainError, metric_report, report_csv, report_table

log = logging.getLogger("hetembed")

DOMAIN_ERRORS = (
    DataError,
    ConfigError,
    CheckpointError,
    MetricDomainError,
    TrainingDiverged,
    SourceTooShortError,
    ShapeError,
    OSError,
)


class GradcheckFailed(Exception):
    pass


def _common(parser: argparse.ArgumentParser, suppress: bool) -> None:
    default = argparse.SUPPRESS if suppress else None
    parser.add_argument("--config", default=default, help="training config JSON")
    parser.add_argument("--seed", type=int, default=default, help="overrides the config seed")
    parser.add_argument("--out", default=default, help="output directory")
    parser.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS if suppress else False)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hetembed", description=__doc__.splitlines()[0])
    _common(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic benchmark as CSV files plus a config pointing at them")
    p.add_argument("--k", type=int)
    p.add_argument("--dims", help="comma-separated raw lengths, one per domain")
    p.add_argument("--q", type=int)
    p.add_argument("--m", type=int)
    p.add_argument("--dependency", type=float)
    p.add_argument("--signature", type=float)
    p.add_argument("--noise", type=float)
    p.add_argument("--linear", action="store_true", default=None)

    sub.add_parser("train", help="Stage I then Stage II training; writes model.ckpt and history CSVs")

    for name, default_split, text in (
        ("evaluate", "test", "score a checkpoint on one split; writes metrics.csv"),
        ("predict", "all", "per-record logits and label sets; writes predictions.csv"),
    ):
        p = sub.add_parser(name, help=text)
        p.add_argument("--checkpoint", help="defaults to <out>/model.ckpt")
        p.add_argument("--split", choices=("train", "val", "test", "all"), default=default_split)

    sub.add_parser("ablate", help="train the four ladder variants on one split; writes ablation.csv")

    p = sub.add_parser("gradcheck", help="finite-difference check of every op and both losses")
    p.add_argument("--points", type=int, default=10)

    p = sub.add_parser("metrics", help="metric report from a score CSV and a label CSV")
    p.add_argument("--scores", required=True, help="id column then one score column per label")
    p.add_argument("--labels", required=True, help="id column then one 0/1 column per label, same names")
    p.add_argument("--threshold", type=float, default=0.5, help="score >= threshold counts as predicted")
    p.add_argument("--logits", action="store_true", help="scores are logits; threshold applies to sigmoid(score)")

    for p in sub.choices.values():
        _common(p, suppress=True)
    return parser


def _config(args) -> TrainConfig:
    cfg = TrainConfig.load(args.config) if args.config else TrainConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg


def _out(args, fallback: str) -> Path:
    out = Path(args.out or fallback)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ------------------------------------------------------------- subcommands


def cmd_gen_data(args) -> int:
    cfg = _config(args)
    synth = copy.deepcopy(cfg.data.synthetic) if cfg.data.synthetic else TrainConfig().data.synthetic
    for key in ("k", "q", "m", "dependency", "signature", "noise", "linear"):
        value = getattr(args, key)
        if value is not None:
            setattr(synth, key, value)
    if args.dims:
        try:
            synth.dims = [int(d) for d in args.dims.split(",")]
        except ValueError:
            raise ConfigError(f"--dims must be comma-separated integers, got {args.dims!r}") from None
    if len(synth.dims) != synth.k:
        raise ConfigError(f"{len(synth.dims)} dims given for k={synth.k} domains")

    ds = synth_generate(
        k=synth.k,
        dims=synth.dims,
        q=synth.q,
        m=synth.m,
        dependency=synth.dependency,
        seed=cfg.seed,
        signature=synth.signature,
        noise=synth.noise,
        linear=synth.linear,
    )
    out = _out(args, "data")
    files = write_dataset(ds, out)
    written = copy.deepcopy(cfg)
    written.data.synthetic = None
    written.data.domains = [DomainEntry(s.name, s.dim, str(Path(files[s.name]).resolve())) for s in ds.specs]
    written.data.labels = str(Path(files["labels"]).resolve())
    written.data.label_names = None if ds.label_names == ATC_CLASSES else list(ds.label_names)
    written.save(out / "config.json")
    print(f"wrote {ds.m} records, {len(ds.specs)} domains, q={ds.q} to {out}")
    print(f"config: {out / 'config.json'}")
    return 0


def cmd_train(args) -> int:
    from .training import train

    cfg = _config(args)
    out = _out(args, "run")
    res = train(cfg, out)
    cfg.save(out / "config.json")
    last = res.stage2_history[-1] if res.stage2_history else None
    if res.stage1_history:
        print(f"stage 1: {len(res.stage1_history)} epochs, holdout accuracy {res.stage1_history[-1]['holdout_accuracy']:.4f}")
    if last:
        best = max(r["val_average_precision"] for r in res.stage2_history)
        print(f"stage 2: {last['epoch']} epochs, best validation AP {best:.4f}")
    print(f"checkpoint {res.files['checkpoint']} sha256 {res.checkpoint_sha256}")
    return 0


def _checkpoint_and_data(args) -> tuple[Checkpoint, Dataset, Path]:
    from .training import load_dataset

    ckpt_path = Path(args.checkpoint) if args.checkpoint else Path(args.out or "run") / "model.ckpt"
    ckpt = Checkpoint.load(ckpt_path)
    # data comes from --config when given, else from the config stored in the checkpoint
    cfg = TrainConfig.load(args.config) if args.config else copy.deepcopy(ckpt.config)
    if args.seed is not None:
        cfg.seed = args.seed
    ds = load_dataset(cfg)
    if args.split != "all":
        parts = dict(zip(("train", "val", "test"), split(ds, cfg.data.split, cfg.seed, cfg.data.group_by_compound)))
        ds = parts[args.split]
    out = Path(args.out) if args.out else ckpt_path.parent
    out.mkdir(parents=True, exist_ok=True)
    return ckpt, ds, out


def cmd_evaluate(args) -> int:
    from .training import evaluate

    ckpt, ds, out = _checkpoint_and_data(args)
    rows = evaluate(ckpt, ds, out)
    print(report_table(rows))
    print(f"{args.split} split, {ds.m} records; report {out / 'metrics.csv'}")
    return 0


def cmd_predict(args) -> int:
    from .training import predict

    ckpt, ds, out = _checkpoint_and_data(args)
    pred = predict(ckpt, ds, out / "predictions.csv")
    print(f"{len(pred.ids)} records scored, {int(pred.empty.sum())} with an empty label set")
    print(f"predictions {out / 'predictions.csv'}")
    return 0


def cmd_ablate(args) -> int:
    from .training import ladder_csv, run_ablation_ladder

    cfg = _config(args)
    out = _out(args, "ablation")
    rows = run_ablation_ladder(cfg)
    text = ladder_csv(rows)
    (out / "ablation.csv").write_text(text, encoding="utf-8")
    print(f"{'variant':<28} {'AP':>8} {'HL':>8} {'OE':>8} {'Cov':>8} {'RL':>8}")
    for r in rows:
        m = r.metrics
        print(
            f"{r.variant:<28} {m['average_precision']:>8.4f} {m['hamming_loss']:>8.4f} "
            f"{m['one_error']:>8.4f} {m['coverage']:>8.4f} {m['ranking_loss']:>8.4f}"
        )
    print(f"split checksum {rows[0].split_checksum}; table {out / 'ablation.csv'}")
    return 0


def cmd_gradcheck(args) -> int:
    from .gradsuite import run_gradient_suite

    seed = args.seed if args.seed is not None else 0
    results, seconds = run_gradient_suite(points=args.points, seed=seed)
    for r in results:
        print(f"{r.name:<28} {r.max_rel_error:.3e}  tol {r.tolerance:.0e}  {'ok' if r.passed else 'FAIL'}")
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} passed in {seconds:.1f}s")
    if failed:
        raise GradcheckFailed(f"gradient check failed for: {', '.join(failed)}")
    return 0


def cmd_metrics(args) -> int:
    names, scores = load_score_csv(args.scores)
    labels = load_labels_csv(args.labels, names)
    missing = sorted(set(scores) - set(labels))
    if missing:
        raise DataError(f"{args.labels}: no labels for ids {missing[:10]}")
    ids = list(scores)
    s = np.stack([scores[i] for i in ids])
    y = np.stack([labels[i] for i in ids]).astype(bool)
    probs = 1.0 / (1.0 + np.exp(-s)) if args.logits else s
    rows = metric_report(EvalBatch(s, y, probs >= args.threshold))
    print(report_table(rows))
    if args.out:
        out = _out(args, ".")
        (out / "metrics.csv").write_text(report_csv(rows), encoding="utf-8")
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "predict": cmd_predict,
    "ablate": cmd_ablate,
    "gradcheck": cmd_gradcheck,
    "metrics": cmd_metrics,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 2
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return COMMANDS[args.command](args)
    except (*DOMAIN_ERRORS, GradcheckFailed) as exc:
        print(f"hetembed {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
