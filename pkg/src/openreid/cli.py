"""Command-line pipeline: split, train-head, tune, predict, evaluate, project.

Every subcommand is a pure function of its input files, flags, and seed;
reruns produce byte-identical outputs. A manifest JSON recording the
resolved parameters and input digests is written next to each output.

Exit codes: 0 success, 2 validation or configuration error, 1 internal
error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import math
import sys
from pathlib import Path

import numpy as np

from . import NEW_INDIVIDUAL, __version__
from .errors import ValidationError
from .head import HeadConfig, forward_batch, read_checkpoint, write_checkpoint
from .knn import build_index, predict_all, write_submission_csv
from .metrics import EvalItem, EvaluationSet, ScoreReport
from .pca import fit_pca, project
from .split import (
    SplitConfig,
    evaluation_view,
    read_split_csv,
    stratified_open_set_split,
    write_split_csv,
)
from .store import EmbeddingDataset, read_dataset, subset
from .thresholds import (
    candidate_grid,
    cross_species_nn_distances,
    robust_stats,
    tune_threshold,
    write_curve_csv,
)
from .training import TrainConfig, train


def _sha256(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _write_manifest(out_path: Path, subcommand: str, params: dict, inputs: list[str | Path]) -> None:
    manifest = {
        "subcommand": subcommand,
        "params": params,
        "inputs": {str(p): _sha256(p) for p in inputs},
        "seed": params.get("seed"),
        "version": __version__,
    }
    path = out_path / "manifest.json" if out_path.is_dir() else Path(str(out_path) + ".manifest.json")
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _split_rows(dataset: EmbeddingDataset, assignment, which: str) -> list[int]:
    return [
        i
        for i, rec in enumerate(dataset.records)
        if assignment.image_split.get(rec.image_id) == which
    ]


def _maybe_project(matrix: np.ndarray, head_ckpt: str | None) -> np.ndarray:
    """Run embeddings through a trained head in eval mode, if one is given."""
    if head_ckpt is None:
        return matrix
    config, params = read_checkpoint(head_ckpt)
    outputs, _ = forward_batch(params, config, matrix, train_mode=False)
    return outputs


def _projected_subset(dataset: EmbeddingDataset, rows: list[int], head_ckpt: str | None) -> EmbeddingDataset:
    sub = subset(dataset, rows)
    if head_ckpt is None:
        return sub
    return EmbeddingDataset(records=sub.records, matrix=_maybe_project(sub.matrix, head_ckpt))


def cmd_split(args) -> int:
    dataset = read_dataset(args.meta, args.emb)
    config = SplitConfig(
        known_fraction=args.known_frac,
        unknown_val_fraction=args.unknown_val_frac,
        seed=args.seed,
    )
    assignment = stratified_open_set_split(dataset, config)
    out = Path(args.out)
    write_split_csv(out, dataset, assignment)
    _write_manifest(
        out,
        "split",
        {
            "known_frac": args.known_frac,
            "unknown_val_frac": args.unknown_val_frac,
            "seed": args.seed,
            "out": str(out),
        },
        [args.meta, args.emb],
    )
    return 0


def cmd_train_head(args) -> int:
    dataset = read_dataset(args.meta, args.emb)
    assignment = read_split_csv(args.split)

    train_rows = _split_rows(dataset, assignment, "train")
    val_rows = [
        i
        for i in _split_rows(dataset, assignment, "val")
        if dataset.records[i].individual_id in assignment.unknown_individuals
    ]
    if not train_rows:
        raise ValidationError("split has no train rows")
    if not val_rows:
        raise ValidationError(
            "split has no unknown-individual val rows; triplet training needs a "
            "validation set disjoint from the train individuals"
        )

    head_config = HeadConfig(
        input_dim=dataset.dim,
        output_dim=args.output_dim,
        dropout_rate=args.dropout,
        mode=args.head,
    )
    train_config = TrainConfig(
        margin=args.margin,
        batch_size=args.batch,
        epochs=args.epochs,
        learning_rate=args.lr,
        warmup_epochs=args.warmup,
        mining=args.mining,
        loss=args.loss,
        seed=args.seed,
    )

    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    on_epoch = None
    if args.checkpoint_every:
        def on_epoch(epoch, params):
            if (epoch + 1) % args.checkpoint_every == 0:
                write_checkpoint(out_dir / f"epoch{epoch:04d}.head", head_config, params)

    best_params, history = train(
        dataset.matrix[train_rows],
        [dataset.records[i].individual_id for i in train_rows],
        dataset.matrix[val_rows],
        [dataset.records[i].individual_id for i in val_rows],
        head_config,
        train_config,
        on_epoch=on_epoch,
    )
    write_checkpoint(out_dir / "best.head", head_config, best_params)
    history.write_csv(out_dir / "history.csv")
    _write_manifest(
        out_dir,
        "train-head",
        {
            "split": str(args.split),
            "head": args.head,
            "loss": args.loss,
            "mining": args.mining,
            "epochs": args.epochs,
            "batch": args.batch,
            "lr": args.lr,
            "warmup": args.warmup,
            "margin": args.margin,
            "output_dim": args.output_dim,
            "dropout": args.dropout,
            "checkpoint_every": args.checkpoint_every,
            "seed": args.seed,
            "out_dir": str(out_dir),
        },
        [args.meta, args.emb, args.split],
    )
    return 0


def cmd_tune(args) -> int:
    dataset = read_dataset(args.meta, args.emb)
    assignment = read_split_csv(args.split)

    train_ds = _projected_subset(dataset, _split_rows(dataset, assignment, "train"), args.head_ckpt)
    if len(train_ds) == 0:
        raise ValidationError("split has no train rows")
    distances = cross_species_nn_distances(train_ds)
    stats = robust_stats(distances)
    grid = candidate_grid(stats, n=args.grid_size)

    val_rows = _split_rows(dataset, assignment, "val")
    val_set = evaluation_view(assignment, "val", dataset)
    row_by_id = {dataset.records[i].image_id: i for i in val_rows}
    ordered_rows = [row_by_id[item.image_id] for item in val_set.items]
    val_matrix = _maybe_project(dataset.matrix[ordered_rows], args.head_ckpt)

    index = build_index(train_ds, metric=args.metric)
    curve = tune_threshold(index, val_set, val_matrix, args.k, grid)

    out = Path(args.out)
    write_curve_csv(out, curve)
    chosen = {
        "threshold": curve.best_threshold,
        "baks": float(curve.baks_scores[curve.best_index]),
        "baus": float(curve.baus_scores[curve.best_index]),
        "final": curve.best_score,
        "median": stats.median,
        "mad": stats.mad,
    }
    Path(str(out) + ".threshold.json").write_text(json.dumps(chosen, sort_keys=True) + "\n", encoding="utf-8")
    inputs = [args.meta, args.emb, args.split] + ([args.head_ckpt] if args.head_ckpt else [])
    _write_manifest(
        out,
        "tune",
        {
            "k": args.k,
            "grid_size": args.grid_size,
            "metric": args.metric,
            "head_ckpt": args.head_ckpt,
            "out": str(out),
        },
        inputs,
    )
    return 0


def cmd_predict(args) -> int:
    dataset = read_dataset(args.meta, args.emb)
    assignment = read_split_csv(args.split)

    train_ds = _projected_subset(dataset, _split_rows(dataset, assignment, "train"), args.head_ckpt)
    query_rows = _split_rows(dataset, assignment, args.query_split)
    if not query_rows:
        raise ValidationError(f"split has no {args.query_split!r} rows to classify")
    queries = _projected_subset(dataset, query_rows, args.head_ckpt)

    index = build_index(train_ds, metric=args.metric)
    threshold = math.inf if args.threshold == "inf" else float(args.threshold)
    predictions = predict_all(index, queries, args.k, threshold)

    out = Path(args.out)
    write_submission_csv(out, predictions)
    inputs = [args.meta, args.emb, args.split] + ([args.head_ckpt] if args.head_ckpt else [])
    _write_manifest(
        out,
        "predict",
        {
            "k": args.k,
            "threshold": args.threshold,
            "metric": args.metric,
            "query_split": args.query_split,
            "head_ckpt": args.head_ckpt,
            "out": str(out),
        },
        inputs,
    )
    return 0


def _read_truth_csv(path: str | Path) -> EvaluationSet:
    """Ground truth CSV: image_id,individual_id,is_known."""
    items = []
    known: set[str] = set()
    unknown: set[str] = set()
    with Path(path).open("r", newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["image_id", "individual_id", "is_known"]:
            raise ValidationError(f"{path}: bad header {header!r}")
        for lineno, row in enumerate(reader, start=2):
            if len(row) != 3:
                raise ValidationError(f"{path}:{lineno}: expected 3 fields")
            image_id, individual_id, is_known = row
            items.append(EvalItem(image_id=image_id, true_individual=individual_id))
            (known if is_known == "true" else unknown).add(individual_id)
    if not items:
        raise ValidationError(f"{path}: empty truth file")
    return EvaluationSet.from_items(items, known, unknown)


def _read_predictions_csv(path: str | Path) -> dict[str, str]:
    preds: dict[str, str] = {}
    with Path(path).open("r", newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["image_id", "identity"]:
            raise ValidationError(f"{path}: bad header {header!r}")
        for row in reader:
            preds[row[0]] = row[1]
    return preds


def cmd_evaluate(args) -> int:
    truth = _read_truth_csv(args.truth)
    preds = _read_predictions_csv(args.pred)
    scored = truth.with_predictions(preds)
    report = ScoreReport.compute(scored)
    out = Path(args.out)
    report.write(out)
    _write_manifest(out, "evaluate", {"out": str(out)}, [args.pred, args.truth])
    return 0


def cmd_project(args) -> int:
    dataset = read_dataset(args.meta, args.emb)
    model = fit_pca(dataset.matrix, args.k)
    coords = project(model, dataset.matrix)
    out = Path(args.out)
    with out.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["image_id"] + [f"pc{j + 1}" for j in range(args.k)])
        for rec, row in zip(dataset.records, coords):
            writer.writerow([rec.image_id] + [repr(float(v)) for v in row])
    _write_manifest(out, "project", {"k": args.k, "out": str(out)}, [args.meta, args.emb])
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="openreid", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("split", help="stratified open-set train/val/test split")
    p.add_argument("--meta", required=True)
    p.add_argument("--emb", required=True)
    p.add_argument("--known-frac", type=float, default=0.6)
    p.add_argument("--unknown-val-frac", type=float, default=0.2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train-head", help="train the triplet projection head")
    p.add_argument("--meta", required=True)
    p.add_argument("--emb", required=True)
    p.add_argument("--split", required=True)
    p.add_argument("--head", choices=["linear", "nonlinear"], default="nonlinear")
    p.add_argument("--loss", choices=["triplet", "matryoshka"], default="triplet")
    p.add_argument("--mining", choices=["random", "semi_hard"], default="semi_hard")
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--batch", type=int, default=200)
    p.add_argument("--lr", type=float, default=5e-4)
    p.add_argument("--warmup", type=int, default=10)
    p.add_argument("--margin", type=float, default=1.0)
    p.add_argument("--output-dim", type=int, default=256)
    p.add_argument("--dropout", type=float, default=0.1)
    p.add_argument("--checkpoint-every", type=int, default=0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_train_head)

    p = sub.add_parser("tune", help="tune the new-individual threshold on the val split")
    p.add_argument("--meta", required=True)
    p.add_argument("--emb", required=True)
    p.add_argument("--split", required=True)
    p.add_argument("--head-ckpt", default=None)
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--grid-size", type=int, default=100)
    p.add_argument("--metric", choices=["l2", "cosine"], default="l2")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_tune)

    p = sub.add_parser("predict", help="classify query rows into a submission CSV")
    p.add_argument("--meta", required=True)
    p.add_argument("--emb", required=True)
    p.add_argument("--split", required=True)
    p.add_argument("--head-ckpt", default=None)
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--threshold", required=True, help="float or 'inf'")
    p.add_argument("--metric", choices=["l2", "cosine"], default="l2")
    p.add_argument("--query-split", choices=["val", "test"], default="test")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="score predictions against ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("project", help="PCA coordinates for diagnostic plotting")
    p.add_argument("--meta", required=True)
    p.add_argument("--emb", required=True)
    p.add_argument("--k", type=int, default=2)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_project)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # pragma: no cover - internal failures
        print(f"internal error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
