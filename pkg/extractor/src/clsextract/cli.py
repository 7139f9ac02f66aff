"""Command line entry point: manifest CSV in, metadata CSV + EMB1 out."""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .extract import BACKBONES, ExtractorConfig, extract
from .formats import read_manifest, write_emb1, write_metadata_csv


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="clsextract",
        description="Export frozen-backbone image embeddings to metadata CSV + EMB1",
    )
    parser.add_argument("--manifest", required=True, help="input manifest CSV")
    parser.add_argument("--image-root", default=".", help="base directory for image paths")
    parser.add_argument("--backbone", default="vit-base", choices=sorted(BACKBONES))
    parser.add_argument("--batch", type=int, default=16, help="inference batch size")
    parser.add_argument("--device", default="cpu")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument(
        "--random-init",
        action="store_true",
        help="use seeded random backbone weights instead of downloading pretrained ones",
    )
    parser.add_argument(
        "--strict",
        action="store_true",
        help="fail on the first unreadable image instead of skipping it",
    )
    parser.add_argument("--meta-out", required=True, help="output metadata CSV path")
    parser.add_argument("--emb-out", required=True, help="output EMB1 path")
    return parser


def _sha256(path: str | Path) -> str:
    h = hashlib.sha256()
    with Path(path).open("rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


def run(args: argparse.Namespace) -> int:
    config = ExtractorConfig(
        backbone=args.backbone,
        batch_size=args.batch,
        device=args.device,
        strict=args.strict,
        random_init=args.random_init,
        seed=args.seed,
    )
    rows = read_manifest(args.manifest, image_root=args.image_root)
    result = extract(config, rows)
    write_metadata_csv(args.meta_out, result.rows)
    write_emb1(args.emb_out, result.matrix)

    manifest = {
        "tool": "clsextract",
        "version": __version__,
        "backbone": args.backbone,
        "random_init": args.random_init,
        "seed": args.seed,
        "batch_size": args.batch,
        "resize_policy": _resize_policy(config),
        "rows": len(result.rows),
        "skipped_image_ids": result.skipped,
        "inputs": {str(args.manifest): _sha256(args.manifest)},
    }
    Path(str(args.meta_out) + ".manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    return 0


def _resize_policy(config: ExtractorConfig) -> str:
    # the processor default for both supported backbones
    return "resize to 224x224, rescale 1/255, normalize mean/std 0.5"


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return run(args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # pragma: no cover
        print(f"internal error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
