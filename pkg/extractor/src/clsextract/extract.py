"""Batched frozen-backbone embedding extraction.

The backbone is never updated: it is switched to eval mode and every
forward pass runs under torch.no_grad(). ViT backbones export the final
hidden state of the CLS token; Swin backbones have no CLS token, so the
pooled final hidden state serves as the whole-image embedding. Outputs
are float32 regardless of compute precision, one row per manifest row in
manifest order.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .formats import ManifestRow, write_emb1, write_metadata_csv

logger = logging.getLogger(__name__)

BACKBONES = {
    "vit-base": {"hub_id": "google/vit-base-patch16-224", "width": 768},
    "swin-large": {"hub_id": "microsoft/swin-base-patch4-window7-224", "width": 1024},
}


@dataclass(frozen=True)
class ExtractorConfig:
    backbone: str = "vit-base"
    batch_size: int = 16
    device: str = "cpu"
    strict: bool = False
    random_init: bool = False  # seeded random weights; offline testing path
    seed: int = 0

    def __post_init__(self):
        if self.backbone not in BACKBONES:
            raise ValueError(
                f"unknown backbone {self.backbone!r}; choose from {sorted(BACKBONES)}"
            )
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")

    @property
    def width(self) -> int:
        return BACKBONES[self.backbone]["width"]


@dataclass
class Backbone:
    model: torch.nn.Module
    processor: object
    width: int
    resize_policy: str


def load_backbone(config: ExtractorConfig) -> Backbone:
    from transformers import (
        SwinConfig,
        SwinModel,
        ViTConfig,
        ViTImageProcessor,
        ViTModel,
    )

    declared = config.width
    if config.backbone == "vit-base":
        if config.random_init:
            torch.manual_seed(config.seed)
            model = ViTModel(ViTConfig())
        else:
            model = ViTModel.from_pretrained(BACKBONES["vit-base"]["hub_id"])
        processor = ViTImageProcessor()
        width = model.config.hidden_size
    else:
        if config.random_init:
            torch.manual_seed(config.seed)
            model = SwinModel(SwinConfig(embed_dim=128))
        else:
            model = SwinModel.from_pretrained(BACKBONES["swin-large"]["hub_id"])
        processor = ViTImageProcessor(size={"height": 224, "width": 224})
        width = model.config.embed_dim * 2 ** (len(model.config.depths) - 1)

    if width != declared:
        raise ValueError(
            f"backbone width {width} does not match declared output dim {declared}"
        )
    model.eval()
    model.to(config.device)
    size = getattr(processor, "size", None)
    return Backbone(
        model=model,
        processor=processor,
        width=width,
        resize_policy=f"processor default resize {size}",
    )


def _load_image(path: Path) -> Image.Image:
    with Image.open(path) as img:
        return img.convert("RGB")


def _embed_batch(backbone: Backbone, images: list[Image.Image], device: str) -> np.ndarray:
    inputs = backbone.processor(images=images, return_tensors="pt").to(device)
    with torch.no_grad():
        outputs = backbone.model(**inputs)
    if backbone.model.config.model_type == "swin":
        pooled = outputs.pooler_output
    else:
        pooled = outputs.last_hidden_state[:, 0, :]  # CLS token
    return pooled.cpu().numpy().astype(np.float32)


@dataclass
class ExtractionResult:
    rows: list[ManifestRow]
    matrix: np.ndarray
    skipped: list[str] = field(default_factory=list)


def extract(config: ExtractorConfig, manifest_rows: list[ManifestRow]) -> ExtractionResult:
    """Embed every readable manifest image, preserving manifest order."""
    backbone = load_backbone(config)

    kept: list[ManifestRow] = []
    images: list[Image.Image] = []
    skipped: list[str] = []
    for row in manifest_rows:
        try:
            images.append(_load_image(row.path))
            kept.append(row)
        except (OSError, ValueError) as exc:
            if config.strict:
                raise ValueError(f"unreadable image {row.path}: {exc}") from exc
            logger.warning("skipping unreadable image %s (%s)", row.path, exc)
            skipped.append(row.image_id)

    chunks = []
    for start in range(0, len(images), config.batch_size):
        chunks.append(
            _embed_batch(backbone, images[start : start + config.batch_size], config.device)
        )
    matrix = (
        np.concatenate(chunks, axis=0)
        if chunks
        else np.zeros((0, backbone.width), dtype=np.float32)
    )
    return ExtractionResult(rows=kept, matrix=matrix, skipped=skipped)


def write_outputs(result: ExtractionResult, meta_path: str | Path, emb_path: str | Path) -> None:
    write_metadata_csv(meta_path, result.rows)
    write_emb1(emb_path, result.matrix)
