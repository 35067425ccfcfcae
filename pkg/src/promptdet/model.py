"""The assembled detector: image encoder, both prompt encoders, box decoder,
plus checkpoint IO.

Weights are immutable after load for serving (forward passes may run
concurrently); training holds the model exclusively. ``encode_count``
instruments how often the image pipeline actually ran — the late-fusion
contract is that prompt changes never re-encode.
"""

from __future__ import annotations

import dataclasses
import hashlib
import io
from pathlib import Path

import torch
from torch import Tensor, nn

from .backbone import ImageEncoder, MultiScaleFeatures
from .config import ModelConfig
from .decoder import BoxDecoder, Detection, DetectionQuerySet, DetectionSet, postprocess
from .prompts import (
    PromptEmbedding,
    TextPromptEncoder,
    VisualPromptEncoder,
    VisualPromptSet,
    Vocabulary,
)

CHECKPOINT_FORMAT = "promptdet-checkpoint"
CHECKPOINT_VERSION = 1


def slice_features(features: MultiScaleFeatures, index: int) -> MultiScaleFeatures:
    """View one image of a batched pyramid as a batch of 1."""
    return MultiScaleFeatures([lvl[index : index + 1] for lvl in features.levels])


class PromptableDetector(nn.Module):
    """Late-fusion promptable detector with a unified classification space."""

    def __init__(self, cfg: ModelConfig, vocab: Vocabulary):
        super().__init__()
        self.cfg = cfg
        self.image_encoder = ImageEncoder(cfg)
        self.visual_prompt_encoder = VisualPromptEncoder(cfg)
        self.text_encoder = TextPromptEncoder(cfg, vocab)
        self.decoder = BoxDecoder(cfg)
        self.encode_count = 0  # backbone+encoder forward passes (instrumentation)

    @property
    def vocab(self) -> Vocabulary:
        return self.text_encoder.vocab

    # -- encoding ------------------------------------------------------------

    def encode_image(self, images: Tensor) -> MultiScaleFeatures:
        """Run backbone + encoder once for a (B, 3, H, W) batch."""
        self.encode_count += 1
        return self.image_encoder(images)

    def embed_text(self, text: str) -> PromptEmbedding:
        return self.text_encoder(text)

    def embed_visual(
        self, prompts: VisualPromptSet, features: MultiScaleFeatures, image_index: int = 0
    ) -> PromptEmbedding:
        return self.visual_prompt_encoder(prompts, features, image_index)

    # -- detection -----------------------------------------------------------

    def detect_features(
        self,
        features: MultiScaleFeatures,
        prompts: list[PromptEmbedding],
        image_index: int = 0,
    ) -> DetectionSet:
        """Query selection + refinement + classification for one image."""
        single = slice_features(features, image_index)
        qs = self.decoder.query_selection(single, prompts)
        qs = self.decoder.decode(qs, single)
        return self.decoder.classify(qs, prompts, image_index=0)

    def detect(
        self,
        features: MultiScaleFeatures,
        prompts: list[PromptEmbedding],
        threshold: float | None = None,
        image_index: int = 0,
    ) -> list[Detection]:
        threshold = self.cfg.score_threshold if threshold is None else threshold
        ds = self.detect_features(features, prompts, image_index)
        return postprocess(ds, threshold)

    # -- training-path forward -------------------------------------------------

    def forward_training(
        self, images: Tensor, prompts_per_image: list[list[PromptEmbedding]]
    ) -> tuple[MultiScaleFeatures, DetectionQuerySet]:
        """Batched selection + decode where each image has its own prompts.

        Selection runs per image (prompt counts differ); the refinement stack
        runs once over the whole batch. ``selection_logits`` comes back as a
        per-image list.
        """
        features = self.encode_image(images)
        parts = []
        for b, plist in enumerate(prompts_per_image):
            parts.append(self.decoder.query_selection(slice_features(features, b), plist))
        qs = DetectionQuerySet(
            queries=torch.cat([p.queries for p in parts], dim=0),
            anchor_logits=torch.cat([p.anchor_logits for p in parts], dim=0),
            selection_logits=[p.selection_logits[0] for p in parts],
            layer_anchors=[torch.cat([p.layer_anchors[0] for p in parts], dim=0)],
        )
        qs = self.decoder.decode(qs, features)
        return features, qs


def new_model(cfg: ModelConfig, category_names: list[str]) -> PromptableDetector:
    return PromptableDetector(cfg, Vocabulary.from_category_names(category_names))


def save_checkpoint(model: PromptableDetector, path: str | Path, extra: dict | None = None) -> None:
    """Single-archive checkpoint: parameters + config + vocab + version."""
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": dataclasses.asdict(model.cfg),
        "vocab": model.vocab.to_list(),
        "state_dict": model.state_dict(),
        "extra": extra or {},
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)


def load_checkpoint(path: str | Path) -> tuple[PromptableDetector, dict]:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not a detector checkpoint")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {payload.get('version')!r}")
    cfg = ModelConfig(**payload["config"])
    model = PromptableDetector(cfg, Vocabulary.from_list(payload["vocab"]))
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model, payload.get("extra", {})


def checkpoint_hash(path: str | Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def state_dict_hash(model: nn.Module) -> str:
    buf = io.BytesIO()
    torch.save({k: v for k, v in sorted(model.state_dict().items())}, buf)
    return hashlib.sha256(buf.getvalue()).hexdigest()
