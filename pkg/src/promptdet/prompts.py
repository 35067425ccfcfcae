"""Prompt encoders: user boxes/points and category text both become unit-norm
D-dim embeddings that act as classification weights downstream.

Box and point prompts keep fully separate projection parameters; a learned
global token aggregates the per-prompt queries and its output row is the
embedding for the whole set. The text side is a small from-scratch
transformer over a word vocabulary harvested from the corpus category names
(a stand-in for a pretrained text tower, same string -> vector interface).
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Sequence

import torch
from torch import Tensor, nn

from .attention import (
    FeedForward,
    MultiScaleDeformableAttention,
    sincos_position_embedding,
)
from .backbone import MultiScaleFeatures
from .config import ModelConfig
from .geometry import NormalizedBox, NormalizedPoint

GLOBAL_BOX = (0.5, 0.5, 1.0, 1.0)
GLOBAL_POINT = (0.5, 0.5)

TEMPLATE_WORDS = ("a", "photo", "of")


class DegenerateMixError(ValueError):
    """Raised when averaging two embeddings cancels to the zero vector."""


@dataclass
class VisualPromptSet:
    """A homogeneous group of box or point prompts exemplifying one label."""

    kind: str  # "box" | "point"
    prompts: list
    label: str | int

    def __post_init__(self):
        if self.kind not in ("box", "point"):
            raise ValueError(f"kind must be box or point, got {self.kind!r}")
        if not self.prompts:
            raise ValueError("prompt set must contain at least one prompt")
        want = NormalizedBox if self.kind == "box" else NormalizedPoint
        if not all(isinstance(p, want) for p in self.prompts):
            raise ValueError(f"all prompts must be {want.__name__} for kind={self.kind}")

    def __len__(self) -> int:
        return len(self.prompts)

    def coords(self, dtype=torch.float32) -> Tensor:
        """(K, 4) boxes or (K, 2) points."""
        return torch.tensor([p.as_tuple() for p in self.prompts], dtype=dtype)


@dataclass
class PromptEmbedding:
    """Unit-norm classification weight with provenance."""

    vector: Tensor  # (D,)
    kind: str  # "text" | "visual" | "mixed"
    label: str | int
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("text", "visual", "mixed"):
            raise ValueError(f"bad embedding kind {self.kind!r}")

    def detached(self) -> "PromptEmbedding":
        return PromptEmbedding(self.vector.detach(), self.kind, self.label, dict(self.meta))


def normalize_embedding(vector: Tensor, eps: float = 1e-12) -> Tensor:
    if not torch.isfinite(vector).all():
        raise ValueError("embedding has non-finite entries")
    norm = vector.norm()
    if norm < eps:
        raise DegenerateMixError("embedding has (near-)zero norm")
    return vector / norm


def mix_embeddings(text: PromptEmbedding, visual: PromptEmbedding) -> PromptEmbedding:
    """Elementwise average of a text and a visual embedding, renormalized."""
    kinds = {text.kind, visual.kind}
    if kinds != {"text", "visual"}:
        raise ValueError(f"mixing needs one text and one visual embedding, got {kinds}")
    if text.label != visual.label:
        raise ValueError(f"label mismatch: {text.label!r} vs {visual.label!r}")
    mean = (text.vector + visual.vector) / 2
    return PromptEmbedding(normalize_embedding(mean), "mixed", text.label)


class PromptBlock(nn.Module):
    """Deformable cross-attention into the image, self-attention among the
    prompt queries, then a feed-forward; pre-norm with residuals."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.embed_dim
        self.norm1 = nn.LayerNorm(d)
        self.cross = MultiScaleDeformableAttention(d, cfg.n_heads, cfg.num_levels, cfg.n_points)
        self.norm2 = nn.LayerNorm(d)
        self.self_attn = nn.MultiheadAttention(d, cfg.n_heads, batch_first=True)
        self.norm3 = nn.LayerNorm(d)
        self.ffn = FeedForward(d, cfg.ffn_ratio * d)

    def forward(self, q, references, value, spatial_shapes):
        t = self.norm1(q)
        q = q + self.cross(t, references, value, spatial_shapes)
        t = self.norm2(q)
        q = q + self.self_attn(t, t, t, need_weights=False)[0]
        q = q + self.ffn(self.norm3(q))
        return q


class VisualPromptEncoder(nn.Module):
    """Boxes/points on a reference image -> one embedding per prompt set."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.embed_dim
        self.cfg = cfg
        # Coordinate embeddings use d dims per coordinate before projection,
        # so boxes enter at 4d and points at 2d; the two paths never share
        # parameters.
        self.box_proj = nn.Linear(4 * d, d)
        self.point_proj = nn.Linear(2 * d, d)
        self.content = nn.Parameter(torch.zeros(1, d))
        self.global_content = nn.Parameter(torch.zeros(1, d))
        nn.init.normal_(self.content, std=0.02)
        nn.init.normal_(self.global_content, std=0.02)
        self.box_query_proj = nn.Linear(2 * d, d)
        self.point_query_proj = nn.Linear(2 * d, d)
        self.blocks = nn.ModuleList(PromptBlock(cfg) for _ in range(cfg.prompt_blocks))

    def _dtype(self):
        return self.box_proj.weight.dtype

    def project_positions(self, prompts: VisualPromptSet) -> Tensor:
        """(K, D) projected coordinate embeddings (paper's per-prompt PE path)."""
        d = self.cfg.embed_dim
        coords = prompts.coords(self._dtype())
        pe = sincos_position_embedding(coords, d)
        proj = self.box_proj if prompts.kind == "box" else self.point_proj
        return proj(pe)

    def _global_position(self, kind: str) -> Tensor:
        d = self.cfg.embed_dim
        anchor = GLOBAL_BOX if kind == "box" else GLOBAL_POINT
        pe = sincos_position_embedding(
            torch.tensor(anchor, dtype=self._dtype()), d
        )
        proj = self.box_proj if kind == "box" else self.point_proj
        return proj(pe).unsqueeze(0)  # (1, D)

    def build_queries(self, projected: Tensor, kind: str) -> Tensor:
        """Fuse content and position into (K+1, D) queries, global row last."""
        if kind not in ("box", "point"):
            raise ValueError(f"kind must be box or point, got {kind!r}")
        K = projected.shape[0]
        content = torch.cat([self.content.expand(K, -1), self.global_content], dim=0)
        position = torch.cat([projected, self._global_position(kind)], dim=0)
        fused = torch.cat([content, position], dim=-1)  # (K+1, 2D)
        proj = self.box_query_proj if kind == "box" else self.point_query_proj
        return proj(fused)

    def references(self, prompts: VisualPromptSet) -> Tensor:
        """(K+1, 4|2) attention references; the global row spans the image."""
        coords = prompts.coords(self._dtype())
        anchor = GLOBAL_BOX if prompts.kind == "box" else GLOBAL_POINT
        extra = torch.tensor([anchor], dtype=coords.dtype)
        return torch.cat([coords, extra], dim=0)

    def forward(
        self, prompts: VisualPromptSet, features: MultiScaleFeatures, image_index: int = 0
    ) -> PromptEmbedding:
        """Encode one prompt set against one image's refined features."""
        flat = features.flatten()[image_index : image_index + 1]  # (1, S, D)
        shapes = features.spatial_shapes
        q = self.build_queries(self.project_positions(prompts), prompts.kind)
        refs = self.references(prompts).to(flat.device)
        q, refs = q.unsqueeze(0), refs.unsqueeze(0)
        for block in self.blocks:
            q = block(q, refs, flat, shapes)
        vector = normalize_embedding(q[0, -1])
        return PromptEmbedding(vector, "visual", prompts.label, {"n_prompts": len(prompts)})


_WORD = re.compile(r"[a-z0-9]+")


def tokenize(text: str) -> list[str]:
    return _WORD.findall(text.lower())


class Vocabulary:
    """Word-level vocabulary with CLS/PAD markers and an OOV bucket."""

    CLS, PAD, OOV = "[cls]", "[pad]", "[oov]"

    def __init__(self, words: Sequence[str]):
        specials = [self.CLS, self.PAD, self.OOV]
        seen = dict.fromkeys(w for w in words if w not in specials)
        self.tokens = specials + sorted(seen)
        self.index = {t: i for i, t in enumerate(self.tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    @classmethod
    def from_category_names(cls, names: Sequence[str]) -> "Vocabulary":
        words = list(TEMPLATE_WORDS)
        for name in names:
            words.extend(tokenize(name))
        return cls(words)

    def encode(self, text: str, max_len: int) -> list[int]:
        ids = [self.index[self.CLS]]
        oov = self.index[self.OOV]
        for word in tokenize(text)[: max_len - 1]:
            ids.append(self.index.get(word, oov))
        ids += [self.index[self.PAD]] * (max_len - len(ids))
        return ids

    def to_list(self) -> list[str]:
        return list(self.tokens)

    @classmethod
    def from_list(cls, tokens: Sequence[str]) -> "Vocabulary":
        vocab = cls.__new__(cls)
        vocab.tokens = list(tokens)
        vocab.index = {t: i for i, t in enumerate(vocab.tokens)}
        return vocab


class TextPromptEncoder(nn.Module):
    """Category name / short phrase -> unit embedding via a tiny transformer,
    reading the output at the leading CLS slot."""

    def __init__(self, cfg: ModelConfig, vocab: Vocabulary):
        super().__init__()
        d = cfg.embed_dim
        self.cfg = cfg
        self.vocab = vocab
        self.token_embed = nn.Embedding(len(vocab), d)
        self.pos_embed = nn.Embedding(cfg.max_text_len, d)
        layer = nn.TransformerEncoderLayer(
            d,
            cfg.text_heads,
            dim_feedforward=cfg.ffn_ratio * d,
            dropout=0.0,
            batch_first=True,
            norm_first=True,
        )
        self.layers = nn.TransformerEncoder(layer, cfg.text_layers, enable_nested_tensor=False)
        self.out_proj = nn.Linear(d, d)

    def forward(self, text: str) -> PromptEmbedding:
        ids = torch.tensor(
            [self.vocab.encode(text, self.cfg.max_text_len)],
            device=self.token_embed.weight.device,
        )
        pad_mask = ids.eq(self.vocab.index[Vocabulary.PAD])
        x = self.token_embed(ids) + self.pos_embed.weight[: ids.shape[1]].unsqueeze(0)
        x = self.layers(x, src_key_padding_mask=pad_mask)
        vector = normalize_embedding(self.out_proj(x[0, 0]))
        return PromptEmbedding(vector, "text", text)
