"""Box decoder: prompt-similarity query selection, iterative anchor
refinement through deformable decoder layers, and prompt-as-weights
classification.

Anchors live in inverse-sigmoid space during refinement (offsets add there,
sigmoid re-projects), so every intermediate anchor is a valid box; the
recorded per-layer offsets replay to the final box exactly. Query content is
taken from the selected encoder features (a learned-embedding alternative
exists in the lineage; selected features train faster at this scale).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
from torch import Tensor, nn

from .attention import MLP, FeedForward, MultiScaleDeformableAttention, box_position_embedding
from .backbone import MultiScaleFeatures
from .config import ModelConfig
from .geometry import NormalizedBox, to_logit
from .prompts import PromptEmbedding


@dataclass
class DetectionQuerySet:
    """N queries with their refined anchors and per-layer snapshots."""

    queries: Tensor                 # (B, N, D)
    anchor_logits: Tensor           # (B, N, 4), inverse-sigmoid space
    selection_logits: list[Tensor]  # per image (C_b, N) prompt similarities at selection
    layer_anchors: list[Tensor] = field(default_factory=list)   # each (B, N, 4) sigmoid space
    layer_queries: list[Tensor] = field(default_factory=list)   # post-layer queries
    layer_offsets: list[Tensor] = field(default_factory=list)   # recorded logit-space deltas

    @property
    def anchors(self) -> Tensor:
        """(B, N, 4) current anchors as valid normalized boxes."""
        return torch.sigmoid(self.anchor_logits)


@dataclass
class DetectionSet:
    """Per-image decoder output: N boxes and C x N classification logits."""

    boxes: Tensor   # (N, 4) cxcywh
    logits: Tensor  # (C, N)
    labels: list

    @property
    def scores(self) -> Tensor:
        return torch.sigmoid(self.logits)


@dataclass
class Detection:
    box: NormalizedBox
    label: str | int
    score: float

    def to_dict(self) -> dict:
        return {"box": list(self.box.as_tuple()), "label": self.label, "score": self.score}


def stack_prompts(prompts: list[PromptEmbedding]) -> Tensor:
    if not prompts:
        raise ValueError("need at least one prompt embedding")
    return torch.stack([p.vector for p in prompts], dim=0)  # (C, D)


class DecoderLayer(nn.Module):
    """Pre-norm: self-attention among queries (anchor-position aware),
    deformable cross-attention into the image, feed-forward."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.embed_dim
        self.norm_sa = nn.LayerNorm(d)
        self.self_attn = nn.MultiheadAttention(d, cfg.n_heads, batch_first=True)
        self.norm_ca = nn.LayerNorm(d)
        self.cross = MultiScaleDeformableAttention(d, cfg.n_heads, cfg.num_levels, cfg.n_points)
        self.norm_ffn = nn.LayerNorm(d)
        self.ffn = FeedForward(d, cfg.ffn_ratio * d)

    def forward(self, q, q_pos, anchors, value, spatial_shapes):
        t = self.norm_sa(q)
        tq = t + q_pos
        q = q + self.self_attn(tq, tq, t, need_weights=False)[0]
        t = self.norm_ca(q)
        q = q + self.cross(t + q_pos, anchors, value, spatial_shapes)
        q = q + self.ffn(self.norm_ffn(q))
        return q


class BoxDecoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.embed_dim
        self.cfg = cfg
        self.content_proj = nn.Linear(d, d)
        self.content_norm = nn.LayerNorm(d)
        self.wh_head = nn.Linear(d, 2)
        self.anchor_pos = MLP(d, d, d, 2)
        self.layers = nn.ModuleList(DecoderLayer(cfg) for _ in range(cfg.n_dec_layers))
        self.offset_mlp = MLP(d, d, 4, 3)
        # Zero final offset layer: refinement starts from the selected anchors.
        nn.init.constant_(self.offset_mlp.layers[-1].weight, 0.0)
        nn.init.constant_(self.offset_mlp.layers[-1].bias, 0.0)
        nn.init.constant_(self.wh_head.bias, to_logit(0.1))

    def query_selection(
        self, features: MultiScaleFeatures, prompts: list[PromptEmbedding]
    ) -> DetectionQuerySet:
        """Pick the top-K prompt-similar locations as initial queries.

        Similarity is the max dot product over the given prompt embeddings;
        (cx, cy) come from the winning location's grid coordinates, (w, h)
        from a learned head on its feature.
        """
        flat = features.flatten()  # (B, S, D)
        prompt_mat = stack_prompts(prompts).to(flat.dtype)  # (C, D)
        sim = flat @ prompt_mat.t()  # (B, S, C)
        score = sim.max(-1).values  # (B, S)
        k = self.cfg.query_select_k
        if k > flat.shape[1]:
            raise ValueError(f"query_select_k={k} exceeds {flat.shape[1]} locations")
        top = score.topk(k, dim=1).indices  # (B, K)

        grid = features.location_grid().to(flat.device)  # (S, 2)
        centers = grid[top]  # (B, K, 2)
        gather = top.unsqueeze(-1)
        feats = flat.gather(1, gather.expand(-1, -1, flat.shape[-1]))  # (B, K, D)
        sel_sim = sim.gather(1, gather.expand(-1, -1, sim.shape[-1]))  # (B, K, C)

        wh_logits = self.wh_head(feats)
        anchor_logits = torch.cat([to_logit(centers), wh_logits], dim=-1)
        queries = self.content_norm(self.content_proj(feats))
        return DetectionQuerySet(
            queries=queries,
            anchor_logits=anchor_logits,
            selection_logits=list(sel_sim.transpose(1, 2)),
            layer_anchors=[torch.sigmoid(anchor_logits)],
        )

    def decode(self, qs: DetectionQuerySet, features: MultiScaleFeatures) -> DetectionQuerySet:
        """Run the refinement stack, recording every intermediate state."""
        flat = features.flatten()
        shapes = features.spatial_shapes
        q, anchor_logits = qs.queries, qs.anchor_logits
        for layer in self.layers:
            anchors = torch.sigmoid(anchor_logits)
            q_pos = self.anchor_pos(box_position_embedding(anchors, self.cfg.embed_dim))
            q = layer(q, q_pos, anchors, flat, shapes)
            delta = self.offset_mlp(q)
            anchor_logits = anchor_logits + delta
            qs.layer_offsets.append(delta)
            qs.layer_queries.append(q)
            qs.layer_anchors.append(torch.sigmoid(anchor_logits))
        qs.queries = q
        qs.anchor_logits = anchor_logits
        return qs

    @staticmethod
    def classify(
        qs: DetectionQuerySet, prompts: list[PromptEmbedding], image_index: int = 0
    ) -> DetectionSet:
        """Prompt embeddings act as the classification weights: C x N logits
        from a plain dot product, whatever the prompt kind."""
        prompt_mat = stack_prompts(prompts)
        q = qs.queries[image_index]  # (N, D)
        logits = prompt_mat.to(q.dtype) @ q.t()  # (C, N)
        return DetectionSet(
            boxes=qs.anchors[image_index],
            logits=logits,
            labels=[p.label for p in prompts],
        )


def postprocess(ds: DetectionSet, threshold: float) -> list[Detection]:
    """All (query, class) pairs scoring >= threshold, best first. No NMS:
    one-to-one matching during training makes it redundant."""
    scores = ds.scores.detach()
    keep = (scores >= threshold).nonzero(as_tuple=False)
    results = []
    for c, n in keep.tolist():
        cx, cy, w, h = (float(v) for v in ds.boxes[n])
        results.append(
            Detection(NormalizedBox(cx, cy, w, h), ds.labels[c], float(scores[c, n]))
        )
    results.sort(key=lambda d: -d.score)
    return results
