"""Bipartite matching, detection losses, and the region-level contrastive
alignment loss.

Weight conventions (kept in one place): matching uses 2.0/5.0/2.0 for
classification/L1/GIoU costs; the final loss weights are 1.0/5.0/2.0 plus
1.0 for the alignment term. L1 here is the per-coordinate mean over cxcywh,
applied consistently in the cost matrix and the loss.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from scipy.optimize import linear_sum_assignment
from torch import Tensor

from .geometry import giou_matrix

MATCH_WEIGHTS = {"cls": 2.0, "l1": 5.0, "giou": 2.0}
LOSS_WEIGHTS = {"cls": 1.0, "l1": 5.0, "giou": 2.0, "align": 1.0}


@dataclass
class MatchResult:
    """One-to-one assignment between queries and ground-truth objects."""

    pairs: list[tuple[int, int]]  # (query index, gt index)
    total_cost: float

    def query_indices(self) -> list[int]:
        return [q for q, _ in self.pairs]

    def gt_indices(self) -> list[int]:
        return [g for _, g in self.pairs]


@dataclass
class LossBreakdown:
    cls: float
    l1: float
    giou: float
    align: float
    total: float
    aux: list[dict] = field(default_factory=list)


def focal_loss(
    logits: Tensor,
    targets: Tensor,
    alpha: float = 0.25,
    gamma: float = 2.0,
    reduction: str = "mean",
) -> Tensor:
    """Sigmoid focal loss; targets are per-logit binary labels."""
    if logits.shape != targets.shape:
        raise ValueError(f"shape mismatch {tuple(logits.shape)} vs {tuple(targets.shape)}")
    targets = targets.to(logits.dtype)
    bce = F.binary_cross_entropy_with_logits(logits, targets, reduction="none")
    p = torch.sigmoid(logits)
    p_t = p * targets + (1 - p) * (1 - targets)
    alpha_t = alpha * targets + (1 - alpha) * (1 - targets)
    loss = alpha_t * (1 - p_t) ** gamma * bce
    if reduction == "mean":
        return loss.mean()
    if reduction == "sum":
        return loss.sum()
    return loss


def _classification_cost(
    pred_logits: Tensor, gt_labels: Tensor, alpha: float, gamma: float
) -> Tensor:
    """Focal-style matching cost: cost of labeling query n positive for the
    class of gt g, minus the background cost it would otherwise pay."""
    p = torch.sigmoid(pred_logits)  # (C, N)
    pos = alpha * (1 - p) ** gamma * (-F.logsigmoid(pred_logits))
    neg = (1 - alpha) * p**gamma * (-F.logsigmoid(-pred_logits))
    return (pos - neg)[gt_labels].t()  # (N, G)


def match_cost_matrix(
    pred_boxes: Tensor,
    pred_logits: Tensor,
    gt_boxes: Tensor,
    gt_labels: Tensor,
    alpha: float = 0.25,
    gamma: float = 2.0,
) -> Tensor:
    """(N, G) combined matching cost."""
    cost_cls = _classification_cost(pred_logits, gt_labels, alpha, gamma)
    cost_l1 = torch.cdist(pred_boxes, gt_boxes, p=1) / 4
    cost_giou = 1 - giou_matrix(pred_boxes, gt_boxes)
    return (
        MATCH_WEIGHTS["cls"] * cost_cls
        + MATCH_WEIGHTS["l1"] * cost_l1
        + MATCH_WEIGHTS["giou"] * cost_giou
    )


def hungarian_match(
    pred_boxes: Tensor,
    pred_logits: Tensor,
    gt_boxes: Tensor,
    gt_labels: Tensor,
    alpha: float = 0.25,
    gamma: float = 2.0,
) -> MatchResult:
    """Globally cost-minimal one-to-one matching of queries to ground truth.

    Args:
        pred_boxes: (N, 4) cxcywh.
        pred_logits: (C, N).
        gt_boxes: (G, 4) cxcywh, G <= N.
        gt_labels: (G,) class indices into the prompt list.
    """
    n, g = pred_boxes.shape[0], gt_boxes.shape[0]
    if g > n:
        raise ValueError(f"{g} ground truths exceed {n} queries")
    if g == 0:
        return MatchResult([], 0.0)
    with torch.no_grad():
        cost = match_cost_matrix(pred_boxes, pred_logits, gt_boxes, gt_labels, alpha, gamma)
    return solve_assignment(cost.detach().cpu().numpy())


def solve_assignment(cost: np.ndarray) -> MatchResult:
    """Minimum-cost assignment on an (N, G) cost matrix, N >= G."""
    rows, cols = linear_sum_assignment(cost)
    pairs = sorted(zip(rows.tolist(), cols.tolist()), key=lambda p: p[1])
    total = float(cost[rows, cols].sum())
    return MatchResult(pairs, total)


def detection_loss(
    match: MatchResult,
    pred_boxes: Tensor,
    pred_logits: Tensor,
    gt_boxes: Tensor,
    gt_labels: Tensor,
    alpha: float = 0.25,
    gamma: float = 2.0,
    cls_normalization: str = "matched",
) -> dict[str, Tensor]:
    """Per-component detection loss for one image.

    L1 and GIoU average over matched pairs (L1 additionally over the 4
    coordinates); classification is sigmoid focal over every (class, query)
    logit with unmatched queries as all-zero background rows, normalized by
    the matched-pair count ("matched") or the logit count ("mean").
    """
    C, N = pred_logits.shape
    targets = torch.zeros_like(pred_logits)
    if match.pairs:
        q_idx = torch.as_tensor(match.query_indices())
        g_idx = torch.as_tensor(match.gt_indices())
        targets[gt_labels[g_idx], q_idx] = 1.0
        matched_pred = pred_boxes[q_idx]
        matched_gt = gt_boxes[g_idx]
        l1 = (matched_pred - matched_gt).abs().mean()
        giou = (1 - giou_matrix(matched_pred, matched_gt).diagonal()).mean()
    else:
        l1 = pred_boxes.sum() * 0.0
        giou = pred_boxes.sum() * 0.0

    focal = focal_loss(pred_logits, targets, alpha, gamma, reduction="none")
    if cls_normalization == "matched":
        cls = focal.sum() / max(len(match.pairs), 1)
    elif cls_normalization == "mean":
        cls = focal.mean()
    else:
        raise ValueError(f"unknown cls_normalization {cls_normalization!r}")
    return {"cls": cls, "l1": l1, "giou": giou}


def infonce_align(
    visual: Tensor,
    text: Tensor,
    labels: Sequence | None = None,
    temperature: float = 0.07,
) -> Tensor:
    """Contrastive alignment between row-paired visual and text embeddings.

    Row i of each input describes the same region/category; off-diagonal
    columns act as negatives. Columns sharing row i's label are masked out
    of the denominator so duplicated categories are not punished as
    negatives. Expects unit-norm rows; a single pair yields exactly zero.
    """
    if visual.shape != text.shape:
        raise ValueError("visual and text embedding stacks must align")
    k = visual.shape[0]
    logits = visual @ text.t() / temperature  # (K, K)
    if labels is not None:
        if len(labels) != k:
            raise ValueError("labels must match the number of rows")
        same = torch.tensor(
            [[li == lj for lj in labels] for li in labels], device=logits.device
        )
        allowed = ~same | torch.eye(k, dtype=torch.bool, device=logits.device)
        logits = logits.masked_fill(~allowed, float("-inf"))
    log_prob = logits.diagonal() - torch.logsumexp(logits, dim=1)
    return -log_prob.mean()


def total_loss(
    layer_components: list[dict],
    encoder_aux: dict | None = None,
    align=0.0,
) -> tuple:
    """Combine per-decoder-layer components, the encoder auxiliary, and the
    alignment term under the fixed weights.

    Works on floats or tensors. Returns (total, LossBreakdown) where the
    breakdown stores summed raw components as floats.
    """
    if not layer_components:
        raise ValueError("need at least one decoder layer breakdown")
    parts = list(layer_components) + ([encoder_aux] if encoder_aux else [])
    cls = sum(p["cls"] for p in parts)
    l1 = sum(p["l1"] for p in parts)
    giou = sum(p["giou"] for p in parts)
    total = (
        LOSS_WEIGHTS["cls"] * cls
        + LOSS_WEIGHTS["l1"] * l1
        + LOSS_WEIGHTS["giou"] * giou
        + LOSS_WEIGHTS["align"] * align
    )
    breakdown = LossBreakdown(
        cls=_as_float(cls),
        l1=_as_float(l1),
        giou=_as_float(giou),
        align=_as_float(align),
        total=_as_float(total),
        aux=[{k: _as_float(v) for k, v in p.items()} for p in parts],
    )
    return total, breakdown


def _as_float(x) -> float:
    return float(x.detach()) if isinstance(x, Tensor) else float(x)
