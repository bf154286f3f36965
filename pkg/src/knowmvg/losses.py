"""Training objectives: phrase BCE, smooth-L1 + GIoU box loss, and their sum."""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .numerics import ContractError


@dataclass
class LossBreakdown:
    txt: torch.Tensor
    l1: torch.Tensor
    giou_loss: torch.Tensor
    box: torch.Tensor
    total: torch.Tensor

    def as_floats(self) -> dict[str, float]:
        return {k: float(torch.as_tensor(getattr(self, k)).detach()) for k in ("txt", "l1", "giou_loss", "box", "total")}


def ce_phrase_loss(logits: torch.Tensor, labels: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
    """Mean binary cross-entropy over (unmasked) report tokens."""
    if logits.shape != labels.shape:
        raise ContractError(f"{tuple(logits.shape)} logits vs {tuple(labels.shape)} labels")
    per_token = F.binary_cross_entropy_with_logits(logits, labels.to(logits.dtype), reduction="none")
    if mask is None:
        return per_token.mean()
    mask = mask.to(logits.dtype)
    return (per_token * mask).sum() / mask.sum().clamp_min(1.0)


def iou_giou(a: torch.Tensor, b: torch.Tensor, eps: float = 0.0) -> tuple[torch.Tensor, torch.Tensor]:
    """Pairwise IoU and GIoU of corner boxes ``(..., 4)``."""
    area_a = (a[..., 2] - a[..., 0]) * (a[..., 3] - a[..., 1])
    area_b = (b[..., 2] - b[..., 0]) * (b[..., 3] - b[..., 1])
    lt = torch.maximum(a[..., :2], b[..., :2])
    rb = torch.minimum(a[..., 2:], b[..., 2:])
    wh = (rb - lt).clamp_min(0)
    inter = wh[..., 0] * wh[..., 1]
    union = area_a + area_b - inter
    iou = inter / (union + eps)
    lt_c = torch.minimum(a[..., :2], b[..., :2])
    rb_c = torch.maximum(a[..., 2:], b[..., 2:])
    wh_c = rb_c - lt_c
    enclose = wh_c[..., 0] * wh_c[..., 1]
    giou = iou - (enclose - union) / (enclose + eps)
    return iou, giou


def smooth_l1(pred: torch.Tensor, gold: torch.Tensor, beta: float = 1.0) -> torch.Tensor:
    diff = (pred - gold).abs()
    return torch.where(diff < beta, 0.5 * diff**2 / beta, diff - 0.5 * beta)


def box_loss(pred: torch.Tensor, gold: torch.Tensor, beta: float = 1.0) -> tuple[torch.Tensor, torch.Tensor]:
    """(smooth-L1 averaged over coordinates and batch, mean of 1 - GIoU)."""
    if pred.shape != gold.shape or pred.shape[-1] != 4:
        raise ContractError("box_loss expects matching (..., 4) corner tensors")
    l1 = smooth_l1(pred, gold, beta).mean()
    _, giou = iou_giou(pred, gold)
    return l1, (1.0 - giou).mean()


def total_loss(
    txt: torch.Tensor,
    l1: torch.Tensor,
    giou_loss: torch.Tensor,
    weights: tuple[float, float, float] | None = None,
) -> LossBreakdown:
    if weights is None:
        box = l1 + giou_loss
        total = txt + box
    else:
        w_txt, w_l1, w_giou = weights
        box = w_l1 * l1 + w_giou * giou_loss
        total = w_txt * txt + box
    return LossBreakdown(txt, l1, giou_loss, box, total)
