from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import Sequence

from .boxes import Box
from .numerics import ContractError

THRESHOLDS = {"ap10": 0.1, "ap30": 0.3, "ap50": 0.5}


def _overlap(a: Box, b: Box) -> tuple[float, float, float]:
    iw = max(0.0, min(a.x2, b.x2) - max(a.x1, b.x1))
    ih = max(0.0, min(a.y2, b.y2) - max(a.y1, b.y1))
    inter = iw * ih
    union = a.area + b.area - inter
    enclose = (max(a.x2, b.x2) - min(a.x1, b.x1)) * (max(a.y2, b.y2) - min(a.y1, b.y1))
    return inter, union, enclose


def iou(a: Box, b: Box) -> float:
    inter, union, _ = _overlap(a, b)
    return inter / union


def giou(a: Box, b: Box) -> float:
    inter, union, enclose = _overlap(a, b)
    return inter / union - (enclose - union) / enclose


@dataclass
class EvalReport:
    miou: float
    ap10: float
    ap30: float
    ap50: float
    per_sample_iou: list[float]

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1, sort_keys=True)


def evaluate(preds: Sequence[Box], golds: Sequence[Box]) -> EvalReport:
    """Per-sample IoU, its mean, and the fraction strictly above each AP threshold."""
    if len(preds) != len(golds):
        raise ContractError(f"{len(preds)} predictions for {len(golds)} gold boxes")
    if not preds:
        raise ContractError("cannot evaluate an empty prediction set")
    ious = [iou(p, g) for p, g in zip(preds, golds)]
    n = len(ious)
    aps = {name: sum(v > t for v in ious) / n for name, t in THRESHOLDS.items()}
    return EvalReport(miou=sum(ious) / n, per_sample_iou=ious, **aps)
