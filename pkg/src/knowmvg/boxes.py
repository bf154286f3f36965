from __future__ import annotations

from dataclasses import dataclass

import torch

MIN_SIZE = 1e-3


@dataclass(frozen=True)
class Box:
    """Normalized corner box; zero-area and out-of-range boxes are rejected."""

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        if not (0.0 <= self.x1 < self.x2 <= 1.0 and 0.0 <= self.y1 < self.y2 <= 1.0):
            raise ValueError(f"invalid box {self.as_list()}")

    def as_list(self) -> list[float]:
        return [self.x1, self.y1, self.x2, self.y2]

    @property
    def area(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1)

    @classmethod
    def from_tensor(cls, t: torch.Tensor) -> "Box":
        return cls(*(float(v) for v in t.detach().cpu().double().tolist()))

    def to_pixels(self, width: int, height: int) -> tuple[int, int, int, int]:
        """Pixel corners, rounding half up."""
        import math

        return (
            math.floor(self.x1 * width + 0.5),
            math.floor(self.y1 * height + 0.5),
            math.floor(self.x2 * width + 0.5),
            math.floor(self.y2 * height + 0.5),
        )


def cxcywh_to_corners(b: torch.Tensor) -> torch.Tensor:
    cx, cy, w, h = b.unbind(-1)
    return torch.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], -1)


def corners_to_cxcywh(b: torch.Tensor) -> torch.Tensor:
    x1, y1, x2, y2 = b.unbind(-1)
    return torch.stack([(x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1], -1)


def logits_to_box(raw: torch.Tensor, eps: float = MIN_SIZE) -> torch.Tensor:
    """Map 4 head outputs to valid corners: sigmoid -> (cx, cy, w, h), size floor, clip to [0, 1]."""
    cxcywh = torch.sigmoid(raw)
    cx, cy = cxcywh[..., 0], cxcywh[..., 1]
    w = cxcywh[..., 2].clamp_min(eps)
    h = cxcywh[..., 3].clamp_min(eps)
    corners = cxcywh_to_corners(torch.stack([cx, cy, w, h], -1))
    return corners.clamp(0.0, 1.0)
