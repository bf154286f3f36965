from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import nn


class PositionEmbeddingRandom(nn.Module):
    """Random Fourier features of 2-D coordinates in [0, 1].

    Both the frequency matrix and the output projection are drawn from
    ``seed`` and stored as buffers, so the encoding is fixed and reproducible.
    """

    def __init__(self, out_dim: int, frequencies: int = 128, seed: int = 0, scale: float = 1.0):
        super().__init__()
        g = torch.Generator().manual_seed(seed)
        self.register_buffer("gaussian", scale * torch.randn(2, frequencies, generator=g))
        self.register_buffer("proj", torch.randn(2 * frequencies, out_dim, generator=g) / math.sqrt(frequencies))
        self.seed = seed

    def forward(self, coords: torch.Tensor) -> torch.Tensor:
        c = (2 * coords - 1) @ self.gaussian.to(coords.dtype) * (2 * math.pi)
        return torch.cat([c.sin(), c.cos()], -1) @ self.proj.to(coords.dtype)

    def grid(self, size: int, dtype=torch.float32) -> torch.Tensor:
        """Encoding of cell centres of a ``size x size`` grid, flattened row-major: 1 x size^2 x c."""
        centres = (torch.arange(size, dtype=dtype) + 0.5) / size
        yy, xx = torch.meshgrid(centres, centres, indexing="ij")
        return self.forward(torch.stack([xx, yy], -1).reshape(1, -1, 2))


class PromptEncoder(nn.Module):
    """Frozen geometric prompt encoder: box corners -> sparse tokens, mask -> dense grid."""

    def __init__(self, channels: int, grid: int, frequencies: int = 128, seed: int = 0):
        super().__init__()
        self.pe = PositionEmbeddingRandom(channels, frequencies, seed)
        self.corner_embed = nn.Parameter(torch.randn(2, channels) * 0.1)  # e^tl, e^br
        hidden = max(4, channels // 4)
        self.mask_proj = nn.Sequential(  # P_mask
            nn.Conv2d(1, hidden, 3, padding=1), nn.GELU(), nn.Conv2d(hidden, channels, 1)
        )
        self.grid = grid

    def encode_box(self, corners: torch.Tensor) -> torch.Tensor:
        """B x 4 corners -> B x 2 x c sparse embedding (top-left row, bottom-right row)."""
        pts = corners.view(-1, 2, 2)
        return self.pe(pts) + self.corner_embed.to(corners.dtype)

    def image_pe(self, dtype=torch.float32) -> torch.Tensor:
        return self.pe.grid(self.grid, dtype)

    def resize(self, mask: torch.Tensor) -> torch.Tensor:
        """Bilinear resize of B x G' x G' masks to the G x G feature grid."""
        m = mask.unsqueeze(1)
        if m.shape[-1] == self.grid and m.shape[-2] == self.grid:
            return m
        return F.interpolate(m, size=(self.grid, self.grid), mode="bilinear", align_corners=False)

    def mask_to_dense(self, mask: torch.Tensor) -> torch.Tensor:
        return self.mask_proj(self.resize(mask))
