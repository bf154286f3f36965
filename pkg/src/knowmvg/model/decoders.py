from __future__ import annotations

import math

import torch
from torch import nn

from .layers import MLP, TwoWayTransformer


class BoxDecoder(nn.Module):
    """Prompted decoder whose output-token state drives box regression.

    The same instance serves both the local (sparse box prompt) and the
    global (dense mask prompt + token prompt) routes.
    """

    def __init__(self, channels: int, d_model: int, heads: int, depth: int = 2):
        super().__init__()
        self.out_token = nn.Parameter(torch.randn(1, 1, channels) * 0.1)
        self.transformer = TwoWayTransformer(channels, heads, depth)
        self.out_proj = nn.Linear(channels, d_model)

    def forward(self, image: torch.Tensor, image_pe: torch.Tensor, prompts: torch.Tensor):
        """Returns (B x d_m output state, B x G x G attention of the output token)."""
        b, c, g, _ = image.shape
        tokens = torch.cat([self.out_token.expand(b, -1, -1).to(prompts.dtype), prompts], 1)
        tokens, _, attn = self.transformer(tokens, image.flatten(2).transpose(1, 2), image_pe)
        return self.out_proj(tokens[:, 0]), attn[:, 0].reshape(b, g, g)


class MaskDecoder(nn.Module):
    """Two-way mask decoder producing G' x G' mask logits from z_enc and prompt tokens."""

    def __init__(self, channels: int, heads: int, grid: int, mask_size: int, depth: int = 2):
        super().__init__()
        self.mask_token = nn.Parameter(torch.randn(1, 1, channels) * 0.1)
        self.transformer = TwoWayTransformer(channels, heads, depth)
        n_up = int(math.log2(mask_size // grid))
        ups, ch = [], channels
        for i in range(n_up):
            ups.append(nn.ConvTranspose2d(ch, ch // 2, 2, stride=2))
            ch //= 2
            if i < n_up - 1:
                ups.append(nn.GELU())
        self.upscale = nn.Sequential(*ups)
        self.hyper = MLP(channels, channels, ch, depth=3)
        self.grid = grid

    def forward(self, image: torch.Tensor, image_pe: torch.Tensor, prompts: torch.Tensor) -> torch.Tensor:
        b, c, g, _ = image.shape
        tokens = torch.cat([self.mask_token.expand(b, -1, -1).to(image.dtype), prompts], 1)
        tokens, img, _ = self.transformer(tokens, image.flatten(2).transpose(1, 2), image_pe)
        up = self.upscale(img.transpose(1, 2).reshape(b, c, g, g))
        weights = self.hyper(tokens[:, 0])
        return torch.einsum("bc,bchw->bhw", weights, up)
