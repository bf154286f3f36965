from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

from ..numerics import ContractError
from .layers import MLP, MultiHeadAttention


@dataclass
class LatentTokens:
    h_box: torch.Tensor  # B x d_m
    h_vlm: torch.Tensor  # B x d
    phrase_logits: torch.Tensor  # B x T


class ImageEncoder(nn.Module):
    """Strided conv stack: B x 1 x H x W -> B x c x G x G."""

    def __init__(self, image_size: int, grid: int, channels: int):
        super().__init__()
        factor = image_size // grid
        n_down = int(math.log2(factor))
        if 2**n_down != factor:
            raise ContractError("image_size / grid must be a power of two")
        widths = [1] + [max(8, channels >> (n_down - i)) for i in range(1, n_down)] + [channels]
        layers = []
        for a, b in zip(widths, widths[1:]):
            layers += [nn.Conv2d(a, b, 3, stride=2, padding=1), nn.GELU()]
        layers.append(nn.Conv2d(channels, channels, 1))
        self.net = nn.Sequential(*layers)
        self.image_size = image_size
        self.grid = grid

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        if image.shape[-2:] != (self.image_size, self.image_size):
            raise ContractError(f"expected {self.image_size}x{self.image_size} images, got {tuple(image.shape[-2:])}")
        return self.net(image)


class _MMBlock(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.self_attn = MultiHeadAttention(dim, heads)
        self.cross = MultiHeadAttention(dim, heads)
        self.mlp = MLP(dim, 2 * dim, dim)
        self.n1, self.n2, self.n3 = nn.LayerNorm(dim), nn.LayerNorm(dim), nn.LayerNorm(dim)

    def forward(self, seq, image, pad):
        seq = self.n1(seq + self.self_attn(seq, seq, seq, key_padding_mask=pad)[0])
        seq = self.n2(seq + self.cross(seq, image, image)[0])
        return self.n3(seq + self.mlp(seq))


class MultimodalEncoder(nn.Module):
    """Small stand-in for the fine-tuned VLM.

    A learned grounding query and the report tokens attend to each other and
    to the image features; the query's final state is ``h_box``.
    """

    def __init__(self, vocab_size: int, max_tokens: int, channels: int, d_model: int, d_know: int,
                 heads: int, depth: int = 2):
        super().__init__()
        self.img_proj = nn.Linear(channels, d_model)
        self.tok = nn.Embedding(vocab_size, d_model)
        self.pos = nn.Parameter(torch.randn(max_tokens + 1, d_model) * 0.02)
        self.query = nn.Parameter(torch.randn(1, 1, d_model) * 0.02)
        self.blocks = nn.ModuleList(_MMBlock(d_model, heads) for _ in range(depth))
        self.phrase_head = nn.Linear(d_model, 1)
        self.vlm_proj = nn.Linear(d_model, d_know)
        self.max_tokens = max_tokens

    def forward(self, z_enc: torch.Tensor, image_pe: torch.Tensor, token_ids: torch.Tensor,
                pad_mask: torch.Tensor) -> LatentTokens:
        b, t = token_ids.shape
        if t == 0:
            raise ContractError("report has no tokens")
        if t > self.max_tokens:
            raise ContractError(f"report longer than {self.max_tokens} tokens")
        image = self.img_proj(z_enc.flatten(2).transpose(1, 2) + image_pe)
        seq = torch.cat([self.query.expand(b, -1, -1), self.tok(token_ids)], 1) + self.pos[: t + 1]
        pad = torch.cat([pad_mask.new_zeros(b, 1), pad_mask], 1)
        for block in self.blocks:
            seq = block(seq, image, pad)
        h_box = seq[:, 0]
        return LatentTokens(h_box, self.vlm_proj(h_box), self.phrase_head(seq[:, 1:]).squeeze(-1))
