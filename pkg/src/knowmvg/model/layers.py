from __future__ import annotations

import torch
from torch import nn

from ..numerics import attention


class MLP(nn.Module):
    def __init__(self, d_in: int, d_hidden: int, d_out: int, depth: int = 2):
        super().__init__()
        dims = [d_in] + [d_hidden] * (depth - 1) + [d_out]
        self.layers = nn.ModuleList(nn.Linear(a, b) for a, b in zip(dims, dims[1:]))

    def forward(self, x):
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = nn.functional.gelu(x)
        return x


class MultiHeadAttention(nn.Module):
    """Multi-head wrapper around :func:`knowmvg.numerics.attention`.

    Returns the output and the head-averaged attention weights.
    """

    def __init__(self, dim: int, heads: int, kv_dim: int | None = None):
        super().__init__()
        kv_dim = kv_dim or dim
        self.heads = heads
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(kv_dim, dim, bias=False)  # a key bias only shifts logits per query: softmax ignores it
        self.v = nn.Linear(kv_dim, dim)
        self.out = nn.Linear(dim, dim)

    def _split(self, x):
        b, n, d = x.shape
        return x.view(b, n, self.heads, d // self.heads).transpose(1, 2)

    def forward(self, q, k, v, key_padding_mask: torch.Tensor | None = None):
        qh, kh, vh = self._split(self.q(q)), self._split(self.k(k)), self._split(self.v(v))
        bias = None
        if key_padding_mask is not None:
            bias = torch.zeros(key_padding_mask.shape, dtype=qh.dtype, device=qh.device)
            bias = bias.masked_fill(key_padding_mask, float("-inf"))[:, None, None, :]
        out, weights = attention(qh, kh, vh, return_weights=True, bias=bias)
        b, h, n, dh = out.shape
        return self.out(out.transpose(1, 2).reshape(b, n, h * dh)), weights.mean(1)


class TwoWayBlock(nn.Module):
    """Token self-attention, token->image, MLP, image->token (post-norm)."""

    def __init__(self, dim: int, heads: int, mlp_dim: int | None = None, skip_first_pe: bool = False):
        super().__init__()
        self.self_attn = MultiHeadAttention(dim, heads)
        self.norm1 = nn.LayerNorm(dim)
        self.cross_t2i = MultiHeadAttention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = MLP(dim, mlp_dim or 2 * dim, dim)
        self.norm3 = nn.LayerNorm(dim)
        self.cross_i2t = MultiHeadAttention(dim, heads)
        self.norm4 = nn.LayerNorm(dim)
        self.skip_first_pe = skip_first_pe

    def forward(self, tokens, image, token_pe, image_pe):
        if self.skip_first_pe:
            tokens = self.norm1(self.self_attn(tokens, tokens, tokens)[0])
        else:
            q = tokens + token_pe
            tokens = self.norm1(tokens + self.self_attn(q, q, tokens)[0])
        out, _ = self.cross_t2i(tokens + token_pe, image + image_pe, image)
        tokens = self.norm2(tokens + out)
        tokens = self.norm3(tokens + self.mlp(tokens))
        out, _ = self.cross_i2t(image + image_pe, tokens + token_pe, tokens)
        image = self.norm4(image + out)
        return tokens, image


class TwoWayTransformer(nn.Module):
    def __init__(self, dim: int, heads: int, depth: int = 2):
        super().__init__()
        self.blocks = nn.ModuleList(TwoWayBlock(dim, heads, skip_first_pe=(i == 0)) for i in range(depth))
        self.final_attn = MultiHeadAttention(dim, heads)
        self.norm = nn.LayerNorm(dim)

    def forward(self, tokens, image, image_pe):
        """``tokens`` B x T x c, ``image`` B x HW x c, ``image_pe`` 1 x HW x c.

        Returns (tokens, image, attention of every token over the image grid).
        """
        token_pe = tokens
        for block in self.blocks:
            tokens, image = block(tokens, image, token_pe, image_pe)
        out, weights = self.final_attn(tokens + token_pe, image + image_pe, image)
        return self.norm(tokens + out), image, weights
