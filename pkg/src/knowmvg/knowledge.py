"""Knowledge prompts: node text embeddings, GCN propagation, top-k selection."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import NamedTuple, Protocol

import numpy as np
import torch
from torch import nn

from .kg import KnowledgeGraph, normalize
from .numerics import ContractError, assert_finite


class TextEmbedder(Protocol):
    dim: int

    def __call__(self, text: str) -> np.ndarray: ...


def _hash64(seed: int, j: int, token: str) -> int:
    digest = hashlib.blake2b(f"{seed}|{j}|{token}".encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


class HashBagEmbedder:
    """Signed feature hashing of whitespace tokens.

    Each token adds +-1 at ``n_hashes`` positions chosen by a seeded
    blake2b hash, so embeddings are bit-reproducible across processes.
    """

    def __init__(self, dim: int = 64, seed: int = 0, n_hashes: int = 4):
        self.dim = dim
        self.seed = seed
        self.n_hashes = n_hashes

    def __call__(self, text: str) -> np.ndarray:
        vec = np.zeros(self.dim, dtype=np.float64)
        for tok in normalize(text).split():
            for j in range(self.n_hashes):
                h = _hash64(self.seed, j, tok)
                vec[h % self.dim] += 1.0 if (h >> 63) & 1 else -1.0
        return vec


class TransformerEmbedder:
    """Mean-pooled encoder states from a Hugging Face checkpoint (e.g. roberta-base)."""

    def __init__(self, name: str = "roberta-base", dim: int | None = None):
        from transformers import AutoModel, AutoTokenizer

        self.tokenizer = AutoTokenizer.from_pretrained(name)
        self.model = AutoModel.from_pretrained(name).eval()
        self.dim = dim or self.model.config.hidden_size

    @torch.no_grad()
    def __call__(self, text: str) -> np.ndarray:
        enc = self.tokenizer(text, return_tensors="pt")
        states = self.model(**enc).last_hidden_state[0]
        return states.mean(0).double().numpy()[: self.dim]


@dataclass
class NodeEmbeddings:
    matrix: torch.Tensor  # N x d
    stage: str = "initial"

    def __post_init__(self):
        if self.matrix.dim() != 2:
            raise ContractError("node embeddings must be a matrix")
        assert_finite(self.matrix, "node embeddings")

    @property
    def num_nodes(self) -> int:
        return self.matrix.shape[0]


def embed_nodes(kg: KnowledgeGraph, embedder: TextEmbedder, dim: int | None = None) -> NodeEmbeddings:
    dim = embedder.dim if dim is None else dim
    rows = [np.asarray(embedder(text), dtype=np.float64) for text in kg.texts]
    for i, row in enumerate(rows):
        if row.shape != (dim,):
            raise ContractError(f"embedder returned shape {row.shape} for node {i}, configured d={dim}")
    matrix = torch.from_numpy(np.stack(rows)) if rows else torch.zeros(0, dim, dtype=torch.float64)
    return NodeEmbeddings(matrix, "initial")


def normalized_adjacency(adjacency) -> torch.Tensor:
    """``D^-1/2 (A + I) D^-1/2`` with D the degree matrix of ``A + I``."""
    a = torch.tensor(np.array(adjacency), dtype=torch.float64)
    if a.dim() != 2 or a.shape[0] != a.shape[1]:
        raise ContractError(f"adjacency must be square, got {tuple(a.shape)}")
    a = a + torch.eye(a.shape[0], dtype=a.dtype)
    d = a.sum(1).rsqrt()
    return d[:, None] * a * d[None, :]


@dataclass
class GcnWeights:
    weights: list[torch.Tensor]
    biases: list[torch.Tensor] = field(default_factory=list)

    def __post_init__(self):
        if not self.biases:
            self.biases = [torch.zeros(w.shape[1], dtype=w.dtype) for w in self.weights]
        for a, b in zip(self.weights, self.weights[1:]):
            if a.shape[1] != b.shape[0]:
                raise ContractError("GCN layer dimensions do not chain")
        for w in self.weights + self.biases:
            assert_finite(w, "GCN weights")

    @property
    def depth(self) -> int:
        return len(self.weights)


def gcn_forward(
    embeds: NodeEmbeddings, adjacency, weights: GcnWeights, activation: str = "relu"
) -> NodeEmbeddings:
    """Stacked ``act(Â H W + b)``; the last layer stays linear."""
    if embeds.stage != "initial":
        raise ContractError("gcn_forward expects initial embeddings")
    h = embeds.matrix
    n = h.shape[0]
    if n == 0:
        return NodeEmbeddings(h.new_zeros(0, weights.weights[-1].shape[1]), "propagated")
    a_hat = adjacency if isinstance(adjacency, torch.Tensor) and adjacency.is_floating_point() \
        else normalized_adjacency(adjacency)
    if a_hat.shape != (n, n):
        raise ContractError(f"adjacency {tuple(a_hat.shape)} does not match {n} nodes")
    a_hat = a_hat.to(h.dtype)
    for i, (w, b) in enumerate(zip(weights.weights, weights.biases)):
        h = a_hat @ (h @ w) + b
        if i < weights.depth - 1 and activation == "relu":
            h = torch.relu(h)
    return NodeEmbeddings(h, "propagated")


class GCN(nn.Module):
    """Trainable parameter holder for :func:`gcn_forward`."""

    def __init__(self, dim: int, depth: int = 2, hidden: int | None = None):
        super().__init__()
        hidden = hidden or dim
        dims = [dim] + [hidden] * (depth - 1) + [dim]
        self.weights = nn.ParameterList(
            nn.Parameter(torch.empty(a, b)) for a, b in zip(dims, dims[1:])
        )
        self.biases = nn.ParameterList(nn.Parameter(torch.zeros(b)) for b in dims[1:])
        for w in self.weights:
            nn.init.xavier_uniform_(w)

    def forward(self, h: torch.Tensor, a_hat: torch.Tensor) -> torch.Tensor:
        gw = GcnWeights(list(self.weights), list(self.biases))
        return gcn_forward(NodeEmbeddings(h.to(gw.weights[0].dtype)), a_hat, gw).matrix


class Similarity(NamedTuple):
    value: float
    degenerate: bool


def cosine_scores(nodes: torch.Tensor, query: torch.Tensor) -> torch.Tensor:
    """Cosine similarity of every row of ``nodes`` (..., N, d) with ``query`` (..., d).

    Pairs where either vector has zero norm score exactly 0.
    """
    if nodes.shape[-1] != query.shape[-1]:
        raise ContractError("node and query dimensions differ")
    dots = (nodes * query.unsqueeze(-2)).sum(-1)
    norms = nodes.norm(dim=-1) * query.norm(dim=-1, keepdim=True)
    degenerate = norms == 0
    scores = dots / torch.where(degenerate, torch.ones_like(norms), norms)
    return torch.where(degenerate, torch.zeros_like(scores), scores).clamp(-1.0, 1.0)


def score_similarity(node_embed, query) -> Similarity:
    x = torch.as_tensor(node_embed, dtype=torch.float64)
    y = torch.as_tensor(query, dtype=torch.float64)
    if x.shape != y.shape or x.dim() != 1:
        raise ContractError("score_similarity expects two vectors of equal length")
    degenerate = bool(x.norm() == 0 or y.norm() == 0)
    return Similarity(float(cosine_scores(x[None], y)[0]), degenerate)


@dataclass
class KnowledgePrompts:
    embeddings: torch.Tensor  # k x d
    source_indices: list[int]
    scores: torch.Tensor  # k, differentiable w.r.t. the query
    requested_k: int = 0

    @property
    def k(self) -> int:
        return len(self.source_indices)

    @classmethod
    def empty(cls, dim: int, dtype=torch.float32) -> "KnowledgePrompts":
        return cls(torch.zeros(0, dim, dtype=dtype), [], torch.zeros(0, dtype=dtype), 0)


def topk_order(scores: torch.Tensor, k: int) -> torch.Tensor:
    """Indices of the ``k`` largest scores along the last dim; ties go to the lower index."""
    order = torch.sort(scores.detach(), dim=-1, descending=True, stable=True).indices
    return order[..., : min(k, scores.shape[-1])]


def select_topk(embeds: NodeEmbeddings, query: torch.Tensor, k: int) -> KnowledgePrompts:
    if embeds.stage != "propagated":
        raise ContractError("select_topk expects propagated embeddings")
    if k < 0:
        raise ContractError("k must be non-negative")
    scores = cosine_scores(embeds.matrix, query.to(embeds.matrix.dtype))
    idx = topk_order(scores, k)
    return KnowledgePrompts(embeds.matrix[idx], idx.tolist(), scores[idx], k)


def select_topk_batch(nodes: torch.Tensor, queries: torch.Tensor, k: int):
    """Batched selection: ``nodes`` N x d, ``queries`` B x d -> (B x k' x d, B x k', B x k')."""
    scores = cosine_scores(nodes.unsqueeze(0), queries)
    idx = topk_order(scores, k)
    return nodes[idx], idx, torch.gather(scores, 1, idx)

