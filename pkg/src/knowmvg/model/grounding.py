"""The grounding network: latent-token box prediction with knowledge prompts
and a frozen-mask-decoder global route fused with a box-prompted local route."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from ..boxes import Box, logits_to_box
from ..config import ModelConfig
from ..kg import KnowledgeGraph
from ..knowledge import GCN, HashBagEmbedder, embed_nodes, normalized_adjacency, select_topk_batch
from ..numerics import ContractError, assert_finite
from .decoders import BoxDecoder, MaskDecoder
from .encoders import ImageEncoder, LatentTokens, MultimodalEncoder
from .layers import MLP
from .prompt import PromptEncoder


@dataclass
class ModelOutput:
    """Batched tensors from one forward pass."""

    phrase_logits: torch.Tensor
    local_box: torch.Tensor
    fused_box: torch.Tensor
    alpha: torch.Tensor | None
    global_mask: torch.Tensor | None
    attention_maps: list[torch.Tensor]
    prompt_indices: torch.Tensor
    prompt_scores: torch.Tensor
    global_route_used: bool = False
    extras: dict = field(default_factory=dict)


@dataclass
class GroundingOutput:
    """One sample's result in plain Python / numpy form."""

    phrase_labels: list[bool]
    local_box: Box
    fused_box: Box
    global_mask: np.ndarray | None
    alpha: float | None
    attention_maps: list[np.ndarray]
    prompt_indices: list[int]


class KnowMVG(nn.Module):
    def __init__(
        self,
        cfg: ModelConfig,
        vocab_size: int,
        image_size: int,
        kg: KnowledgeGraph | None = None,
        kps_on: bool = True,
        gla_on: bool = True,
    ):
        super().__init__()
        c, dm, d = cfg.channels, cfg.d_model, cfg.d_know
        self.cfg = cfg
        self.kps_on = kps_on
        self.gla_on = gla_on
        self.image_encoder = ImageEncoder(image_size, cfg.grid, c)
        self.multimodal = MultimodalEncoder(vocab_size, cfg.max_tokens, c, dm, d, cfg.heads, cfg.encoder_depth)
        self.prompt_encoder = PromptEncoder(c, cfg.grid, cfg.pe_frequencies, cfg.pe_seed)
        self.box_decoder = BoxDecoder(c, dm, cfg.heads, cfg.decoder_depth)
        self.mask_decoder = MaskDecoder(c, cfg.heads, cfg.grid, cfg.mask_size, cfg.decoder_depth)
        self.gcn = GCN(d, cfg.gcn_depth)
        self.know_proj = nn.Linear(d, c)
        self.box_proj = nn.Linear(dm, c)
        self.head = MLP(dm, dm, 4)  # f_phi
        self.final_head = None if cfg.share_head else MLP(dm, dm, 4)
        self.raw_alpha = nn.Parameter(torch.zeros(()))
        self.set_graph(kg)

    # -- knowledge graph -------------------------------------------------
    def set_graph(self, kg: KnowledgeGraph | None) -> None:
        d = self.cfg.d_know
        if kg is None or kg.is_empty:
            h0, a_hat = torch.zeros(0, d), torch.zeros(0, 0)
        else:
            h0 = embed_nodes(kg, HashBagEmbedder(d, self.cfg.embedder_seed)).matrix
            a_hat = normalized_adjacency(kg.adjacency)
        dtype = self.raw_alpha.dtype
        self.register_buffer("node_init", h0.to(dtype), persistent=False)
        self.register_buffer("a_hat", a_hat.to(dtype), persistent=False)
        self.kg = kg

    @property
    def kps_active(self) -> bool:
        return self.kps_on and self.node_init.shape[0] > 0 and self.cfg.top_k > 0

    # -- freezing ----------------------------------------------------------
    def frozen_modules(self, include_backbone: bool = True) -> dict[str, nn.Module]:
        mods = {"mask_decoder": self.mask_decoder, "prompt_encoder": self.prompt_encoder}
        if include_backbone:
            mods["image_encoder"] = self.image_encoder
        return mods

    def freeze_pretrained(self, include_backbone: bool = True) -> None:
        for mod in self.frozen_modules(include_backbone).values():
            for p in mod.parameters():
                p.requires_grad_(False)

    def frozen_names(self) -> set[str]:
        names = {n for n, p in self.named_parameters() if not p.requires_grad}
        names |= {n for n, _ in self.named_buffers() if n.startswith("prompt_encoder.")}
        return names

    # -- stages ------------------------------------------------------------
    def encode_image(self, images: torch.Tensor) -> torch.Tensor:
        if images.dim() == 3:
            images = images.unsqueeze(1)
        if not any(p.requires_grad for p in self.image_encoder.parameters()):
            with torch.no_grad():
                return self.image_encoder(images)
        return self.image_encoder(images)

    def image_pe(self) -> torch.Tensor:
        return self.prompt_encoder.image_pe(self.raw_alpha.dtype)

    def encode_multimodal(self, z_enc, token_ids, pad_mask) -> LatentTokens:
        return self.multimodal(z_enc, self.image_pe(), token_ids, pad_mask)

    def knowledge_prompts(self, h_vlm: torch.Tensor):
        """Top-k propagated node embeddings per sample: (B x k x d, indices, scores)."""
        b = h_vlm.shape[0]
        if not self.kps_active:
            empty = h_vlm.new_zeros(b, 0, self.cfg.d_know)
            return empty, torch.zeros(b, 0, dtype=torch.long), h_vlm.new_zeros(b, 0)
        h_l = self.gcn(self.node_init, self.a_hat)
        return select_topk_batch(h_l, h_vlm, self.cfg.top_k)

    def prompt_tokens(self, h_box, h_k, scores) -> torch.Tensor:
        """t = Cat(projected h_k, projected h_box): B x (k+1) x c."""
        box_tok = self.box_proj(h_box).unsqueeze(1)
        if h_k.shape[1] == 0:
            return box_tok
        know = self.know_proj(h_k)
        if self.cfg.score_weighted_prompts:
            know = know * scores.unsqueeze(-1)
        return torch.cat([know, box_tok], 1)

    def predict_box(self, z: torch.Tensor, final: bool = False) -> torch.Tensor:
        head = self.final_head if final and self.final_head is not None else self.head
        return logits_to_box(head(z))

    def encode_box_prompt(self, corners: torch.Tensor) -> torch.Tensor:
        return self.prompt_encoder.encode_box(corners)

    def decode_local(self, z_enc, sparse):
        return self.box_decoder(z_enc, self.image_pe(), sparse)

    def decode_mask(self, z_enc, tokens) -> torch.Tensor:
        return torch.sigmoid(self.mask_decoder(z_enc, self.image_pe(), tokens))

    def mask_to_dense(self, mask) -> torch.Tensor:
        return self.prompt_encoder.mask_to_dense(mask)

    def decode_global(self, z_enc, dense, tokens):
        if dense.shape != z_enc.shape:
            raise ContractError(f"dense prompt {tuple(dense.shape)} vs features {tuple(z_enc.shape)}")
        return self.box_decoder(z_enc + dense, self.image_pe(), tokens)

    def fuse(self, z_local, z_global):
        if z_local.shape != z_global.shape:
            raise ContractError("local and global states differ in shape")
        alpha = torch.sigmoid(self.raw_alpha)
        return alpha * z_local + (1 - alpha) * z_global, alpha

    def fuse_and_predict(self, z_local, z_global):
        z_box, alpha = self.fuse(z_local, z_global)
        return self.predict_box(z_box, final=True), alpha

    # -- full pass ---------------------------------------------------------
    def forward(self, images, token_ids, pad_mask) -> ModelOutput:
        z_enc = self.encode_image(images)
        latent = self.encode_multimodal(z_enc, token_ids, pad_mask)
        h_k, idx, scores = self.knowledge_prompts(latent.h_vlm)
        tokens = self.prompt_tokens(latent.h_box, h_k, scores)

        if not self.gla_on:
            z, attn = self.box_decoder(z_enc, self.image_pe(), tokens)
            box = self.predict_box(z, final=True)
            out = ModelOutput(latent.phrase_logits, box, box, None, None, [attn], idx, scores)
        else:
            local_box = self.predict_box(latent.h_box)
            sparse = self.encode_box_prompt(local_box)
            z_local, attn_local = self.decode_local(z_enc, sparse)
            mask = self.decode_mask(z_enc, tokens)
            dense = self.mask_to_dense(mask)
            z_global, attn_global = self.decode_global(z_enc, dense, tokens)
            fused, alpha = self.fuse_and_predict(z_local, z_global)
            out = ModelOutput(latent.phrase_logits, local_box, fused, alpha, mask,
                              [attn_local, attn_global], idx, scores, global_route_used=True)
        assert_finite(out.fused_box, "fused box")
        return out

    @staticmethod
    def to_grounding_outputs(out: ModelOutput, pad_mask: torch.Tensor) -> list[GroundingOutput]:
        results = []
        for i in range(out.fused_box.shape[0]):
            n_tok = int((~pad_mask[i]).sum())
            results.append(GroundingOutput(
                phrase_labels=[bool(v > 0) for v in out.phrase_logits[i, :n_tok].tolist()],
                local_box=Box.from_tensor(out.local_box[i]),
                fused_box=Box.from_tensor(out.fused_box[i]),
                global_mask=None if out.global_mask is None else out.global_mask[i].detach().cpu().numpy(),
                alpha=None if out.alpha is None else float(out.alpha.detach()),
                attention_maps=[a[i].detach().cpu().numpy() for a in out.attention_maps],
                prompt_indices=out.prompt_indices[i].tolist(),
            ))
        return results
