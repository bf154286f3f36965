"""Finite-difference check of the full training loss on a one-sample batch."""
from __future__ import annotations

import copy

import torch

from .config import RunConfig
from .data import generate_dataset
from .numerics import GradReport, check_gradients
from .pipeline import fixture_graph
from .train import build_model, collate, compute_loss


def small_config(cfg: RunConfig | None = None) -> RunConfig:
    cfg = copy.deepcopy(cfg or RunConfig())
    cfg.data.n_samples = 1
    return cfg


def model_gradient_reports(cfg: RunConfig | None = None, step: float = 1e-4, tol: float = 1e-4,
                           freeze: bool = True) -> list[GradReport]:
    """Gradient reports for every trainable parameter tensor of a double-precision model."""
    cfg = small_config(cfg)
    samples = generate_dataset(cfg.seed, 1, cfg.data.image_size)
    kg = fixture_graph(samples)
    model = build_model(cfg, kg).double()
    model.set_graph(kg)
    if freeze:
        model.freeze_pretrained(include_backbone=cfg.train.freeze_backbone)
    batch = collate(samples, cfg.model.max_tokens, dtype=torch.float64)
    params = {n: p for n, p in model.named_parameters() if p.requires_grad}

    def loss():
        return compute_loss(model, batch, cfg)[0].total

    return check_gradients(loss, params, step=step, tol=tol, seed=cfg.seed)
