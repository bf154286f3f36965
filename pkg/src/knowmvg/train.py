"""Phase-0 mask-decoder pretraining, end-to-end training and evaluation."""
from __future__ import annotations

import copy
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .boxes import Box
from .config import RunConfig
from .data import VOCAB, GroundingSample, encode_tokens
from .kg import KnowledgeGraph
from .losses import LossBreakdown, box_loss, ce_phrase_loss, total_loss
from .metrics import EvalReport, evaluate
from .model import KnowMVG
from .numerics import NonFiniteError

log = logging.getLogger(__name__)


class Phase0Error(RuntimeError):
    pass


class TrainingDivergence(FloatingPointError):
    def __init__(self, step: int, breakdown: dict):
        super().__init__(f"non-finite loss at step {step}: {breakdown}")
        self.step = step
        self.breakdown = breakdown


def set_determinism(seed: int, deterministic: bool = True) -> None:
    torch.manual_seed(seed)
    np.random.seed(seed % 2**32)
    if deterministic:
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True)
        torch.utils.deterministic.fill_uninitialized_memory = False


def collate(samples: list[GroundingSample], max_tokens: int, dtype=torch.float32, vocab=VOCAB) -> dict:
    t = max(len(s.tokens) for s in samples)
    if t > max_tokens:
        raise ValueError(f"report with {t} tokens exceeds max_tokens={max_tokens}")
    ids = torch.zeros(len(samples), t, dtype=torch.long)
    labels = torch.zeros(len(samples), t, dtype=dtype)
    pad = torch.ones(len(samples), t, dtype=torch.bool)
    for i, s in enumerate(samples):
        n = len(s.tokens)
        ids[i, :n] = torch.tensor(encode_tokens(s.tokens, vocab))
        labels[i, :n] = torch.tensor(s.phrase_labels, dtype=dtype)
        pad[i, :n] = False
    batch = {
        "images": torch.from_numpy(np.stack([s.image for s in samples])).to(dtype).unsqueeze(1),
        "token_ids": ids,
        "pad_mask": pad,
        "labels": labels,
        "boxes": torch.tensor([s.gold_box.as_list() for s in samples], dtype=dtype),
    }
    if all(s.mask is not None for s in samples):
        batch["masks"] = torch.from_numpy(np.stack([s.mask for s in samples])).to(dtype)
    return batch


def build_model(cfg: RunConfig, kg: KnowledgeGraph | None) -> KnowMVG:
    torch.manual_seed(cfg.seed)
    return KnowMVG(cfg.model, len(VOCAB), cfg.data.image_size, kg,
                   kps_on=cfg.ablation.kps_on, gla_on=cfg.ablation.gla_on)


def compute_loss(model: KnowMVG, batch: dict, cfg: RunConfig) -> tuple[LossBreakdown, object]:
    out = model(batch["images"], batch["token_ids"], batch["pad_mask"])
    txt = ce_phrase_loss(out.phrase_logits, batch["labels"], ~batch["pad_mask"])
    l1, g = box_loss(out.fused_box, batch["boxes"])
    weights = cfg.train.loss_weights
    breakdown = total_loss(txt, l1, g, None if weights == [1.0, 1.0, 1.0] else tuple(weights))
    if cfg.train.local_box_weight and out.global_route_used:
        l1_loc, g_loc = box_loss(out.local_box, batch["boxes"])
        extra = cfg.train.local_box_weight * (l1_loc + g_loc)
        breakdown.total = breakdown.total + extra
    return breakdown, out


def _downsample_mask(masks: torch.Tensor, size: int) -> torch.Tensor:
    return (F.adaptive_avg_pool2d(masks.unsqueeze(1), size).squeeze(1) >= 0.5).to(masks.dtype)


def mask_iou(pred: torch.Tensor, gold: torch.Tensor) -> torch.Tensor:
    p, g = pred > 0.5, gold > 0.5
    inter = (p & g).flatten(1).sum(1).float()
    union = (p | g).flatten(1).sum(1).float()
    return inter / union.clamp_min(1)


def _phase0_prompts(model: KnowMVG, boxes: torch.Tensor, gen: torch.Generator) -> torch.Tensor:
    """Prompt tokens the frozen decoder should tolerate: none, a jittered box, or noise tokens."""
    b, c = boxes.shape[0], model.cfg.channels
    kind = int(torch.randint(3, (1,), generator=gen))
    if kind == 0:
        return boxes.new_zeros(b, 0, c)
    if kind == 1:
        jitter = 0.05 * torch.randn(boxes.shape, generator=gen, dtype=boxes.dtype)
        x1y1 = (boxes[:, :2] + jitter[:, :2]).clamp(0, 0.98)
        x2y2 = torch.maximum(boxes[:, 2:] + jitter[:, 2:], x1y1 + 0.02).clamp(max=1.0)
        return model.encode_box_prompt(torch.cat([x1y1, x2y2], 1))
    n = int(torch.randint(1, model.cfg.top_k + 2, (1,), generator=gen))
    return torch.randn(b, n, c, generator=gen, dtype=boxes.dtype)


def mask_forward(model: KnowMVG, images, prompts):
    z = model.image_encoder(images)
    logits = model.mask_decoder(z, model.image_pe(), prompts)
    return z, logits


@torch.no_grad()
def evaluate_masks(model: KnowMVG, samples: list[GroundingSample], cfg: RunConfig) -> float:
    ious = []
    for i in range(0, len(samples), 32):
        batch = collate(samples[i:i + 32], cfg.model.max_tokens)
        b = batch["images"].shape[0]
        _, logits = mask_forward(model, batch["images"], batch["images"].new_zeros(b, 0, cfg.model.channels))
        ious.append(mask_iou(torch.sigmoid(logits), _downsample_mask(batch["masks"], cfg.model.mask_size)))
    return float(torch.cat(ious).mean())


def pretrain_mask_decoder(model: KnowMVG, train: list[GroundingSample], val: list[GroundingSample],
                          cfg: RunConfig) -> dict:
    """Train backbone + mask decoder + prompt encoder on lesion masks, then freeze them."""
    p0 = cfg.phase0
    gen = torch.Generator().manual_seed(cfg.seed + 1)
    params = [p for m in model.frozen_modules(include_backbone=True).values() for p in m.parameters()]
    opt = torch.optim.AdamW(params, lr=p0.lr, weight_decay=0.0)
    history = []
    for step in range(p0.steps):
        idx = torch.randint(len(train), (p0.batch_size,), generator=gen).tolist()
        batch = collate([train[i] for i in idx], cfg.model.max_tokens)
        target = _downsample_mask(batch["masks"], cfg.model.mask_size)
        prompts = _phase0_prompts(model, batch["boxes"], gen)
        z, logits = mask_forward(model, batch["images"], prompts)
        # second pass refines with the first mask as a dense prompt, which trains P_mask
        dense = model.mask_to_dense(torch.sigmoid(logits).detach())
        logits2 = model.mask_decoder(z + dense, model.image_pe(), prompts)
        loss = sum(_mask_loss(lg, target) for lg in (logits, logits2))
        opt.zero_grad()
        loss.backward()
        opt.step()
        history.append(float(loss.detach()))
    iou = evaluate_masks(model, val, cfg)
    log.info("phase-0: %d steps, final loss %.4f, held-out mask IoU %.3f", p0.steps, history[-1] if history else float("nan"), iou)
    if iou < p0.min_mask_iou:
        raise Phase0Error(
            f"mask decoder reached held-out IoU {iou:.3f} < {p0.min_mask_iou} after {p0.steps} steps "
            f"(last losses {[round(h, 4) for h in history[-5:]]})"
        )
    model.freeze_pretrained(include_backbone=cfg.train.freeze_backbone)
    return {"mask_iou": iou, "final_loss": history[-1] if history else None, "loss_history": history}


def _mask_loss(logits: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    bce = F.binary_cross_entropy_with_logits(logits, target)
    prob = torch.sigmoid(logits)
    inter = (prob * target).flatten(1).sum(1)
    dice = 1 - (2 * inter + 1) / (prob.flatten(1).sum(1) + target.flatten(1).sum(1) + 1)
    return bce + dice.mean()


def warmup_decay(step: int, warmup: int, total: int) -> float:
    if warmup and step < warmup:
        return (step + 1) / warmup
    return max(0.0, (total - step) / max(1, total - warmup))


@torch.no_grad()
def predict(model: KnowMVG, samples: list[GroundingSample], cfg: RunConfig, batch_size: int = 32):
    was_training = model.training
    model.eval()
    preds = []
    for i in range(0, len(samples), batch_size):
        batch = collate(samples[i:i + batch_size], cfg.model.max_tokens, dtype=model.raw_alpha.dtype)
        out = model(batch["images"], batch["token_ids"], batch["pad_mask"])
        preds.extend(Box.from_tensor(b) for b in out.fused_box)
    model.train(was_training)
    return preds


def evaluate_model(model: KnowMVG, samples: list[GroundingSample], cfg: RunConfig) -> EvalReport:
    return evaluate(predict(model, samples, cfg), [s.gold_box for s in samples])


@dataclass
class TrainResult:
    model: KnowMVG
    log: list[dict] = field(default_factory=list)
    val_history: list[dict] = field(default_factory=list)
    best_step: int = -1
    best_val: EvalReport | None = None
    seconds: float = 0.0


def train_model(model: KnowMVG, train: list[GroundingSample], val: list[GroundingSample], cfg: RunConfig,
                callback=None) -> TrainResult:
    """Optimize the total loss with AdamW + warmup/linear decay; keep the best-validation weights."""
    tc = cfg.train
    gen = torch.Generator().manual_seed(cfg.seed + 2)
    params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.AdamW(params, lr=tc.lr, weight_decay=tc.weight_decay)
    sched = torch.optim.lr_scheduler.LambdaLR(opt, lambda s: warmup_decay(s, tc.warmup, tc.steps))
    result = TrainResult(model)
    best_miou, best_state = -1.0, None
    order: list[int] = []
    start = time.perf_counter()
    model.train()
    for step in range(tc.steps + 1):
        if step % tc.eval_every == 0 or step == tc.steps:
            if val:
                report = evaluate_model(model, val, cfg)
                result.val_history.append({"step": step, "miou": report.miou, "ap50": report.ap50})
                if report.miou > best_miou:
                    best_miou, result.best_step, result.best_val = report.miou, step, report
                    best_state = copy.deepcopy(model.state_dict())
        if step == tc.steps:
            break
        if len(order) < tc.batch_size:
            order += torch.randperm(len(train), generator=gen).tolist()
        idx, order = order[: tc.batch_size], order[tc.batch_size:]
        batch = collate([train[i] for i in idx], cfg.model.max_tokens, dtype=model.raw_alpha.dtype)
        try:
            breakdown, out = compute_loss(model, batch, cfg)
        except NonFiniteError as exc:  # the box-loss contract rejects non-finite boxes before a loss exists
            raise TrainingDivergence(step, {"total": float("nan"), "reason": str(exc)}) from exc
        floats = breakdown.as_floats()
        if not math.isfinite(floats["total"]):
            raise TrainingDivergence(step, floats)
        opt.zero_grad()
        breakdown.total.backward()
        opt.step()
        sched.step()
        floats["step"] = step
        floats["lr"] = sched.get_last_lr()[0]
        if out.alpha is not None:
            floats["alpha"] = float(out.alpha.detach())
        result.log.append(floats)
        if callback is not None:
            callback(step, floats)
    if best_state is not None:
        model.load_state_dict(best_state)
    result.seconds = time.perf_counter() - start
    return result
