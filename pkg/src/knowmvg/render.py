"""Figure export: box overlays, global mask and per-route attention heatmaps."""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch
from matplotlib import colormaps
from PIL import Image, ImageDraw

from .boxes import Box
from .data import GroundingSample
from .model import KnowMVG
from .train import collate

COLORS = {"gold": (0, 200, 0), "local": (255, 160, 0), "fused": (220, 0, 0)}


def normalize_map(a: np.ndarray) -> np.ndarray:
    """Min-max scale to [0, 1]; constant maps become all zeros."""
    a = np.asarray(a, dtype=np.float64)
    lo, hi = a.min(), a.max()
    if hi - lo <= 0:
        return np.zeros_like(a)
    return (a - lo) / (hi - lo)


def heatmap_image(a: np.ndarray, size: int) -> Image.Image:
    rgba = colormaps["viridis"](normalize_map(a))
    img = Image.fromarray((rgba[..., :3] * 255).astype(np.uint8))
    return img.resize((size, size), Image.NEAREST)


def overlay(image: np.ndarray, boxes: dict[str, Box]) -> tuple[Image.Image, dict]:
    h, w = image.shape
    canvas = Image.fromarray((np.clip(image, 0, 1) * 255).astype(np.uint8)).convert("RGB")
    draw = ImageDraw.Draw(canvas)
    pixels = {}
    for name, box in boxes.items():
        px = box.to_pixels(w, h)
        pixels[name] = list(px)
        draw.rectangle([px[0], px[1], px[2] - 1, px[3] - 1], outline=COLORS.get(name, (0, 0, 255)))
    return canvas, pixels


@torch.no_grad()
def render_sample(model: KnowMVG, sample: GroundingSample, out_dir: str | Path, max_tokens: int) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    model.eval()
    batch = collate([sample], max_tokens, dtype=model.raw_alpha.dtype)
    res = KnowMVG.to_grounding_outputs(model(batch["images"], batch["token_ids"], batch["pad_mask"]),
                                       batch["pad_mask"])[0]
    size = sample.image.shape[0]
    canvas, pixels = overlay(sample.image, {"gold": sample.gold_box, "local": res.local_box, "fused": res.fused_box})
    files = {"overlay": out / "overlay.png"}
    canvas.save(files["overlay"])
    if res.global_mask is not None:
        files["global_mask"] = out / "global_mask.png"
        heatmap_image(res.global_mask, size).save(files["global_mask"])
    routes = ["local", "global"] if len(res.attention_maps) == 2 else ["single"]
    for route, attn in zip(routes, res.attention_maps):
        files[f"attention_{route}"] = out / f"attention_{route}.png"
        heatmap_image(attn, size).save(files[f"attention_{route}"])
    meta = {
        "sample_id": sample.sample_id,
        "report": sample.report,
        "boxes_px": pixels,
        "alpha": res.alpha,
        "prompt_indices": res.prompt_indices,
        "files": {k: v.name for k, v in files.items()},
    }
    (out / "render.json").write_text(json.dumps(meta, indent=1))
    return meta
