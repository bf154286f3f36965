"""Synthetic chest-film-like grounding data.

Each image is a smooth textured background with one lesion (blob, wedge or
bar) placed inside a named 3x3 region. Findings have preferred regions, and
the bundled knowledge fixtures map each finding to descriptions of those
regions, so knowledge prompts carry real localization signal.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .boxes import Box
from .kg import CorpusRecord, entity_filename, normalize

REGIONS = {
    "upper-left": (0, 0), "upper-middle": (0, 1), "upper-right": (0, 2),
    "mid-left": (1, 0), "central": (1, 1), "mid-right": (1, 2),
    "lower-left": (2, 0), "lower-middle": (2, 1), "lower-right": (2, 2),
}

# finding -> (shape, preferred regions, localization descriptions)
FINDINGS = {
    "pneumothorax": ("wedge", ["upper-left", "upper-right"], ["lung apex", "pleural space", "upper zone"]),
    "pleural effusion": ("bar", ["lower-left", "lower-right"], ["costophrenic angle", "lung base", "pleural space"]),
    "cardiomegaly": ("blob", ["central", "lower-middle"], ["cardiac silhouette", "mediastinum"]),
    "nodule": ("blob", ["mid-left", "mid-right", "upper-left", "upper-right"], ["lung parenchyma", "mid zone"]),
    "consolidation": ("blob", ["lower-left", "lower-right", "mid-left", "mid-right"], ["lung base", "lower lobe", "mid zone"]),
    "atelectasis": ("bar", ["lower-left", "lower-right", "lower-middle"], ["lung base", "lower lobe"]),
    "hilar enlargement": ("blob", ["mid-left", "mid-right", "central"], ["hilum", "mediastinum", "mid zone"]),
    "apical scarring": ("wedge", ["upper-left", "upper-middle", "upper-right"], ["lung apex", "upper zone"]),
}

TEMPLATES = [
    "{f} in the {r}",
    "there is {f} in the {r}",
    "{f} is seen in the {r} . no {o}",
    "findings : {f} in the {r}",
]
REGION_FREE_TEMPLATES = [
    "{f} is present",
    "there is {f} . no {o}",
]

PAD, UNK = "<pad>", "<unk>"


def build_vocab() -> list[str]:
    words = {PAD, UNK}
    for t in TEMPLATES + REGION_FREE_TEMPLATES:
        words.update(w for w in t.split() if not w.startswith("{"))
    for f in FINDINGS:
        words.update(f.split())
    for r in REGIONS:
        words.update(r.split())
    return [PAD, UNK] + sorted(words - {PAD, UNK})


VOCAB = build_vocab()


def tokenize(text: str) -> list[str]:
    return text.lower().split()


def encode_tokens(tokens: list[str], vocab: list[str] = VOCAB) -> list[int]:
    index = {w: i for i, w in enumerate(vocab)}
    return [index.get(t, index[UNK]) for t in tokens]


@dataclass
class GroundingSample:
    sample_id: str
    image: np.ndarray  # H x W float32 in [0, 1] (single channel)
    report: str
    phrase_labels: list[int]
    gold_box: Box
    kg_entities: list[str] = field(default_factory=list)
    mask: np.ndarray | None = None  # H x W uint8 lesion mask

    def __post_init__(self):
        if len(self.phrase_labels) != len(tokenize(self.report)):
            raise ValueError(f"{self.sample_id}: phrase labels do not match report tokens")

    @property
    def tokens(self) -> list[str]:
        return tokenize(self.report)


def _background(rng: np.random.Generator, size: int) -> np.ndarray:
    coarse = rng.normal(size=(6, 6))
    img = np.asarray(Image.fromarray(coarse.astype(np.float32)).resize((size, size), Image.BICUBIC))
    img = (img - img.min()) / (np.ptp(img) + 1e-8)
    yy, xx = np.mgrid[0:size, 0:size] / size
    ribs = 0.5 + 0.5 * np.sin(2 * np.pi * (yy * rng.uniform(4, 7) + 0.3 * xx + rng.uniform()))
    base = 0.25 + 0.2 * img + 0.08 * ribs
    return base + rng.normal(scale=0.03, size=(size, size))


def _shape(rng: np.random.Generator, kind: str, size: int, cx: float, cy: float, w: float, h: float) -> np.ndarray:
    yy, xx = (np.mgrid[0:size, 0:size] + 0.5) / size
    u, v = (xx - cx) / (w / 2), (yy - cy) / (h / 2)
    if kind == "blob":
        r = u**2 + v**2
        return np.clip(1.0 - r, 0, None) ** 0.5 * (r < 1)
    if kind == "bar":
        return ((np.abs(u) < 1) & (np.abs(v) < 1)).astype(np.float64) * (0.8 + 0.2 * np.cos(np.pi * v / 2))
    # wedge: triangle with apex up or down
    t = (v + 1) / 2 if rng.uniform() < 0.5 else (1 - v) / 2
    return ((np.abs(u) <= t) & (np.abs(v) < 1)).astype(np.float64)


def _mass_fraction_inside(lesion: np.ndarray, box_px: tuple[int, int, int, int]) -> float:
    x1, y1, x2, y2 = box_px
    total = lesion.sum()
    return float(lesion[y1:y2, x1:x2].sum() / total) if total > 0 else 0.0


def make_sample(rng: np.random.Generator, sample_id: str, size: int = 128, region_free_prob: float = 0.25) -> GroundingSample:
    finding = list(FINDINGS)[rng.integers(len(FINDINGS))]
    kind, regions, _ = FINDINGS[finding]
    region = regions[rng.integers(len(regions))]
    row, col = REGIONS[region]
    w = rng.uniform(0.14, 0.28) * (1.4 if kind == "bar" else 1.0)
    h = rng.uniform(0.14, 0.28) * (0.55 if kind == "bar" else 1.0)
    cx = np.clip((col + rng.uniform(0.3, 0.7)) / 3, w / 2 + 0.02, 1 - w / 2 - 0.02)
    cy = np.clip((row + rng.uniform(0.3, 0.7)) / 3, h / 2 + 0.02, 1 - h / 2 - 0.02)
    lesion = _shape(rng, kind, size, cx, cy, w, h)

    image = _background(rng, size) + rng.uniform(0.35, 0.55) * lesion
    # quantize exactly as load_split decodes PNGs, so disk round-trips are bit-identical
    image = np.round(np.clip(image, 0, 1) * 255).astype(np.uint8).astype(np.float32) / np.float32(255)

    ys, xs = np.nonzero(lesion > 0)
    box_px = (int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1)
    frac = _mass_fraction_inside(lesion, box_px)
    assert frac >= 0.95, f"gold box holds only {frac:.3f} of the lesion mass"
    gold = Box(box_px[0] / size, box_px[1] / size, box_px[2] / size, box_px[3] / size)

    other = [f for f in FINDINGS if f != finding]
    other = other[rng.integers(len(other))]
    if rng.uniform() < region_free_prob:
        template = REGION_FREE_TEMPLATES[rng.integers(len(REGION_FREE_TEMPLATES))]
    else:
        template = TEMPLATES[rng.integers(len(TEMPLATES))]
    report = template.format(f=finding, r=region, o=other)
    tokens = tokenize(report)
    target = finding.split()
    labels = [0] * len(tokens)
    for i in range(len(tokens) - len(target) + 1):
        if tokens[i:i + len(target)] == target:
            labels[i:i + len(target)] = [1] * len(target)
            break
    entities = [finding] + ([other] if "{o}" in template else [])
    return GroundingSample(
        sample_id, image, report, labels, gold, entities, (lesion > 0).astype(np.uint8)
    )


def generate_dataset(seed: int, n: int, size: int = 128, region_free_prob: float = 0.25) -> list[GroundingSample]:
    if n < 1:
        raise ValueError("n must be at least 1")
    children = np.random.SeedSequence(seed).spawn(n)
    return [
        make_sample(np.random.default_rng(s), f"s{seed}-{i:05d}", size, region_free_prob)
        for i, s in enumerate(children)
    ]


def split_dataset(samples: list, val_fraction: float, test_fraction: float) -> dict[str, list]:
    n = len(samples)
    n_val, n_test = int(round(n * val_fraction)), int(round(n * test_fraction))
    n_train = n - n_val - n_test
    return {
        "train": samples[:n_train],
        "val": samples[n_train:n_train + n_val],
        "test": samples[n_train + n_val:],
    }


def corpus_from_samples(samples: list[GroundingSample]) -> list[CorpusRecord]:
    """Report text as the question and the grounded finding as the answer."""
    records = []
    for s in samples:
        answer = " ".join(t for t, y in zip(s.tokens, s.phrase_labels) if y)
        records.append(CorpusRecord(s.sample_id, s.report, answer))
    return records


def lexicon_terms() -> list[str]:
    return list(FINDINGS)


def knowledge_fixtures() -> dict[str, list[str]]:
    return {f: list(desc) for f, (_, _, desc) in FINDINGS.items()}


def write_fixtures(out_dir: str | os.PathLike) -> tuple[Path, Path]:
    """Write ``lexicon.txt`` and ``knowledge/<entity>.json`` under ``out_dir``."""
    out = Path(out_dir)
    (out / "knowledge").mkdir(parents=True, exist_ok=True)
    lexicon = out / "lexicon.txt"
    lexicon.write_text("\n".join(lexicon_terms()) + "\n", encoding="utf-8")
    for entity, desc in knowledge_fixtures().items():
        (out / "knowledge" / entity_filename(normalize(entity))).write_text(json.dumps(desc) + "\n", encoding="utf-8")
    return lexicon, out / "knowledge"


def write_corpus(records: list[CorpusRecord], path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps({"id": r.record_id, "question": r.question_text, "answer": r.answer_text}) + "\n")


def save_split(samples: list[GroundingSample], out_dir: str | os.PathLike, split: str) -> Path:
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    path = out / f"{split}.jsonl"
    with open(path, "w", encoding="utf-8") as fh:
        for s in samples:
            img_rel = f"images/{s.sample_id}.png"
            Image.fromarray(np.round(s.image * 255).astype(np.uint8), mode="L").save(out / img_rel)
            record = {
                "id": s.sample_id,
                "image": img_rel,
                "report": s.report,
                "phrase_labels": s.phrase_labels,
                "box": s.gold_box.as_list(),
                "entities": s.kg_entities,
            }
            if s.mask is not None:
                mask_rel = f"images/{s.sample_id}_mask.png"
                Image.fromarray(s.mask * 255, mode="L").save(out / mask_rel)
                record["mask"] = mask_rel
            fh.write(json.dumps(record) + "\n")
    return path


def load_split(data_dir: str | os.PathLike, split: str) -> list[GroundingSample]:
    root = Path(data_dir)
    samples = []
    for line in (root / f"{split}.jsonl").read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        image = np.asarray(Image.open(root / rec["image"]).convert("L"), dtype=np.float32) / 255
        mask = None
        if rec.get("mask"):
            mask = (np.asarray(Image.open(root / rec["mask"]).convert("L")) > 127).astype(np.uint8)
        samples.append(GroundingSample(
            rec["id"], image, rec["report"], list(rec["phrase_labels"]), Box(*rec["box"]),
            list(rec.get("entities", [])), mask,
        ))
    return samples


def write_dataset(seed: int, cfg_data, out_dir: str | os.PathLike) -> dict[str, list[GroundingSample]]:
    samples = generate_dataset(seed, cfg_data.n_samples, cfg_data.image_size, cfg_data.region_free_prob)
    splits = split_dataset(samples, cfg_data.val_fraction, cfg_data.test_fraction)
    for name, part in splits.items():
        save_split(part, out_dir, name)
    write_corpus(corpus_from_samples(splits["train"]), Path(out_dir) / "corpus.jsonl")
    write_fixtures(out_dir)
    return splits
