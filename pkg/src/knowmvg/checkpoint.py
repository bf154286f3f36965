"""Checkpoint archive: a JSON manifest plus raw little-endian tensor payloads in one zip."""
from __future__ import annotations

import io
import json
import os
import zipfile
from pathlib import Path

import numpy as np
import torch

from .config import RunConfig, from_dict
from .data import VOCAB
from .kg import KnowledgeGraph, Node
from .model import KnowMVG

FORMAT = "knowmvg-checkpoint/1"
_DTYPES = {torch.float32: "<f4", torch.float64: "<f8", torch.int64: "<i8"}
_EPOCH = (1980, 1, 1, 0, 0, 0)


class CheckpointError(ValueError):
    pass


def _entry(zf: zipfile.ZipFile, name: str, data: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=_EPOCH)
    info.compress_type = zipfile.ZIP_STORED
    info.external_attr = 0o644 << 16
    zf.writestr(info, data)


def kg_to_dict(kg: KnowledgeGraph | None) -> dict | None:
    if kg is None:
        return None
    return {
        "nodes": [{"id": n.node_id, "text": n.text, "kind": n.kind} for n in kg.nodes],
        "triples": [list(t) for t in kg.triples],
    }


def kg_from_dict(raw: dict | None) -> KnowledgeGraph | None:
    if raw is None:
        return None
    nodes = tuple(Node(n["id"], n["text"], n["kind"]) for n in raw["nodes"])
    return KnowledgeGraph(nodes, tuple(tuple(t) for t in raw["triples"]))


def save_checkpoint(path: str | os.PathLike, model: KnowMVG, cfg: RunConfig, step: int = 0,
                    extra: dict | None = None) -> Path:
    frozen = model.frozen_names()
    entries = []
    payloads = []
    for i, (name, t) in enumerate(model.state_dict().items()):
        t = t.detach().cpu().contiguous()
        if t.dtype not in _DTYPES:
            raise CheckpointError(f"unsupported dtype {t.dtype} for {name}")
        fname = f"tensors/{i:04d}.bin"
        entries.append({
            "name": name,
            "shape": list(t.shape),
            "dtype": _DTYPES[t.dtype],
            "frozen": name in frozen,
            "file": fname,
        })
        payloads.append((fname, t.numpy().astype(_DTYPES[t.dtype], copy=False).tobytes()))
    manifest = {
        "format": FORMAT,
        "step": step,
        "pe_seed": cfg.model.pe_seed,
        "embedder_seed": cfg.model.embedder_seed,
        "config": cfg.to_dict(),
        "ablation": {"kps_on": model.kps_on, "gla_on": model.gla_on},
        "vocab": VOCAB,
        "kg": kg_to_dict(model.kg),
        "tensors": entries,
        "extra": extra or {},
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w") as zf:
        _entry(zf, "manifest.json", json.dumps(manifest, indent=1, sort_keys=True).encode("utf-8"))
        for fname, data in payloads:
            _entry(zf, fname, data)
    path.write_bytes(buf.getvalue())
    return path


def read_manifest(path: str | os.PathLike) -> dict:
    with zipfile.ZipFile(path) as zf:
        manifest = json.loads(zf.read("manifest.json"))
    if manifest.get("format") != FORMAT:
        raise CheckpointError(f"unknown checkpoint format {manifest.get('format')!r}")
    return manifest


def read_tensors(path: str | os.PathLike) -> dict[str, torch.Tensor]:
    manifest = read_manifest(path)
    out = {}
    with zipfile.ZipFile(path) as zf:
        for e in manifest["tensors"]:
            arr = np.frombuffer(zf.read(e["file"]), dtype=e["dtype"]).reshape(e["shape"])
            out[e["name"]] = torch.from_numpy(arr.astype(arr.dtype.newbyteorder("="), copy=True))
    return out


def check_compatible(cfg: RunConfig, manifest: dict) -> None:
    """Raise if ``cfg`` disagrees with the checkpoint on any model dimension."""
    saved = manifest["config"]["model"]
    ours = cfg.to_dict()["model"]
    diffs = [k for k in saved if saved[k] != ours.get(k)]
    if diffs or manifest["config"]["data"]["image_size"] != cfg.data.image_size:
        raise CheckpointError(f"config does not match checkpoint dimensions: {diffs or ['data.image_size']}")


def load_checkpoint(path: str | os.PathLike, cfg: RunConfig | None = None) -> tuple[KnowMVG, RunConfig, dict]:
    manifest = read_manifest(path)
    saved_cfg = from_dict(manifest["config"])
    if cfg is not None:
        check_compatible(cfg, manifest)
    if manifest["vocab"] != VOCAB:
        raise CheckpointError("checkpoint vocabulary differs from this build")
    model = KnowMVG(saved_cfg.model, len(VOCAB), saved_cfg.data.image_size, kg_from_dict(manifest["kg"]),
                    **manifest["ablation"])
    tensors = read_tensors(path)
    expected = model.state_dict()
    missing = set(expected) - set(tensors)
    if missing:
        raise CheckpointError(f"checkpoint lacks tensors {sorted(missing)[:5]}")
    for name, t in tensors.items():
        if name not in expected:
            raise CheckpointError(f"unexpected tensor {name}")
        if tuple(expected[name].shape) != tuple(t.shape):
            raise CheckpointError(f"{name}: shape {tuple(t.shape)} vs model {tuple(expected[name].shape)}")
    dtype = tensors["raw_alpha"].dtype
    model.to(dtype)
    model.load_state_dict(tensors)
    frozen = {e["name"] for e in manifest["tensors"] if e["frozen"]}
    for name, p in model.named_parameters():
        p.requires_grad_(name not in frozen)
    return model, saved_cfg, manifest
