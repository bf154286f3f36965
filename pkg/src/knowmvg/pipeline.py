"""End-to-end runs shared by the CLI, the experiment scripts and the acceptance suite."""
from __future__ import annotations

import copy
import csv
import io
import json
import logging
import statistics
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

from .checkpoint import save_checkpoint
from .config import RunConfig
from .data import corpus_from_samples, generate_dataset, load_split, split_dataset, write_fixtures
from .kg import KnowledgeClient, KnowledgeGraph, LexiconProvider, build_graph, load_graph, read_corpus
from .metrics import EvalReport
from .train import build_model, evaluate_model, pretrain_mask_decoder, set_determinism, train_model

log = logging.getLogger(__name__)

CELLS = [  # (name, kps_on, gla_on)
    ("baseline", False, False),
    ("kps", True, False),
    ("gla", False, True),
    ("full", True, True),
]


def fixture_graph(samples, fixture_root: str | Path | None = None) -> KnowledgeGraph:
    """Build the KG from a corpus of ``samples`` using the generator's lexicon and knowledge fixtures."""
    if fixture_root is None:
        fixture_root = tempfile.mkdtemp(prefix="knowmvg-fixtures-")
    lexicon, knowledge = write_fixtures(fixture_root)
    return build_graph(corpus_from_samples(samples), LexiconProvider.from_file(lexicon),
                       KnowledgeClient(fixture_dir=knowledge))


def prepare(cfg: RunConfig, data_dir: str | Path | None = None):
    """Splits and KG: loaded from ``data_dir`` when it holds a dataset, generated in memory otherwise."""
    if data_dir is not None and (Path(data_dir) / "train.jsonl").exists():
        root = Path(data_dir)
        splits = {name: load_split(root, name) for name in ("train", "val", "test")}
        kg_path = Path(cfg.paths.kg_file) if cfg.paths.kg_file else root / "kg.json"
        if kg_path.exists():
            kg = load_graph(kg_path)
        else:
            kg = build_graph(read_corpus(root / "corpus.jsonl"), LexiconProvider.from_file(root / "lexicon.txt"),
                             KnowledgeClient(fixture_dir=root / "knowledge"))
        return splits, kg
    samples = generate_dataset(cfg.seed, cfg.data.n_samples, cfg.data.image_size, cfg.data.region_free_prob)
    splits = split_dataset(samples, cfg.data.val_fraction, cfg.data.test_fraction)
    return splits, fixture_graph(splits["train"])




@dataclass
class RunOutcome:
    cfg: RunConfig
    model: object
    val: EvalReport | None
    test: EvalReport | None
    phase0: dict | None
    train_log: list = field(default_factory=list)
    val_history: list = field(default_factory=list)
    best_step: int = -1
    seconds: float = 0.0


def run_phase0(cfg: RunConfig, splits, kg):
    """Pretrain and freeze the mask decoder; returns (state_dict, phase-0 report)."""
    set_determinism(cfg.seed, cfg.deterministic)
    model = build_model(cfg, kg)
    report = pretrain_mask_decoder(model, splits["train"], splits["val"], cfg)
    return copy.deepcopy(model.state_dict()), report


def run_training(cfg: RunConfig, splits, kg, phase0_state=None, phase0_report=None, out_dir=None) -> RunOutcome:
    set_determinism(cfg.seed, cfg.deterministic)
    if phase0_state is None:
        phase0_state, phase0_report = run_phase0(cfg, splits, kg)
    set_determinism(cfg.seed, cfg.deterministic)
    model = build_model(cfg, kg)
    model.load_state_dict(phase0_state)
    model.freeze_pretrained(include_backbone=cfg.train.freeze_backbone)
    if out_dir is not None:
        save_checkpoint(Path(out_dir) / "initial.ckpt", model, cfg, step=0)
    res = train_model(model, splits["train"], splits["val"], cfg)
    test = evaluate_model(model, splits["test"], cfg) if splits.get("test") else None
    outcome = RunOutcome(cfg, model, res.best_val, test, phase0_report, res.log, res.val_history,
                         res.best_step, res.seconds)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_checkpoint(out / "best.ckpt", model, cfg, step=res.best_step,
                        extra={"phase0_mask_iou": (phase0_report or {}).get("mask_iou")})
        with open(out / "train_log.jsonl", "w") as fh:
            for row in res.log:
                fh.write(json.dumps(row) + "\n")
        (out / "val_history.json").write_text(json.dumps(res.val_history, indent=1))
        if res.best_val is not None:
            (out / "val_report.json").write_text(res.best_val.to_json())
    return outcome


def cell_config(cfg: RunConfig, seed: int, kps_on: bool, gla_on: bool) -> RunConfig:
    c = copy.deepcopy(cfg)
    c.seed = seed
    c.ablation.kps_on, c.ablation.gla_on = kps_on, gla_on
    return c


def run_ablation(cfg: RunConfig, seeds: list[int], cells=CELLS, split: str = "val", on_result=None) -> dict:
    """All cells for every seed; each seed shares one dataset, KG and phase-0 decoder across cells.

    Returns ``{cell: [EvalReport per seed]}`` plus dataset fingerprints under ``"_data"``.
    """
    results: dict = {name: [] for name, _, _ in cells}
    results["_data"] = []
    for seed in seeds:
        base = cell_config(cfg, seed, True, True)
        splits, kg = prepare(base)
        results["_data"].append(_fingerprint(splits))
        state, p0 = run_phase0(base, splits, kg)
        for name, kps, gla in cells:
            outcome = run_training(cell_config(cfg, seed, kps, gla), splits, kg, state, p0)
            report = outcome.val if split == "val" else outcome.test
            results[name].append(report)
            log.info("seed %d %-8s miou %.4f", seed, name, report.miou)
            if on_result is not None:
                on_result(seed, name, outcome)
    return results


def _fingerprint(splits) -> str:
    import hashlib

    h = hashlib.sha256()
    for name in ("train", "val", "test"):
        for s in splits[name]:
            h.update(s.image.tobytes())
            h.update(s.report.encode())
    return h.hexdigest()


def ablation_table(results: dict, cells=CELLS) -> list[dict]:
    """Median over seeds of each metric per cell."""
    rows = []
    for name, kps, gla in cells:
        reports = results[name]
        rows.append({
            "cell": name,
            "KPS": kps,
            "GLA": gla,
            **{m: statistics.median(getattr(r, m) for r in reports) for m in ("ap10", "ap30", "ap50", "miou")},
        })
    return rows


def table_markdown(rows: list[dict], title: str = "synthetic") -> str:
    lines = [
        f"| KPS | GLA | AP10 ({title}) | AP30 | AP50 | mIoU |",
        "|:---:|:---:|---:|---:|---:|---:|",
    ]
    for r in rows:
        mark = lambda b: "x" if b else " "  # noqa: E731
        lines.append(f"| {mark(r['KPS'])} | {mark(r['GLA'])} | {100 * r['ap10']:.2f} | {100 * r['ap30']:.2f} "
                     f"| {100 * r['ap50']:.2f} | {100 * r['miou']:.2f} |")
    return "\n".join(lines) + "\n"


def table_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=["cell", "KPS", "GLA", "ap10", "ap30", "ap50", "miou"], lineterminator="\n")
    writer.writeheader()
    for r in rows:
        writer.writerow(r)
    return buf.getvalue()


def code_fingerprint() -> str:
    """Hash of the package sources; cached experiment results are only reused when it matches."""
    import hashlib

    h = hashlib.sha256()
    root = Path(__file__).parent
    for path in sorted(root.rglob("*.py")):
        h.update(str(path.relative_to(root)).encode())
        h.update(path.read_bytes())
    return h.hexdigest()[:16]
