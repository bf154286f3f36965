"""Seed sweep over the four KPS/GLA cells at the default config.

Results are appended to ``<out>/results.json`` after every cell, so an
interrupted sweep resumes where it stopped. The acceptance suite reads the
same file when its code and config fingerprints match.

    python scripts/run_ablation.py --seeds 0 1 2 3 4 --out artifacts/ablation
"""
import argparse
import dataclasses
import json
import logging
import time
from pathlib import Path

from knowmvg.config import RunConfig, load_config
from knowmvg.pipeline import CELLS, _fingerprint, cell_config, code_fingerprint, prepare, run_phase0, run_training
from knowmvg.pipeline import ablation_table, table_csv, table_markdown
from knowmvg.metrics import EvalReport


def config_key(cfg: RunConfig) -> dict:
    d = cfg.to_dict()
    d.pop("seed")
    d.pop("ablation")
    d.pop("paths")
    return d


def load_results(path: Path, cfg: RunConfig) -> dict:
    fresh = {"code": code_fingerprint(), "config": config_key(cfg), "runs": {}}
    if not path.exists():
        return fresh
    old = json.loads(path.read_text())
    if old.get("code") != fresh["code"] or old.get("config") != fresh["config"]:
        logging.warning("stale results in %s (code or config changed); starting over", path)
        return fresh
    return old


def sweep(cfg: RunConfig, seeds: list[int], out: Path) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    path = out / "results.json"
    results = load_results(path, cfg)
    for seed in seeds:
        todo = [c for c in CELLS if f"{seed}/{c[0]}" not in results["runs"]]
        if not todo:
            continue
        base = cell_config(cfg, seed, True, True)
        splits, kg = prepare(base)
        t0 = time.time()
        state, p0 = run_phase0(base, splits, kg)
        p0_seconds = time.time() - t0
        for name, kps, gla in todo:
            outcome = run_training(cell_config(cfg, seed, kps, gla), splits, kg, state, p0)
            results["runs"][f"{seed}/{name}"] = {
                "seed": seed, "cell": name, "kps": kps, "gla": gla,
                "val": dataclasses.asdict(outcome.val), "test": dataclasses.asdict(outcome.test),
                "best_step": outcome.best_step, "train_seconds": outcome.seconds,
                "phase0_seconds": p0_seconds, "phase0_mask_iou": p0["mask_iou"],
                "val_history": outcome.val_history, "data": _fingerprint(splits),
            }
            path.write_text(json.dumps(results, indent=1))
            logging.info("seed %d %-8s val miou %.4f (%.0fs)", seed, name, outcome.val.miou, outcome.seconds)
    return results


def summarize(results: dict, seeds: list[int], out: Path, split: str = "val") -> list[dict]:
    per_cell = {name: [EvalReport(**results["runs"][f"{s}/{name}"][split]) for s in seeds] for name, _, _ in CELLS}
    rows = ablation_table(per_cell)
    (out / "ablation.md").write_text(table_markdown(rows))
    (out / "ablation.csv").write_text(table_csv(rows))
    return rows


if __name__ == "__main__":
    ap = argparse.ArgumentParser()
    ap.add_argument("--config")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    ap.add_argument("--out", default="artifacts/ablation")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    cfg = load_config(args.config)
    res = sweep(cfg, args.seeds, Path(args.out))
    print(table_markdown(summarize(res, args.seeds, Path(args.out))))
