"""Command-line entry point: ``knowmvg <verb> [options]``."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from importlib import resources
from pathlib import Path

from .config import ConfigError, RunConfig, load_config

log = logging.getLogger("knowmvg")


def resource_dir() -> Path:
    return Path(str(resources.files("knowmvg") / "resources"))


def _config(args) -> RunConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.deterministic:
        cfg.deterministic = True
    if args.out_dir:
        cfg.paths.out_dir = args.out_dir
    for kv in args.set or []:
        key, _, raw = kv.partition("=")
        from .config import set_path
        import yaml

        set_path(cfg, key, yaml.safe_load(raw))
    return cfg.validate()


def cmd_dump_config(args) -> int:
    sys.stdout.write(_config(args).dump())
    return 0


def cmd_gen_data(args) -> int:
    from .data import write_dataset

    cfg = _config(args)
    out = Path(args.data_dir or cfg.paths.data_dir)
    splits = write_dataset(cfg.seed, cfg.data, out)
    print(json.dumps({k: len(v) for k, v in splits.items()} | {"out": str(out)}))
    return 0


def cmd_build_kg(args) -> int:
    from .kg import KnowledgeClient, LexiconProvider, build_graph, read_corpus, save_graph

    cfg = _config(args)
    res = resource_dir()
    corpus = read_corpus(args.corpus or res / "corpus.jsonl")
    provider = LexiconProvider.from_file(args.lexicon or res / "lexicon.txt")
    if args.base_url:
        client = KnowledgeClient(base_url=args.base_url, cache_dir=args.cache_dir, timeout=args.timeout,
                                 retries=args.retries)
    else:
        client = KnowledgeClient(fixture_dir=args.fixtures or res / "knowledge", cache_dir=args.cache_dir)
    kg = build_graph(corpus, provider, client, max_workers=args.workers)
    out = Path(args.out or Path(cfg.paths.out_dir) / "kg.json")
    out.parent.mkdir(parents=True, exist_ok=True)
    save_graph(kg, out)
    print(json.dumps({"nodes": kg.num_nodes, "triples": len(kg.triples), "out": str(out)}))
    return 0


def _data(cfg, args):
    from .pipeline import prepare

    return prepare(cfg, args.data_dir or (cfg.paths.data_dir if Path(cfg.paths.data_dir).exists() else None))


def cmd_pretrain_mask(args) -> int:
    from .checkpoint import save_checkpoint
    from .pipeline import run_phase0
    from .train import build_model

    cfg = _config(args)
    splits, kg = _data(cfg, args)
    state, report = run_phase0(cfg, splits, kg)
    model = build_model(cfg, kg)
    model.load_state_dict(state)
    model.freeze_pretrained(include_backbone=True)
    out = Path(cfg.paths.out_dir)
    save_checkpoint(out / "phase0.ckpt", model, cfg, extra={"mask_iou": report["mask_iou"]})
    (out / "phase0.json").write_text(json.dumps(report, indent=1))
    print(json.dumps({"mask_iou": report["mask_iou"], "final_loss": report["final_loss"]}))
    return 0


def cmd_train(args) -> int:
    from .checkpoint import read_tensors
    from .pipeline import run_training

    cfg = _config(args)
    if args.kps is not None:
        cfg.ablation.kps_on = args.kps
    if args.gla is not None:
        cfg.ablation.gla_on = args.gla
    splits, kg = _data(cfg, args)
    state = report = None
    if args.phase0:
        tensors = read_tensors(args.phase0)
        state = tensors
    outcome = run_training(cfg, splits, kg, state, report, out_dir=cfg.paths.out_dir)
    summary = {"best_step": outcome.best_step, "val_miou": outcome.val.miou if outcome.val else None,
               "test_miou": outcome.test.miou if outcome.test else None, "seconds": round(outcome.seconds, 1)}
    print(json.dumps(summary))
    return 0


def cmd_eval(args) -> int:
    from .checkpoint import load_checkpoint
    from .data import load_split
    from .pipeline import prepare
    from .train import evaluate_model, set_determinism

    user_cfg = load_config(args.config) if args.config else None
    model, cfg, _ = load_checkpoint(args.checkpoint, user_cfg)
    set_determinism(cfg.seed, True)
    if args.data_dir:
        samples = load_split(args.data_dir, args.split)
    else:
        samples = prepare(cfg)[0][args.split]
    report = evaluate_model(model, samples, cfg)
    out = Path(args.out or Path(args.checkpoint).with_suffix(f".{args.split}.json"))
    out.write_text(report.to_json() + "\n")
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["sample_id", "iou"])
            for s, v in zip(samples, report.per_sample_iou):
                w.writerow([s.sample_id, repr(v)])
    print(json.dumps({k: getattr(report, k) for k in ("miou", "ap10", "ap30", "ap50")}))
    return 0


def cmd_render(args) -> int:
    from .checkpoint import load_checkpoint
    from .data import load_split
    from .pipeline import prepare
    from .render import render_sample

    model, cfg, _ = load_checkpoint(args.checkpoint)
    samples = load_split(args.data_dir, args.split) if args.data_dir else prepare(cfg)[0][args.split]
    out = Path(args.out_dir or cfg.paths.out_dir) / "figures" / samples[args.index].sample_id
    meta = render_sample(model, samples[args.index], out, cfg.model.max_tokens)
    print(json.dumps(meta["files"]))
    return 0


def cmd_ablate(args) -> int:
    from .pipeline import ablation_table, run_ablation, table_csv, table_markdown

    cfg = _config(args)
    seeds = [cfg.seed + i for i in range(args.seeds)]
    results = run_ablation(cfg, seeds, split=args.split)
    rows = ablation_table(results)
    out = Path(cfg.paths.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "ablation.md").write_text(table_markdown(rows))
    (out / "ablation.csv").write_text(table_csv(rows))
    per_seed = {k: [r.miou for r in v] for k, v in results.items() if not k.startswith("_")}
    (out / "ablation.json").write_text(json.dumps({"seeds": seeds, "median": rows, "miou_per_seed": per_seed}, indent=1))
    print(table_markdown(rows))
    return 0


def cmd_check_grads(args) -> int:
    from .gradcheck import model_gradient_reports

    cfg = _config(args)
    reports = model_gradient_reports(cfg, step=args.step, tol=args.tol)
    for r in reports:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.max_rel_error:.2e}  {r.mode:<11}  {r.parameter_name}")
    failed = [r for r in reports if not r.passed]
    print(f"{len(reports) - len(failed)}/{len(reports)} parameter tensors pass (tol {args.tol})")
    return 1 if failed else 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="knowmvg", description=__doc__)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML config file")
    common.add_argument("--seed", type=int)
    common.add_argument("--out-dir")
    common.add_argument("--deterministic", action="store_true", help="single-threaded, bit-reproducible")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key, e.g. train.steps=100")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("dump-config", parents=[common], help="print the effective config (defaults + overrides)")
    p.set_defaults(func=cmd_dump_config)

    p = sub.add_parser("gen-data", parents=[common], help="write a synthetic dataset")
    p.add_argument("--data-dir")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("build-kg", parents=[common], help="build the knowledge graph from a corpus")
    p.add_argument("--corpus")
    p.add_argument("--lexicon")
    p.add_argument("--fixtures", help="knowledge fixture directory")
    p.add_argument("--base-url", help="remote knowledge endpoint (uses KNOWMVG_KG_API_KEY)")
    p.add_argument("--cache-dir")
    p.add_argument("--timeout", type=float, default=10.0)
    p.add_argument("--retries", type=int, default=2)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out")
    p.set_defaults(func=cmd_build_kg)

    p = sub.add_parser("pretrain-mask", parents=[common], help="phase-0 mask decoder pretraining")
    p.add_argument("--data-dir")
    p.set_defaults(func=cmd_pretrain_mask)

    p = sub.add_parser("train", parents=[common], help="end-to-end training")
    p.add_argument("--data-dir")
    p.add_argument("--phase0", help="phase-0 checkpoint to start from")
    p.add_argument("--kps", dest="kps", action="store_true", default=None)
    p.add_argument("--no-kps", dest="kps", action="store_false")
    p.add_argument("--gla", dest="gla", action="store_true", default=None)
    p.add_argument("--no-gla", dest="gla", action="store_false")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data-dir")
    p.add_argument("--split", default="test", choices=["train", "val", "test"])
    p.add_argument("--out")
    p.add_argument("--csv", help="also write per-sample IoU CSV")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("render", parents=[common], help="export overlay, mask and attention figures")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data-dir")
    p.add_argument("--split", default="test", choices=["train", "val", "test"])
    p.add_argument("--index", type=int, default=0)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("ablate", parents=[common], help="KPS/GLA ablation over several seeds")
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--split", default="val", choices=["val", "test"])
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("check-grads", parents=[common], help="finite-difference gradient check of the full loss")
    p.add_argument("--step", type=float, default=1e-4)
    p.add_argument("--tol", type=float, default=1e-4)
    p.set_defaults(func=cmd_check_grads)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
