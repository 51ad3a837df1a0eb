"""``eclseq`` command line: preprocess, train, evaluate, augment-demo, ablate."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from .augment import SEQUENCE_KINDS, AugmentError, AugSpec, augment_sequence, make_mask_plan
from .checkpoint import CheckpointError
from .config import MODES, ConfigError, RunConfig, dump_config, load_config, override, to_dict
from .data import DataError, Sequence, load_cache, preprocess, save_cache
from .pipeline import TrainingDiverged, evaluate, make_model, run_experiment

log = logging.getLogger("eclseq")


def _resolve(args):
    cfg = load_config(args.config) if args.config else RunConfig().validate()
    return override(cfg, seed=args.seed, mode=getattr(args, "mode", None), output=args.output)


def _cache_path(cfg):
    """Explicit ``dataset.cache``, else beside the raw log, else inside ``output_dir``."""
    if cfg.dataset.cache:
        return cfg.dataset.cache
    if cfg.dataset.path:
        return cfg.dataset.path + ".eclseq.bin"
    return os.path.join(cfg.output_dir, "dataset.bin")


def _snapshot(cfg):
    os.makedirs(cfg.output_dir, exist_ok=True)
    with open(os.path.join(cfg.output_dir, "resolved_config.yaml"), "w", encoding="utf-8") as fh:
        fh.write(dump_config(cfg))


def format_stats(stats):
    return (f"users={stats['users']} items={stats['items']} actions={stats['actions']} "
            f"avg_actions/user={stats['avg_actions_per_user']:.1f} "
            f"avg_actions/item={stats['avg_actions_per_item']:.1f} "
            f"sparsity={100 * stats['sparsity']:.2f}%")


def cmd_preprocess(cfg, out=None):
    out = out or sys.stdout
    ds = cfg.dataset
    if not ds.path:
        raise ConfigError("dataset.path is required for preprocess")
    dataset = preprocess(ds.path, ds.format, tuple(ds.columns), ds.kcore, ds.max_len)
    path = _cache_path(cfg)
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    save_cache(path, dataset.catalog, dataset.split, dataset.stats)
    print(format_stats(dataset.stats), file=out)
    print(f"cache written to {path}", file=out)
    return dataset


def cmd_train(cfg, out=None):
    out = out or sys.stdout
    dataset = load_cache(_cache_path(cfg))
    report, _ = run_experiment(cfg, dataset, cfg.output_dir)
    print(json.dumps({"mode": cfg.train.mode, "best_epoch": report.best_epoch,
                      **_flat_metrics(report)}, sort_keys=True), file=out)
    return report


def cmd_evaluate(cfg, checkpoint, phase="test", out=None):
    out = out or sys.stdout
    dataset = load_cache(_cache_path(cfg))
    model = make_model(cfg, dataset.split.item_count, dataset.split.max_len)
    model.load(checkpoint)
    report = evaluate(model, dataset.split, phase, sorted(set(cfg.eval.Ks)))
    print(json.dumps({"phase": phase, **_flat_metrics(report)}, sort_keys=True), file=out)
    return report


def _flat_metrics(report):
    out = {}
    for k in sorted(report.recall_at):
        out[f"recall@{k}"] = report.recall_at[k]
        out[f"ndcg@{k}"] = report.ndcg_at[k]
    return out


def augment_views(cfg, items, seed, item_count=None):
    """Every sequence-level operator (plus the mask plan) applied to ``items`` with one seed."""
    items = [int(v) for v in items]
    if not items or min(items) < 1:
        raise AugmentError("items must be positive ids")
    item_count = item_count or max(items) + 5
    L = max(cfg.dataset.max_len, len(items))
    seq = Sequence.from_items(items, L)
    views = []
    for kind in SEQUENCE_KINDS + ("mask_plan",):
        spec = cfg.aug.invasive if cfg.aug.invasive.kind == kind else AugSpec(kind)
        rng = np.random.default_rng([seed, SEQUENCE_KINDS.index(kind) if kind in SEQUENCE_KINDS else 99])
        if kind == "mask_plan":
            ratio = cfg.train.gamma
            spec = AugSpec("mask_plan", ratio=ratio)
            plan = make_mask_plan(seq, ratio, rng)
            out_items = [-1 if m else int(v) for v, m in zip(seq.items, plan.positions)][L - seq.true_length:]
        else:
            out_items = [int(v) for v in augment_sequence(seq, spec, rng, item_count).active]
        changed = [i for i in range(max(len(items), len(out_items)))
                   if i >= len(items) or i >= len(out_items) or items[i] != out_items[i]]
        views.append({"kind": kind, "spec": to_dict(spec), "output": out_items,
                      "changed": changed, "identity": out_items == items})
    return {"input": items, "seed": seed, "item_count": item_count, "views": views,
            "aug": to_dict(cfg.aug)}


def cmd_augment_demo(cfg, items, seed, as_json=False, item_count=None, out=None):
    out = out or sys.stdout
    result = augment_views(cfg, items, seed, item_count)
    if as_json:
        print(json.dumps(result, sort_keys=True), file=out)
        return result
    print(f"input      {result['input']}", file=out)
    for v in result["views"]:
        marked = [f"[{x}]" if i in v["changed"] else str(x) for i, x in enumerate(v["output"])]
        flag = "  (identity)" if v["identity"] else ""
        print(f"{v['kind']:<18} {' '.join(marked)}{flag}", file=out)
    print("(-1 marks a masked slot; [x] marks a changed position)", file=out)
    return result


def ablation_table(rows):
    header = ["mode"] + [k for k in rows[0] if k != "mode"]
    lines = ["\t".join(header)]
    for row in rows:
        lines.append("\t".join([row["mode"]] + [repr(row[k]) for k in header[1:]]))
    return "\n".join(lines)


def cmd_ablate(cfg, out=None):
    out = out or sys.stdout
    os.makedirs(cfg.output_dir, exist_ok=True)
    dataset = load_cache(_cache_path(cfg))
    rows = []
    for mode in MODES:
        sub = override(cfg, mode=mode, output=os.path.join(cfg.output_dir, mode))
        report, _ = run_experiment(sub, dataset, sub.output_dir)
        rows.append({"mode": mode, **_flat_metrics(report)})
    text = ablation_table(rows)
    with open(os.path.join(cfg.output_dir, "ablation.tsv"), "w", encoding="utf-8") as fh:
        fh.write(text + "\n")
    with open(os.path.join(cfg.output_dir, "ablation.json"), "w", encoding="utf-8") as fh:
        json.dump(rows, fh, sort_keys=True, indent=1)
    print(text, file=out)
    return rows


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML/JSON run config")
    common.add_argument("--seed", type=int)
    common.add_argument("--output", help="output directory (overrides output_dir)")

    parser = argparse.ArgumentParser(prog="eclseq", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("preprocess", parents=[common], help="filter, split and cache a raw log")
    p = sub.add_parser("train", parents=[common], help="train one mode")
    p.add_argument("--mode")
    p = sub.add_parser("evaluate", parents=[common], help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--phase", choices=("valid", "test"), default="test")
    p.add_argument("--mode")
    p = sub.add_parser("augment-demo", parents=[common], help="show every augmentation on one sequence")
    p.add_argument("--sequence", required=True, help="comma-separated item ids, e.g. 1,2,3,4,5")
    p.add_argument("--items", type=int, help="catalog size for insert/substitute draws")
    p.add_argument("--json", action="store_true")
    sub.add_parser("ablate", parents=[common], help="train all six modes and tabulate test metrics")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _resolve(args)
        _snapshot(cfg)
        if args.command == "preprocess":
            cmd_preprocess(cfg)
        elif args.command == "train":
            cmd_train(cfg)
        elif args.command == "evaluate":
            cmd_evaluate(cfg, args.checkpoint, args.phase)
        elif args.command == "augment-demo":
            items = [int(x) for x in args.sequence.replace(" ", "").split(",") if x]
            cmd_augment_demo(cfg, items, args.seed or 0, args.json, args.items)
        elif args.command == "ablate":
            cmd_ablate(cfg)
    except (ConfigError, DataError, AugmentError, CheckpointError, TrainingDiverged) as exc:
        print(f"eclseq {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"eclseq {args.command}: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
