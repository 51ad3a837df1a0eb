#!/usr/bin/env python3
"""Train all six modes on the cyclic toy set with a shared seed and print the comparison table."""
import argparse
import dataclasses

from eclseq.cli import ablation_table
from eclseq.config import MODES, DatasetConfig, EvalConfig, ModelConfig, RunConfig, TrainConfig
from eclseq.pipeline import run_experiment
from eclseq.synthetic import cyclic_dataset


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--epochs", type=int, default=30)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    ds = cyclic_dataset(n_users=200, n_items=30, n_patterns=5, length=12, max_len=12)
    base = RunConfig(dataset=DatasetConfig(max_len=12), model=ModelConfig(d=32),
                     train=TrainConfig(epochs=args.epochs, lr=1e-3, batch_size=32, seed=args.seed),
                     eval=EvalConfig(Ks=[1, 10])).validate()
    rows = []
    for mode in MODES:
        cfg = dataclasses.replace(base, train=dataclasses.replace(base.train, mode=mode))
        report, _ = run_experiment(cfg, ds)
        row = {"mode": mode}
        for k in sorted(report.recall_at):
            row[f"recall@{k}"] = round(report.recall_at[k], 4)
            row[f"ndcg@{k}"] = round(report.ndcg_at[k], 4)
        rows.append(row)
        print(f"finished {mode} in {report.seconds:.1f}s", flush=True)
    print(ablation_table(rows))


if __name__ == "__main__":
    main()
