#!/usr/bin/env python3
"""Write the cyclic toy interaction log as a tab-separated file (user, item, timestamp)."""
import argparse

from eclseq.synthetic import cyclic_log, write_log


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("path")
    ap.add_argument("--users", type=int, default=200)
    ap.add_argument("--items", type=int, default=30)
    ap.add_argument("--patterns", type=int, default=5)
    ap.add_argument("--length", type=int, default=12)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    log = cyclic_log(args.users, args.items, args.patterns, args.length, args.seed)
    write_log(args.path, log)
    print(f"wrote {len(log)} interactions to {args.path}")


if __name__ == "__main__":
    main()
