#!/usr/bin/env python3
"""Time exact top-k search over a random index at several thread counts."""
import argparse
import os

from pocketdex import retrieval


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--count", type=int, default=1_000_000)
    ap.add_argument("--dim", type=int, default=128)
    ap.add_argument("--k", type=int, default=100)
    ap.add_argument("--queries", type=int, default=5)
    ap.add_argument("--threads", default="1,2,4")
    args = ap.parse_args()

    index = retrieval.random_index(args.count, args.dim, "dot", seed=0)
    print(f"{args.count} x {args.dim} index, {os.cpu_count()} cpu(s) visible")
    base = None
    for t in (int(x) for x in args.threads.split(",")):
        r = retrieval.throughput_bench(index, args.queries, args.k, threads=t)
        base = base or r.queries_per_sec
        print(f"threads={t:2d}  {r.queries_per_sec:8.2f} q/s  speedup {r.queries_per_sec / base:.2f}x")


if __name__ == "__main__":
    main()
