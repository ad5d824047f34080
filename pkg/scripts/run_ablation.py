"""Four-way ablation over Monte Carlo seeds; prints per-seed ATE and the summary."""
import argparse
from dataclasses import replace

import numpy as np

from dstvio import io
from dstvio.experiments import ablation
from dstvio.sim import SimConfig


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config", help="flat key = value config (defaults to the built-in circle)")
    ap.add_argument("--seeds", type=int, default=20)
    ap.add_argument("--duration", type=float)
    args = ap.parse_args()
    base = io.load_config(args.config) if args.config else SimConfig()
    if args.duration:
        base = replace(base, duration_s=args.duration)
    res = ablation(base, range(args.seeds))
    names = list(res.ate)
    print("seed " + " ".join(f"{n:>9}" for n in names))
    for i, s in enumerate(res.seeds):
        print(f"{s:>4} " + " ".join(f"{res.ate[n][i]:9.4f}" for n in names))
    print("mean " + " ".join(f"{m:9.4f}" for m in res.mean().values()))
    print(f"ordering holds: {res.ordering_holds()}  full strictly best: {res.full_best_fraction():.0%}")
    best = np.argmin(np.vstack([res.ate[n] for n in names]), axis=0)
    print("best counts: " + ", ".join(f"{n}={int(np.sum(best == i))}" for i, n in enumerate(names)))


if __name__ == "__main__":
    main()
