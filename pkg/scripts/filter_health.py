"""Noise-only gate acceptance and NEES band coverage of the full filter."""
import argparse

import numpy as np

from dstvio.experiments import consistency_runs, nees_in_band, noise_only_gate
from dstvio.sim import SimConfig, generate


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--runs", type=int, default=50)
    ap.add_argument("--duration", type=float, default=10.0)
    args = ap.parse_args()
    data = generate(SimConfig(duration_s=20.0, seed=0))
    for m in ("po", "msckf"):
        print(f"noise-only gate acceptance ({m}): {noise_only_gate(data, m):.3f}")
    runs = consistency_runs(SimConfig(duration_s=args.duration), range(args.runs))
    print(f"NEES in 99% band: {nees_in_band(runs):.1%} of epochs over {len(runs)} runs; "
          f"mean NEES {np.mean(np.concatenate([r.nees for r in runs])):.2f}")


if __name__ == "__main__":
    main()
