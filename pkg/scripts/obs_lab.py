"""Print the observability lab reports and the perturbation study."""
import argparse

import numpy as np

from dstvio.observability import lab_scene, perturbation_study, run_lab
from dstvio.state import Variant


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--mode", choices=["exact", "series"], default="exact")
    ap.add_argument("--seeds", type=int, default=50, help="perturbation study seeds")
    args = ap.parse_args()
    for kind in ("line", "circle", "random"):
        scene = lab_scene(kind)
        for v in Variant:
            print(run_lab(v, scene=scene, mode=args.mode).text())
    res = perturbation_study(args.seeds)
    e, d = np.median(res[Variant.EKF]), np.median(res[Variant.DST])
    print(f"perturbed yaw residual median: ekf={e:.2e} dst={d:.2e} ratio={e / max(d, 1e-300):.1e}")


if __name__ == "__main__":
    main()
