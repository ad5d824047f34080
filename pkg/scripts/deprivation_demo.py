"""60 s blackout recovery study: forward vs smoothed endpoint error and segment ATE."""
import argparse

from dstvio.experiments import deprivation_config, deprivation_run


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, default=20)
    ap.add_argument("--blackout", type=float, default=60.0)
    args = ap.parse_args()
    outcomes = []
    for s in range(args.seeds):
        o = deprivation_run(deprivation_config(s, blackout=args.blackout))[2]
        outcomes.append(o)
        tag = "converged" if o.converged else "not converged"
        print(f"seed {s:>2} {tag:<13} endpoint {o.endpoint_forward:6.2f} -> {o.endpoint_smoothed:6.2f} m"
              f"  ate {o.ate_forward:6.2f} -> {o.ate_smoothed:6.2f} m", flush=True)
    conv = [o for o in outcomes if o.converged]
    print(f"endpoint improved {sum(o.endpoint_improved for o in outcomes)}/{len(outcomes)}, "
          f"ate improved {sum(o.ate_improved for o in conv)}/{len(conv)} converged")


if __name__ == "__main__":
    main()
