"""Command line entry point: ``dstvio <subcommand>``.

Exit codes: 0 success, 2 data error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import io
from .experiments import filter_config
from .metrics import ate_rmse
from .observability import run_lab
from .sim import generate
from .smoother import DeprivationSchedule, SingularCovariance, deprivation_supervisor
from .state import Variant
from .vio import VARIANTS, NumericalFailure, run_filter

EXIT_OK, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3
LAB_KINDS = ("line", "circle", "random")


def _load(args):
    config = io.load_config(args.config)
    data = io.read_dataset(config, args.datadir) if getattr(args, "datadir", None) else None
    return config, data


def _outdir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_simulate(args) -> int:
    config = io.load_config(args.config)
    data = generate(config)
    io.write_dataset(data, args.outdir)
    print(f"wrote {len(data.imu_t)} IMU samples, {len(data.feat_t)} features to {args.outdir}")
    return EXIT_OK


def cmd_run(args) -> int:
    config, data = _load(args)
    res = run_filter(data, filter_config(config, args.variant), config.seed)
    out = _outdir(args.outdir)
    io.write_tum(out / "estimate.txt", res.t, res.p, res.q)
    print(f"variant={res.variant} epochs={len(res.t)} ate={res.ate:.4f} m "
          f"mean_nees={np.mean(res.nees):.2f} accepted={res.stats.accepted}/{res.stats.tried}")
    return EXIT_OK


def cmd_obs_check(args) -> int:
    config = io.load_config(args.config)
    kind = config.trajectory_kind
    if kind not in LAB_KINDS:
        raise io.DataError(f"observability lab supports {', '.join(LAB_KINDS)}, not {kind!r}")
    variants = [Variant(args.variant)] if args.variant else list(Variant)
    ok = True
    for v in variants:
        rep = run_lab(v, kind, seed=config.seed)
        passed = rep.rank == rep.dim - 4 and rep.residual.max() < 1e-8
        ok &= passed
        print(rep.text())
        print(f"{v.value}: {'PASS' if passed else 'FAIL'}")
    return EXIT_OK if ok else EXIT_NUMERIC


def cmd_smooth(args) -> int:
    config, data = _load(args)
    fc = filter_config(config, "full")
    vio = run_filter(data, fc, config.seed)
    schedule = DeprivationSchedule(tuple(config.deprivation))
    res = deprivation_supervisor(vio.records, list(data.imu_samples()), schedule, config.noise, config.world,
                                 fc.error_variant)
    out = _outdir(args.outdir)
    io.write_tum(out / "estimate.txt", vio.t, vio.p, vio.q)
    io.write_tum(out / "smoothed.txt", res.t, res.p, res.q)
    for seg in res.segments:
        status = f"converged at {seg.converged_at:.2f} s" if seg.converged else "not converged, left unsmoothed"
        print(f"segment {seg.start:.2f}-{seg.end:.2f} s: {status}")
    print(f"ate forward={vio.ate:.4f} m smoothed={ate_rmse(res.t, res.p, data.truth.t, data.truth.p):.4f} m")
    return EXIT_OK


def cmd_compare(args) -> int:
    config, data = _load(args)
    rows = []
    for v in VARIANTS:
        res = run_filter(data, filter_config(config, v), config.seed)
        rows.append((res.ate, v, float(np.mean(res.nees))))
    print(f"seed={config.seed}")
    print(f"{'rank':<5}{'variant':<10}{'ate_m':>10}{'mean_nees':>11}")
    for i, (ate, v, n) in enumerate(sorted(rows), 1):
        print(f"{i:<5}{v:<10}{ate:>10.4f}{n:>11.2f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dstvio", description="Simulated VIO with DST error states and PO updates.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="generate a synthetic dataset")
    s.add_argument("config")
    s.add_argument("outdir")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("run", help="run one filter variant on a dataset")
    s.add_argument("config")
    s.add_argument("datadir")
    s.add_argument("outdir")
    s.add_argument("--variant", choices=VARIANTS, default="full")
    s.set_defaults(func=cmd_run)

    s = sub.add_parser("obs-check", help="observability null-space check on the configured trajectory kind")
    s.add_argument("config")
    s.add_argument("--variant", choices=[v.value for v in Variant])
    s.set_defaults(func=cmd_obs_check)

    s = sub.add_parser("smooth", help="run the full filter and smooth deprived segments")
    s.add_argument("config")
    s.add_argument("datadir")
    s.add_argument("outdir")
    s.set_defaults(func=cmd_smooth)

    s = sub.add_parser("compare", help="rank all filter variants on one dataset")
    s.add_argument("config")
    s.add_argument("datadir")
    s.set_defaults(func=cmd_compare)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except io.DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalFailure, SingularCovariance, np.linalg.LinAlgError, FloatingPointError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
