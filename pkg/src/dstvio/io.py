"""Flat ``key = value`` configs, CSV streams and TUM trajectories."""
from __future__ import annotations

import configparser
import csv
from pathlib import Path

import numpy as np

from . import geometry as geo
from .propagation import NoiseParams
from .sim import SimConfig, SimData, Truth


class DataError(ValueError):
    """Malformed or missing input data."""


IMU_HEADER = ["t", "gx", "gy", "gz", "ax", "ay", "az"]
FEATURE_HEADER = ["t", "feature_id", "x_norm", "y_norm"]

# config key -> (SimConfig field, parser)
_BOOL = {"true": True, "false": False, "1": True, "0": False, "yes": True, "no": False, "on": True, "off": False}


def _bool(s: str) -> bool:
    try:
        return _BOOL[s.strip().lower()]
    except KeyError:
        raise DataError(f"not a boolean: {s!r}") from None


def parse_intervals(s: str) -> list:
    """``"30:90, 120:150"`` -> ``[(30.0, 90.0), (120.0, 150.0)]``; empty or ``none`` -> ``[]``."""
    s = s.strip()
    if not s or s.lower() == "none":
        return []
    out = []
    for part in s.split(","):
        a, _, b = part.partition(":")
        try:
            out.append((float(a), float(b)))
        except ValueError:
            raise DataError(f"bad interval {part!r}; expected start:end") from None
    return out


def format_intervals(intervals) -> str:
    return ",".join(f"{a!r}:{b!r}" for a, b in intervals) if intervals else "none"


_KEYS = {
    "trajectory.kind": ("trajectory_kind", str),
    "trajectory.duration_s": ("duration_s", float),
    "trajectory.radius_m": ("radius_m", float),
    "trajectory.speed_m_s": ("speed_m_s", float),
    "trajectory.excite": ("excite", _bool),
    "imu.rate_hz": ("imu_rate_hz", float),
    "cam.rate_hz": ("cam_rate_hz", float),
    "cam.focal_px": ("focal_px", float),
    "cam.max_features": ("max_features", int),
    "landmarks.count": ("n_landmarks", int),
    "noise.sigma_px": ("sigma_px", float),
    "window.max_clones": ("max_clones", int),
    "earth_rotation": ("earth_rotation", _bool),
    "deprivation.intervals": ("deprivation", parse_intervals),
    "seed": ("seed", int),
}
_NOISE_KEYS = {"noise.sigma_g": "sigma_g", "noise.sigma_a": "sigma_a", "noise.sigma_bg": "sigma_bg",
               "noise.sigma_ba": "sigma_ba"}


def read_flat(path) -> dict:
    parser = configparser.ConfigParser(interpolation=None, delimiters=("=",), comment_prefixes=("#", ";"),
                                       inline_comment_prefixes=("#",))
    parser.optionxform = str
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise DataError(f"cannot read config {path}: {e}") from None
    try:
        parser.read_string("[root]\n" + text)
    except configparser.Error as e:
        raise DataError(f"malformed config {path}: {e}") from None
    return dict(parser["root"])


def config_from_flat(flat: dict) -> SimConfig:
    kwargs, noise = {}, {}
    for key, raw in flat.items():
        try:
            if key in _KEYS:
                name, conv = _KEYS[key]
                kwargs[name] = conv(raw)
            elif key in _NOISE_KEYS:
                noise[_NOISE_KEYS[key]] = float(raw)
            else:
                raise DataError(f"unknown config key {key!r}")
        except ValueError as e:
            if isinstance(e, DataError):
                raise
            raise DataError(f"bad value for {key}: {raw!r}") from None
    try:
        return SimConfig(noise=NoiseParams(**noise), **kwargs)
    except ValueError as e:
        raise DataError(str(e)) from None


def load_config(path) -> SimConfig:
    return config_from_flat(read_flat(path))


def config_to_flat(config: SimConfig) -> dict:
    out = {}
    for key, (name, _) in _KEYS.items():
        val = getattr(config, name)
        if name == "deprivation":
            out[key] = format_intervals(val)
        elif isinstance(val, bool):
            out[key] = "true" if val else "false"
        else:
            out[key] = repr(val) if isinstance(val, float) else str(val)
    for key, name in _NOISE_KEYS.items():
        out[key] = repr(getattr(config.noise, name))
    return out


def write_config(config: SimConfig, path) -> None:
    lines = [f"{k} = {v}" for k, v in config_to_flat(config).items()]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


# --- streams -----------------------------------------------------------------------------


def _write_rows(path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _read_rows(path, header) -> list:
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            r = csv.reader(fh)
            got = next(r, None)
            if got is None or [h.strip() for h in got] != header:
                raise DataError(f"{path}: expected header {','.join(header)}")
            return [row for row in r if row]
    except OSError as e:
        raise DataError(f"cannot read {path}: {e}") from None


def write_imu(path, t, gyro, accel) -> None:
    _write_rows(path, IMU_HEADER, ([repr(float(a)) for a in (ti, *g, *ac)] for ti, g, ac in zip(t, gyro, accel)))


def read_imu(path):
    rows = _read_rows(path, IMU_HEADER)
    try:
        A = np.array(rows, dtype=float).reshape(-1, 7)
    except ValueError:
        raise DataError(f"{path}: non-numeric IMU row") from None
    if not np.isfinite(A).all():
        raise DataError(f"{path}: non-finite IMU value")
    if len(A) > 1 and np.any(np.diff(A[:, 0]) <= 0):
        raise DataError(f"{path}: timestamps not strictly increasing")
    return A[:, 0], A[:, 1:4], A[:, 4:7]


def write_features(path, t, fid, xy) -> None:
    _write_rows(path, FEATURE_HEADER,
                ([repr(float(ti)), str(int(f)), repr(float(p[0])), repr(float(p[1]))] for ti, f, p in zip(t, fid, xy)))


def read_features(path):
    rows = _read_rows(path, FEATURE_HEADER)
    try:
        t = np.array([float(r[0]) for r in rows])
        fid = np.array([int(r[1]) for r in rows], dtype=int)
        xy = np.array([[float(r[2]), float(r[3])] for r in rows]).reshape(-1, 2)
    except (ValueError, IndexError):
        raise DataError(f"{path}: malformed feature row") from None
    if not np.isfinite(xy).all():
        raise DataError(f"{path}: non-finite feature coordinate")
    return t, fid, xy


def write_tum(path, t, p, q) -> None:
    """``q`` in ``[w, x, y, z]``; written as ``t x y z qx qy qz qw``."""
    with open(path, "w", encoding="utf-8") as fh:
        for ti, pi, qi in zip(t, p, q):
            vals = [ti, *pi, qi[1], qi[2], qi[3], qi[0]]
            fh.write(" ".join(repr(float(v)) for v in vals) + "\n")


def read_tum(path):
    """Return ``(t, p, q)`` with ``q`` as ``[w, x, y, z]``."""
    try:
        A = np.loadtxt(path, comments="#", ndmin=2)
    except (OSError, ValueError) as e:
        raise DataError(f"cannot read trajectory {path}: {e}") from None
    if A.shape[1] != 8:
        raise DataError(f"{path}: expected 8 columns, got {A.shape[1]}")
    return A[:, 0], A[:, 1:4], A[:, [7, 4, 5, 6]]


# --- datasets ----------------------------------------------------------------------------


def write_dataset(data: SimData, outdir) -> None:
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    write_config(data.config, out / "config.txt")
    write_imu(out / "imu.csv", data.imu_t, data.gyro, data.accel)
    write_features(out / "features.csv", data.feat_t, data.feat_id, data.feat_xy)
    tr = data.truth
    write_tum(out / "groundtruth.txt", tr.t, tr.p, tr.q)
    # full truth (velocity, biases) for the first sample, used to initialize filters
    s = tr.state(0)
    vals = [tr.t[0], *s.p, s.q[1], s.q[2], s.q[3], s.q[0], *s.v]
    (out / "initial_state.txt").write_text(" ".join(repr(float(v)) for v in vals) + "\n", encoding="utf-8")


def read_dataset(config: SimConfig, datadir) -> SimData:
    """Rebuild a :class:`SimData` from files. Truth velocity is differenced from positions."""
    d = Path(datadir)
    imu_t, gyro, accel = read_imu(d / "imu.csv")
    ft, fid, fxy = read_features(d / "features.csv")
    gt_t, gt_p, gt_q = read_tum(d / "groundtruth.txt")
    init = d / "initial_state.txt"
    try:
        vals = np.array(init.read_text(encoding="utf-8").split(), dtype=float)
    except (OSError, ValueError) as e:
        raise DataError(f"cannot read {init}: {e}") from None
    if vals.size != 11:
        raise DataError(f"{init}: expected 11 values")
    v = np.gradient(gt_p, gt_t, axis=0) if len(gt_t) > 1 else np.zeros_like(gt_p)
    v[0] = vals[8:11]
    q = np.array([geo.quat_normalize(qi) for qi in gt_q])
    zeros = np.zeros_like(gt_p)
    truth = Truth(gt_t, q, v, gt_p, zeros, zeros.copy())
    if len(imu_t) == 0:
        raise DataError(f"{d}: empty IMU stream")
    return SimData(config, imu_t, gyro, accel, ft, fid, fxy, truth, np.zeros((0, 3)))
