"""Input validation for datasets and calibration priors."""

from __future__ import annotations

import numpy as np

from .calibration import CalibrationState, sensor_poses
from .errors import DuplicateTimestamp, EmptyBatch, NonUnitDirection, SensorSetMismatch, ShapeMismatch


def check_dataset(ds):
    """Raise on structural problems; returns the dataset for chaining."""
    if ds.reference not in ds.sensors:
        raise SensorSetMismatch(f"reference sensor {ds.reference!r} not in dataset")
    if ds.sensors[ds.reference].kind != "camera":
        raise SensorSetMismatch("the reference sensor must be a camera")
    for name, s in ds.sensors.items():
        ts = np.asarray(s.timestamps, dtype=float)
        if len(ts) == 0:
            raise EmptyBatch(f"sensor {name!r} has no frames")
        if np.any(np.diff(ts) <= 0):
            raise DuplicateTimestamp(f"timestamps of {name!r} are not strictly increasing")
        if s.kind == "camera":
            intr = s.intrinsics
            if s.images is None or s.images.shape[1:] != (intr.height, intr.width, 3) or len(s.images) != len(ts):
                raise ShapeMismatch(f"images of {name!r} do not match intrinsics/timestamps")
        elif s.kind == "lidar":
            if len(s.scans) != len(ts):
                raise ShapeMismatch(f"scan count of {name!r} does not match timestamps")
            for dirs, ranges in s.scans:
                if len(dirs) and np.max(np.abs(np.linalg.norm(dirs, axis=1) - 1.0)) > 1e-6:
                    raise NonUnitDirection(f"LiDAR directions of {name!r} are not unit length")
                if len(dirs) != len(ranges):
                    raise ShapeMismatch(f"LiDAR scan of {name!r} has mismatched dirs/ranges")
        else:
            raise ValueError(f"unknown sensor kind {s.kind!r}")
    return ds


def check_priors(priors: CalibrationState, ds):
    """Priors must name exactly the dataset's sensors with the same reference."""
    if priors.reference != ds.reference or set(priors.names) != set(ds.names):
        raise SensorSetMismatch(
            f"priors cover {sorted(priors.names)} (ref {priors.reference}); "
            f"dataset has {sorted(ds.names)} (ref {ds.reference})"
        )
    for name in priors.calibrated:
        if not np.all(np.isfinite(priors[name].vector())):
            raise ValueError(f"non-finite prior for {name!r}")
    return priors


def scene_bounds(ds, priors: CalibrationState, margin=0.5, margin_up=1.0, quantile=1e-3):
    """Axis-aligned box around the trajectory and LiDAR returns under ``priors``.

    LiDAR points are trimmed to the ``quantile`` .. ``1 - quantile`` range per
    axis: a rotation error in the priors throws the longest returns far
    outside the scene. Without LiDAR the box is the trajectory extent padded
    by ``margin``.
    """
    track = np.asarray(ds.track.translations, dtype=float)
    lo, hi = track.min(axis=0), track.max(axis=0)
    pts = []
    for name, s in ds.sensors.items():
        if s.kind != "lidar":
            continue
        fp = sensor_poses(priors, ds.track, name, s.timestamps)
        for k, (dirs, ranges) in enumerate(s.scans):
            if len(ranges):
                pts.append(fp.pw[k] + (dirs * ranges[:, None]) @ fp.Rw[k].T)
    if pts:
        pts = np.concatenate(pts)
        lo = np.minimum(lo, np.quantile(pts, quantile, axis=0))
        hi = np.maximum(hi, np.quantile(pts, 1.0 - quantile, axis=0))
    lo = lo - margin
    hi = hi + margin
    hi[2] += margin_up - margin
    return tuple(float(v) for v in lo), tuple(float(v) for v in hi)
