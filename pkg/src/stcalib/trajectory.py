"""Continuous reference trajectory from timestamped pose knots.

Rotation is SLERP-interpolated, translation LERP-interpolated; outside the
knot range the first/last pose is held constant.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import DuplicateTimestamp, ParseError, TooFewKnots
from .geometry import (
    SE3Pose,
    lerp,
    normalize_quat,
    quat_conj,
    quat_log,
    quat_mul,
    quat_to_matrix,
    slerp,
)


class TimedPoseTrack:
    """Sorted ``(timestamp, pose)`` knots. Build with :func:`build_track`."""

    def __init__(self, times, quats, translations):
        self.times = np.asarray(times, dtype=float)
        quats = np.array(quats, dtype=float)
        off = np.abs(np.linalg.norm(quats, axis=1) - 1.0) > 1e-12
        quats[off] = normalize_quat(quats[off])
        self.quats = quats
        self.translations = np.asarray(translations, dtype=float)
        for a in (self.times, self.quats, self.translations):
            a.setflags(write=False)
        dt = np.diff(self.times)
        rel = quat_mul(quat_conj(self.quats[:-1]), self.quats[1:])
        # body-frame rotation vector of each segment, shorter arc
        self._seg_rotvec = np.array([quat_log(r) for r in rel]).reshape(-1, 3)
        self._seg_dt = dt
        self._seg_vel = np.diff(self.translations, axis=0) / dt[:, None]

    def __len__(self):
        return len(self.times)

    @property
    def knots(self):
        return [(float(t), SE3Pose(q, p)) for t, q, p in zip(self.times, self.quats, self.translations)]

    @property
    def t_first(self):
        return float(self.times[0])

    @property
    def t_last(self):
        return float(self.times[-1])

    def _locate(self, t):
        t = np.asarray(t, dtype=float)
        k = np.searchsorted(self.times, t, side="right") - 1
        k = np.clip(k, 0, len(self.times) - 2)
        u = (t - self.times[k]) / self._seg_dt[k]
        return k, np.clip(u, 0.0, 1.0)

    def pose_at(self, t) -> SE3Pose:
        k, u = self._locate(t)
        k = int(k)
        q = slerp(self.quats[k], self.quats[k + 1], float(u))
        p = lerp(self.translations[k], self.translations[k + 1], float(u))
        return SE3Pose(q, p)

    def pose_time_derivative(self, t):
        """Return (d translation/dt, body-frame angular velocity) at ``t``."""
        if t < self.times[0] or t >= self.times[-1]:
            return np.zeros(3), np.zeros(3)
        k, _ = self._locate(t)
        k = int(k)
        return self._seg_vel[k].copy(), self._seg_rotvec[k] / self._seg_dt[k]

    def evaluate(self, ts, derivatives=False):
        """Vectorized pose lookup.

        Returns rotation matrices ``(N, 3, 3)`` and translations ``(N, 3)``;
        with ``derivatives`` also linear velocities and body angular
        velocities, both ``(N, 3)``.
        """
        ts = np.atleast_1d(np.asarray(ts, dtype=float))
        k, u = self._locate(ts)
        w = self._seg_rotvec[k] * u[:, None]
        theta = np.linalg.norm(w, axis=1)
        half = 0.5 * theta
        # sinc-safe exp map
        scale = np.where(theta > 1e-12, np.sin(half) / np.where(theta > 1e-12, theta, 1.0), 0.5)
        dq = np.concatenate([np.cos(half)[:, None], scale[:, None] * w], axis=1)
        q = quat_mul(self.quats[k], dq)
        R = quat_to_matrix(q)
        p = self.translations[k] + u[:, None] * (self.translations[k + 1] - self.translations[k])
        if not derivatives:
            return R, p
        inside = (ts >= self.times[0]) & (ts < self.times[-1])
        v = np.where(inside[:, None], self._seg_vel[k], 0.0)
        omega = np.where(inside[:, None], self._seg_rotvec[k] / self._seg_dt[k][:, None], 0.0)
        return R, p, v, omega


def build_track(samples) -> TimedPoseTrack:
    """Validate and sort ``(seconds, SE3Pose)`` samples into a track."""
    samples = list(samples)
    if len(samples) < 2:
        raise TooFewKnots(f"need at least 2 knots, got {len(samples)}")
    samples = sorted(samples, key=lambda s: s[0])
    times = np.array([float(s[0]) for s in samples])
    quats = np.array([s[1].rotation for s in samples])
    trans = np.array([s[1].translation for s in samples])
    return _checked_track(times, quats, trans)


def _checked_track(times, quats, trans):
    if len(times) < 2:
        raise TooFewKnots(f"need at least 2 knots, got {len(times)}")
    order = np.argsort(times, kind="stable")
    times, quats, trans = times[order], quats[order], trans[order]
    if np.any(np.diff(times) <= 0):
        dup = times[:-1][np.diff(times) <= 0][0]
        raise DuplicateTimestamp(f"duplicate knot timestamp {dup!r}")
    return TimedPoseTrack(times, quats, trans)


def write_trajectory(path, track: TimedPoseTrack):
    lines = ["# t qw qx qy qz tx ty tz"]
    for t, q, p in zip(track.times, track.quats, track.translations):
        vals = [t, *q, *p]
        lines.append(" ".join(format(float(v), ".17g") for v in vals))
    Path(path).write_text("\n".join(lines) + "\n")


def read_trajectory(path) -> TimedPoseTrack:
    path = Path(path)
    rows = []
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 8:
            raise ParseError(path, lineno, f"expected 8 fields, got {len(parts)}")
        try:
            vals = [float(x) for x in parts]
        except ValueError as exc:
            raise ParseError(path, lineno, str(exc)) from None
        rows.append(vals)
    rows = np.array(rows, dtype=float).reshape(-1, 8)
    return _checked_track(rows[:, 0], rows[:, 1:5], rows[:, 5:8])
