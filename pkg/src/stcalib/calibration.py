"""Calibration state and the spatiotemporal sensor pose.

A non-reference sensor ``i`` carries a 6D rotation plus translation (the
sensor-to-reference transform) and a clock offset ``delta``. Its world pose
at its own timestamp ``t`` is ``track(t + delta) * extrinsic``.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import MissingFile, ParseError, UnknownSensor
from .geometry import SE3Pose, Rot6D, matrix_to_quat, quat_to_matrix, rot6d_decode, rot6d_decode_backward, skew_batch
from .trajectory import TimedPoseTrack


@dataclass(frozen=True, eq=False)
class SensorCalibration:
    rotation: Rot6D
    translation: np.ndarray
    delta: float = 0.0

    @classmethod
    def from_pose(cls, pose: SE3Pose, delta=0.0):
        return cls(Rot6D.from_matrix(pose.R), pose.translation.copy(), float(delta))

    @classmethod
    def identity(cls):
        return cls.from_pose(SE3Pose.identity())

    @property
    def R(self):
        return rot6d_decode(self.rotation)

    def pose(self) -> SE3Pose:
        return SE3Pose.from_rt(self.R, self.translation)

    def vector(self):
        """``[a1, a2, translation, delta]`` as one 10-vector."""
        return np.concatenate([self.rotation.a1, self.rotation.a2, self.translation, [self.delta]])

    @classmethod
    def from_vector(cls, v):
        v = np.asarray(v, dtype=float)
        return cls(Rot6D(v[0:3].copy(), v[3:6].copy()), v[6:9].copy(), float(v[9]))


class CalibrationState:
    """Per-sensor calibration; the reference sensor is pinned to identity and 0."""

    def __init__(self, reference, sensors=None):
        self.reference = reference
        self.sensors = {reference: SensorCalibration.identity()}
        for name, cal in (sensors or {}).items():
            if name != reference:
                self.sensors[name] = cal

    def __contains__(self, name):
        return name in self.sensors

    def __getitem__(self, name):
        try:
            return self.sensors[name]
        except KeyError:
            raise UnknownSensor(f"unknown sensor {name!r}") from None

    @property
    def names(self):
        return list(self.sensors)

    @property
    def calibrated(self):
        """Names of the non-reference sensors."""
        return [n for n in self.sensors if n != self.reference]

    def with_sensor(self, name, cal):
        out = self.copy()
        if name != self.reference:
            out.sensors[name] = cal
        return out

    def copy(self):
        return CalibrationState(self.reference, {n: SensorCalibration.from_vector(c.vector()) for n, c in self.sensors.items()})

    def extrinsic(self, name) -> SE3Pose:
        return self[name].pose()

    def delta(self, name) -> float:
        return self[name].delta

    def equals(self, other):
        if self.reference != other.reference or set(self.names) != set(other.names):
            return False
        return all(np.array_equal(self[n].vector(), other[n].vector()) for n in self.names)


def sensor_pose(calib: CalibrationState, track: TimedPoseTrack, sensor, t) -> SE3Pose:
    """World pose of ``sensor`` for a frame stamped ``t`` on the sensor's clock."""
    cal = calib[sensor]
    if sensor == calib.reference:
        return track.pose_at(t)
    base = track.pose_at(t + cal.delta)
    R = base.R @ cal.R
    p = base.R @ cal.translation + base.translation
    return SE3Pose.from_rt(R, p)


def sensor_poses(calib: CalibrationState, track: TimedPoseTrack, sensor, ts):
    """Vectorized sensor poses; returns a :class:`FramePoses` with chain-rule context."""
    cal = calib[sensor]
    ts = np.atleast_1d(np.asarray(ts, dtype=float))
    is_ref = sensor == calib.reference
    delta = 0.0 if is_ref else cal.delta
    Rt, pt, v, omega = track.evaluate(ts + delta, derivatives=True)
    RE = cal.R
    pE = np.asarray(cal.translation, dtype=float)
    Rw = Rt @ RE
    pw = Rt @ pE + pt
    return FramePoses(sensor, Rw, pw, Rt, v, omega, RE, pE, is_ref)


@dataclass(eq=False)
class FramePoses:
    sensor: str
    Rw: np.ndarray
    pw: np.ndarray
    Rt: np.ndarray
    v: np.ndarray
    omega: np.ndarray
    RE: np.ndarray
    pE: np.ndarray
    is_reference: bool


def sensor_pose_backward(calib: CalibrationState, poses: FramePoses, g_Rw, g_pw):
    """Chain dLoss/d(world rotation, world position) per frame to calibration parameters.

    ``g_Rw`` is ``(F, 3, 3)`` and ``g_pw`` ``(F, 3)``. Returns a 10-vector
    ``[g_a1, g_a2, g_translation, g_delta]``; all zeros for the reference.
    """
    if poses.is_reference:
        return np.zeros(10)
    Rt, RE, pE = poses.Rt, poses.RE, poses.pE
    # Rw = Rt @ RE ; pw = Rt @ pE + pt
    g_RE = np.einsum("fji,fjk->ik", Rt, g_Rw)
    g_pE = np.einsum("fji,fj->i", Rt, g_pw)
    # d/dt: dRt/dt = Rt [omega]x  (body-frame angular velocity)
    W = skew_batch(poses.omega)
    RtW = Rt @ W
    dRw = RtW @ RE
    dpw = RtW @ pE + poses.v
    g_delta = float(np.einsum("fij,fij->", g_Rw, dRw) + np.einsum("fi,fi->", g_pw, dpw))
    cal = calib[poses.sensor]
    g_a1, g_a2 = rot6d_decode_backward(cal.rotation, g_RE)
    return np.concatenate([g_a1, g_a2, g_pE, [g_delta]])


# -- calibration result files ---------------------------------------------------


def _fmt(x):
    return format(float(x), ".17g")


def write_calibration(path, calib: CalibrationState, extra_sections=None):
    """Human-readable calibration file: quaternion, translation (m), delta (s)."""
    lines = ["# sensor-to-reference extrinsics and clock offsets", "[calibration]", f"reference = {calib.reference}", ""]
    for name in calib.names:
        cal = calib[name]
        q = matrix_to_quat(cal.R)
        lines.append(f"[sensor {name}]")
        for key, val in zip(("qw", "qx", "qy", "qz"), q):
            lines.append(f"{key} = {_fmt(val)}")
        for key, val in zip(("tx", "ty", "tz"), cal.translation):
            lines.append(f"{key} = {_fmt(val)}")
        lines.append(f"delta = {_fmt(cal.delta)}")
        lines.append("rot6d = " + " ".join(_fmt(v) for v in cal.rotation.as_vector()))
        lines.append("")
    for section, items in (extra_sections or {}).items():
        lines.append(f"[{section}]")
        lines.extend(f"{k} = {v}" for k, v in items.items())
        lines.append("")
    Path(path).write_text("\n".join(lines))


def read_calibration(path) -> CalibrationState:
    path = Path(path)
    if not path.exists():
        raise MissingFile(f"calibration file {path} not found")
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string(path.read_text())
        reference = cp["calibration"]["reference"].strip()
    except (configparser.Error, KeyError) as exc:
        raise ParseError(path, getattr(exc, "lineno", None), f"bad calibration file: {exc}") from None
    sensors = {}
    for section in cp.sections():
        if not section.startswith("sensor "):
            continue
        name = section.split(None, 1)[1].strip()
        sec = cp[section]
        try:
            t = np.array([float(sec[k]) for k in ("tx", "ty", "tz")])
            delta = float(sec["delta"])
            if "rot6d" in sec:
                v = np.array([float(x) for x in sec["rot6d"].split()])
                if len(v) != 6:
                    raise ValueError("rot6d needs 6 values")
                rot = Rot6D(v[:3], v[3:])
            else:
                q = np.array([float(sec[k]) for k in ("qw", "qx", "qy", "qz")])
                rot = Rot6D.from_matrix(quat_to_matrix(q / np.linalg.norm(q)))
        except (KeyError, ValueError) as exc:
            raise ParseError(path, None, f"section [{section}]: {exc}") from None
        sensors[name] = SensorCalibration(rot, t, delta)
    return CalibrationState(reference, sensors)
