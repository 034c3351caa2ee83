"""Synthetic ground truth: analytic primitive scene, trajectory, sensor frames.

Cameras and LiDARs are raycast against planes, spheres and axis-aligned
boxes. Each sensor fires on its own schedule in reference time ``tau`` and
records the timestamp ``tau - delta`` on its own clock, so the written
dataset carries the clock offsets to be recovered.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .calibration import CalibrationState, SensorCalibration, sensor_pose
from .dataset import RigDataset, SensorStream, save_dataset
from .geometry import SE3Pose, euler_xyz_to_matrix, rot_y
from .renderer import PinholeIntrinsics, Ray
from .trajectory import TimedPoseTrack, build_track


# -- textures & primitives ---------------------------------------------------


@dataclass(frozen=True)
class Checker:
    cell: float
    color_a: tuple
    color_b: tuple

    def __call__(self, uv):
        """Albedo at in-surface coordinates ``uv`` ``(N, k)``; parity of the floor sum."""
        cells = np.floor(np.asarray(uv) / self.cell).astype(np.int64).sum(axis=1)
        a = np.asarray(self.color_a, dtype=float)
        b = np.asarray(self.color_b, dtype=float)
        return np.where((cells % 2 == 0)[:, None], a, b)


@dataclass(frozen=True)
class Constant:
    color: tuple

    def __call__(self, uv):
        return np.broadcast_to(np.asarray(self.color, dtype=float), (len(uv), 3)).copy()


@dataclass(frozen=True)
class Plane:
    point: tuple
    normal: tuple
    texture: object
    u_axis: Optional[tuple] = None

    def _axes(self):
        n = np.asarray(self.normal, float)
        n = n / np.linalg.norm(n)
        if self.u_axis is not None:
            u = np.asarray(self.u_axis, float)
        else:
            u = np.cross(n, [0.0, 0.0, 1.0]) if abs(n[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
        u = u - n * (u @ n)
        u /= np.linalg.norm(u)
        return n, u, np.cross(n, u)

    def intersect(self, o, d):
        n, u, v = self._axes()
        p0 = np.asarray(self.point, float)
        denom = d @ n
        with np.errstate(divide="ignore", invalid="ignore"):
            t = ((p0 - o) @ n) / denom
        t = np.where(np.abs(denom) > 1e-12, t, np.inf)
        hit = o + t[:, None] * d
        rel = np.where(np.isfinite(hit), hit, 0.0) - p0
        uv = np.stack([rel @ u, rel @ v], axis=1)
        return t, uv, np.broadcast_to(n, d.shape)


@dataclass(frozen=True)
class Sphere:
    center: tuple
    radius: float
    texture: object

    def intersect(self, o, d):
        c = np.asarray(self.center, float)
        oc = o - c
        b = np.einsum("ij,ij->i", oc, d)
        cc = np.einsum("ij,ij->i", oc, oc) - self.radius**2
        disc = b * b - cc
        sq = np.sqrt(np.maximum(disc, 0.0))
        t0 = -b - sq
        t1 = -b + sq
        t = np.where(t0 > 1e-9, t0, t1)
        t = np.where(disc >= 0, t, np.inf)
        hit = o + np.where(np.isfinite(t), t, 0.0)[:, None] * d
        # solid checker on the surface point
        return t, hit - c, (hit - c) / self.radius


@dataclass(frozen=True)
class Box:
    lo: tuple
    hi: tuple
    texture: object

    def intersect(self, o, d):
        lo = np.asarray(self.lo, float)
        hi = np.asarray(self.hi, float)
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / d
            ta = (lo - o) * inv
            tb = (hi - o) * inv
        ta = np.where(np.isnan(ta), -np.inf, ta)
        tb = np.where(np.isnan(tb), np.inf, tb)
        tmin_ax = np.minimum(ta, tb)
        tmax_ax = np.maximum(ta, tb)
        t_enter = tmin_ax.max(axis=1)
        t_exit = tmax_ax.min(axis=1)
        inside = t_enter <= 1e-9
        t = np.where(inside, t_exit, t_enter)
        t = np.where((t_exit >= t_enter) & (t_exit > 1e-9), t, np.inf)
        face_t = np.where(inside[:, None], tmax_ax, tmin_ax)
        axis = np.argmax(face_t == t[:, None], axis=1)
        hit = o + np.where(np.isfinite(t), t, 0.0)[:, None] * d
        # face coordinates: drop the axis the face is perpendicular to
        keep = np.array([[1, 2], [0, 2], [0, 1]])[axis]
        uv = np.take_along_axis(hit, keep, axis=1)
        normal = np.zeros_like(hit)
        normal[np.arange(len(hit)), axis] = -np.sign(d[np.arange(len(hit)), axis])
        return t, uv, normal


@dataclass
class PrimitiveScene:
    primitives: list
    shading: str = "flat"  # "flat" or "lambert"
    sun: tuple = (0.3, 0.2, 0.93)
    ambient: float = 0.35

    def raycast_batch(self, origins, dirs, max_range=np.inf):
        """Nearest hits for many rays: (hit mask, range, albedo ``(N, 3)``)."""
        o = np.asarray(origins, float).reshape(-1, 3)
        d = np.asarray(dirs, float).reshape(-1, 3)
        o = np.broadcast_to(o, d.shape)
        best = np.full(len(d), np.inf)
        color = np.zeros((len(d), 3))
        for prim in self.primitives:
            t, uv, normal = prim.intersect(o, d)
            t = np.where(t > 1e-9, t, np.inf)
            closer = t < best
            if not np.any(closer):
                continue
            idx = np.flatnonzero(closer)
            best[idx] = t[idx]
            c = prim.texture(uv[idx])
            if self.shading == "lambert":
                sun = np.asarray(self.sun, float)
                sun = sun / np.linalg.norm(sun)
                lam = np.clip(normal[idx] @ sun, 0.0, 1.0)
                c = c * (self.ambient + (1.0 - self.ambient) * lam)[:, None]
            color[idx] = c
        hit = np.isfinite(best) & (best <= max_range)
        return hit, np.where(hit, best, np.inf), color


def raycast(scene: PrimitiveScene, ray: Ray):
    """Nearest positive intersection as ``(range, albedo)``, or ``None`` on a miss."""
    hit, rng, col = scene.raycast_batch(np.asarray(ray.origin)[None], np.asarray(ray.direction)[None])
    if not hit[0]:
        return None
    return float(rng[0]), col[0]


# -- sensors --------------------------------------------------------------------


@dataclass(frozen=True)
class LidarModel:
    rings: int = 16
    azimuth_steps: int = 180
    fov_up_deg: float = 10.0
    fov_down_deg: float = -25.0
    max_range: float = 40.0

    def directions(self):
        """Unit ring x azimuth directions in the sensor frame (x fwd, y left, z up)."""
        elev = np.radians(np.linspace(self.fov_down_deg, self.fov_up_deg, self.rings))
        az = 2 * np.pi * np.arange(self.azimuth_steps) / self.azimuth_steps
        E, A = np.meshgrid(elev, az, indexing="ij")
        d = np.stack([np.cos(E) * np.cos(A), np.cos(E) * np.sin(A), np.sin(E)], axis=-1).reshape(-1, 3)
        return d / np.linalg.norm(d, axis=1, keepdims=True)


@dataclass(frozen=True)
class SensorSpec:
    name: str
    kind: str  # "camera" | "lidar"
    rate: float
    gt_extrinsic: SE3Pose = field(default_factory=SE3Pose.identity)
    gt_delta: float = 0.0
    intrinsics: Optional[PinholeIntrinsics] = None
    lidar: Optional[LidarModel] = None

    def __post_init__(self):
        if self.rate <= 0:
            raise ValueError("sensor rate must be positive")
        if self.kind not in ("camera", "lidar"):
            raise ValueError(f"unknown sensor kind {self.kind!r}")


@dataclass
class Rig:
    sensors: list
    reference: str

    def gt_calibration(self) -> CalibrationState:
        return CalibrationState(
            self.reference,
            {s.name: SensorCalibration.from_pose(s.gt_extrinsic, s.gt_delta) for s in self.sensors},
        )

    def __getitem__(self, name):
        for s in self.sensors:
            if s.name == name:
                return s
        raise KeyError(name)


def simulate_camera_frame(scene, spec: SensorSpec, pose: SE3Pose, t, background=(1.0, 1.0, 1.0), supersample=1,
                          noise_std=0.0, rng=None):
    """Render a float RGB image ``(H, W, 3)`` in [0, 1]; returns ``(image, t)``."""
    intr = spec.intrinsics
    s = int(supersample)
    # sub-pixel offsets centred in each pixel
    offs = (np.arange(s) + 0.5) / s - 0.5
    vv, uu = np.mgrid[0 : intr.height, 0 : intr.width]
    acc = np.zeros((intr.height * intr.width, 3))
    R = pose.R
    for oy in offs:
        for ox in offs:
            x = (uu.ravel() + 0.5 + ox - intr.cx) / intr.fx
            y = (vv.ravel() + 0.5 + oy - intr.cy) / intr.fy
            d = np.stack([x, y, np.ones_like(x)], axis=1)
            d /= np.linalg.norm(d, axis=1, keepdims=True)
            hit, _, col = scene.raycast_batch(pose.translation[None], d @ R.T)
            acc += np.where(hit[:, None], col, np.asarray(background, float))
    img = (acc / (s * s)).reshape(intr.height, intr.width, 3)
    if noise_std > 0:
        img = img + rng.normal(0.0, noise_std, img.shape)
    return np.clip(img, 0.0, 1.0), t


def simulate_lidar_scan(scene, spec: SensorSpec, track, gt_calib: CalibrationState, t_scan, noise_std=0.0, rng=None):
    """Returns ``(dirs (M, 3), ranges (M,), t_scan)``; misses and far hits are dropped."""
    pose = sensor_pose(gt_calib, track, spec.name, t_scan)
    dirs = spec.lidar.directions()
    hit, rng_, _ = scene.raycast_batch(pose.translation[None], dirs @ pose.R.T, spec.lidar.max_range)
    ranges = rng_[hit]
    if noise_std > 0:
        ranges = ranges + rng.normal(0.0, noise_std, ranges.shape)
    return dirs[hit], ranges, t_scan


# -- trajectories -------------------------------------------------------------


def heading_pose(pos, heading, height):
    """Camera-convention pose (z forward, y down) for a planar heading."""
    c, s = np.cos(heading), np.sin(heading)
    z = np.array([c, s, 0.0])
    x = np.array([s, -c, 0.0])
    y = np.array([0.0, 0.0, -1.0])
    return SE3Pose.from_rt(np.stack([x, y, z], axis=1), [pos[0], pos[1], height])


def make_trajectory(kind="straight-arc", duration=10.0, speed=2.0, knot_rate=10.0, turn_deg=90.0,
                    straight_fraction=0.3, start=(0.0, 0.0), start_heading_deg=0.0, height=1.5,
                    speed_variation=0.0, speed_cycles=2.0):
    """Planar reference trajectory with heading tangent to the motion.

    ``kind`` is ``straight``, ``arc`` (constant curvature turning ``turn_deg``),
    ``straight-arc`` (straight lead-in then the arc) or ``s-curve``
    (sinusoidal heading, amplitude ``turn_deg``).

    ``speed`` is the mean speed. With ``speed_variation`` a > 0 the vehicle
    speeds up and slows down, v(t) = speed (1 + a sin(2 pi c t / duration))
    with c = ``speed_cycles``; at constant speed a clock offset is nearly
    indistinguishable from a forward shift of the extrinsic.
    """
    if duration <= 0 or speed <= 0 or knot_rate <= 0:
        raise ValueError("duration, speed and knot_rate must be positive")
    if not 0.0 <= speed_variation < 1.0:
        raise ValueError("speed_variation must be in [0, 1)")
    n = int(round(duration * knot_rate)) + 1
    times = np.linspace(0.0, duration, n)
    length = speed * duration
    turn = np.radians(turn_deg)
    psi0 = np.radians(start_heading_deg)
    # arc length where turning starts and the curvature after it
    if kind == "straight":
        s_turn, kappa = length, 0.0
    elif kind == "arc":
        s_turn, kappa = 0.0, turn / length
    elif kind == "straight-arc":
        s_turn = straight_fraction * length
        kappa = turn / (length - s_turn)
    elif kind == "s-curve":
        s_turn, kappa = None, None
    else:
        raise ValueError(f"unknown trajectory kind {kind!r}")

    samples = []
    w = 2 * np.pi * speed_cycles / duration
    for t in times:
        s = speed * t
        if speed_variation:
            s += speed * speed_variation * (1.0 - np.cos(w * t)) / w
        if kind == "s-curve":
            # integrate heading amplitude*sin(2 pi s / L) with a fine midpoint rule
            m = 2000
            ss = (np.arange(m) + 0.5) * s / m
            psi_s = psi0 + turn * np.sin(2 * np.pi * ss / length)
            pos = np.array(start) + np.array([np.cos(psi_s).sum(), np.sin(psi_s).sum()]) * (s / m)
            psi = psi0 + turn * np.sin(2 * np.pi * s / length)
        else:
            s1 = min(s, s_turn)
            pos = np.array(start) + s1 * np.array([np.cos(psi0), np.sin(psi0)])
            psi = psi0
            if s > s_turn and kappa != 0.0:
                psi = psi0 + kappa * (s - s_turn)
                pos = pos + np.array([np.sin(psi) - np.sin(psi0), np.cos(psi0) - np.cos(psi)]) / kappa
        samples.append((float(t), heading_pose(pos, psi, height)))
    return build_track(samples)


# -- calibration perturbation ------------------------------------------------------


def perturb(gt: CalibrationState, ranges, rng, sensors=None) -> CalibrationState:
    """Priors from ground truth with uniform errors in ``±(cm, degrees, ms)`` per axis."""
    cm, deg, ms = ranges
    if min(cm, deg, ms) < 0:
        raise ValueError("perturbation ranges must be non-negative")
    out = gt.copy()
    for name in sensors or gt.calibrated:
        cal = gt[name]
        dt = rng.uniform(-cm, cm, 3) / 100.0
        ang = np.radians(rng.uniform(-deg, deg, 3))
        dd = rng.uniform(-ms, ms) / 1000.0
        R = euler_xyz_to_matrix(*ang) @ cal.R
        pert = SensorCalibration.from_pose(SE3Pose.from_rt(R, cal.translation + dt), cal.delta + dd)
        if cm == 0 and deg == 0:
            pert = SensorCalibration(cal.rotation, cal.translation.copy(), cal.delta + dd)
        out = out.with_sensor(name, pert)
    return out


# -- default desk-scale setup -----------------------------------------------------


def courtyard_scene(half_x=10.0, half_y=9.0, wall_height=5.0, shading="flat"):
    """Walled yard with checkered walls and floor plus a few obstacles."""
    wall = 0.3
    hx, hy = half_x, half_y
    prims = [
        Plane((0, 0, 0), (0, 0, 1), Checker(1.0, (0.85, 0.8, 0.7), (0.25, 0.3, 0.35)), u_axis=(1, 0, 0)),
        Box((-hx - wall, -hy, 0), (-hx, hy, wall_height), Checker(0.9, (0.9, 0.3, 0.2), (0.2, 0.25, 0.6))),
        Box((hx, -hy, 0), (hx + wall, hy, wall_height), Checker(1.1, (0.2, 0.7, 0.3), (0.95, 0.9, 0.4))),
        Box((-hx, -hy - wall, 0), (hx, -hy, wall_height), Checker(0.8, (0.3, 0.3, 0.8), (0.9, 0.7, 0.6))),
        Box((-hx, hy, 0), (hx, hy + wall, wall_height), Checker(1.2, (0.7, 0.2, 0.6), (0.8, 0.9, 0.9))),
        Box((3.0, -7.5, 0), (4.5, -6.0, 2.0), Checker(0.5, (0.95, 0.6, 0.1), (0.1, 0.1, 0.1))),
        Box((-8.5, 1.0, 0), (-7.0, 3.5, 1.5), Checker(0.5, (0.1, 0.6, 0.9), (0.95, 0.95, 0.95))),
        Box((-1.0, -0.8, 0), (0.8, 1.0, 2.5), Checker(0.6, (0.8, 0.1, 0.1), (0.9, 0.9, 0.2))),
        Sphere((6.5, 4.0, 1.2), 1.2, Checker(0.4, (0.1, 0.1, 0.1), (0.9, 0.5, 0.9))),
        Sphere((-4.0, 6.5, 1.0), 1.0, Checker(0.4, (0.2, 0.8, 0.8), (0.6, 0.2, 0.1))),
    ]
    return PrimitiveScene(prims, shading=shading)


def default_rig(width=80, height=60, fx=60.0, rate=10.0, lidar=LidarModel(), cam1_delta=0.03, lidar_delta=-0.02,
                lidar_rate=None):
    """Reference camera, a second camera yawed 30 degrees, and a top LiDAR."""
    intr = PinholeIntrinsics(fx, fx, width / 2.0, height / 2.0, width, height)
    cam1 = SE3Pose.from_rt(rot_y(30.0), [0.5, 0.05, -0.1])
    # LiDAR axes (x fwd, y left, z up) expressed in the camera frame, slight yaw
    R_lidar = np.stack([[0.0, 0.0, 1.0], [-1.0, 0.0, 0.0], [0.0, -1.0, 0.0]], axis=1)
    lidar_pose = SE3Pose.from_rt(rot_y(-2.0) @ R_lidar, [0.1, -0.4, -0.3])
    return Rig(
        [
            SensorSpec("cam0", "camera", rate, intrinsics=intr),
            SensorSpec("cam1", "camera", rate, cam1, cam1_delta, intrinsics=intr),
            SensorSpec("lidar0", "lidar", lidar_rate or rate, lidar_pose, lidar_delta, lidar=lidar),
        ],
        reference="cam0",
    )


def capture_times(spec: SensorSpec, duration):
    """Reference-clock trigger times ``0, 1/rate, ...`` up to ``duration``."""
    n = int(np.floor(duration * spec.rate + 1e-9)) + 1
    return np.arange(n) / spec.rate


# -- datasets -----------------------------------------------------------------------


def simulate_dataset(scene, rig: Rig, track: TimedPoseTrack, duration, supersample=3,
                     background=(1.0, 1.0, 1.0), pixel_noise=0.0, range_noise=0.0, seed=0) -> RigDataset:
    """Simulate every sensor at its own rate with its ground-truth clock offset."""
    rng = np.random.default_rng(seed)
    gt = rig.gt_calibration()
    streams = {}
    for spec in rig.sensors:
        stamps = capture_times(spec, duration) - (0.0 if spec.name == rig.reference else spec.gt_delta)
        if spec.kind == "camera":
            images = []
            for t in stamps:
                pose = sensor_pose(gt, track, spec.name, t)
                img, _ = simulate_camera_frame(scene, spec, pose, t, background, supersample, pixel_noise, rng)
                images.append(np.round(img * 255.0).astype(np.uint8))
            streams[spec.name] = SensorStream(spec.name, "camera", stamps, intrinsics=spec.intrinsics,
                                              images=np.stack(images), rate=spec.rate)
        else:
            scans = []
            for t in stamps:
                dirs, ranges, _ = simulate_lidar_scan(scene, spec, track, gt, t, range_noise, rng)
                scans.append((dirs, ranges))
            streams[spec.name] = SensorStream(spec.name, "lidar", stamps, scans=scans, rate=spec.rate,
                                              lidar_max_range=spec.lidar.max_range)
    return RigDataset(rig.reference, track, streams, gt)


def write_dataset(directory, scene, rig: Rig, track: TimedPoseTrack, duration, blind=False, **kw) -> RigDataset:
    ds = simulate_dataset(scene, rig, track, duration, **kw)
    save_dataset(directory, ds, blind=blind)
    return ds


def simulate_from_config(sim, seed=0):
    """``(dataset, priors)`` for a :class:`stcalib.config.SimConfig`.

    The priors perturb the ground truth by ``perturb_cm/deg/ms``; both the
    frames (noise) and the perturbation are driven by ``seed``.
    """
    lidar = LidarModel(rings=sim.lidar_rings, azimuth_steps=sim.lidar_azimuth_steps, max_range=sim.lidar_max_range)
    rig = default_rig(sim.width, sim.height_px, sim.fx, sim.camera_rate, lidar, sim.cam1_delta, sim.lidar_delta,
                      lidar_rate=sim.lidar_rate)
    track = make_trajectory(sim.trajectory, sim.duration, sim.speed, sim.knot_rate, sim.turn_deg,
                            sim.straight_fraction, sim.start, sim.start_heading_deg, sim.height,
                            sim.speed_variation, sim.speed_cycles)
    ds = simulate_dataset(courtyard_scene(shading=sim.shading), rig, track, sim.duration, sim.supersample,
                          sim.background, sim.pixel_noise, sim.range_noise, seed)
    priors = perturb(ds.gt, (sim.perturb_cm, sim.perturb_deg, sim.perturb_ms), np.random.default_rng([seed, 1]))
    return ds, priors
