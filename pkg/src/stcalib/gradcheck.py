"""Finite-difference suites for every hand-written adjoint in the pipeline.

Each suite returns :class:`Check` records; ``run_suites`` is what the
``gradcheck`` command and the test-suite call. All checks use central
differences with fixed seeds and frozen ray samples, so results are
reproducible.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .calibration import CalibrationState, SensorCalibration, sensor_pose_backward, sensor_poses
from .field import FieldConfig, RadianceField, field_eval, field_eval_backward
from .losses import LossWeights, PatchSpec, color_loss, depth_loss, depth_smoothness_loss, dssim_loss
from .renderer import RayBatch, RenderConfig, render_backward, render_rays

SUITES = ("field", "render", "losses", "calib")


@dataclass(frozen=True)
class Check:
    suite: str
    name: str
    rel_err: float
    tol: float

    @property
    def passed(self):
        return bool(np.isfinite(self.rel_err) and self.rel_err <= self.tol)

    def line(self):
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.suite:<7} {self.name:<40} rel_err={self.rel_err:.2e} tol={self.tol:.0e}"


def rel_error(analytic, numeric, floor=1e-10):
    """Largest elementwise ``|a - n|`` relative to the larger magnitude (with a floor)."""
    a = np.asarray(analytic, dtype=float).ravel()
    n = np.asarray(numeric, dtype=float).ravel()
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


def vec_rel_error(analytic, numeric, floor=1e-12):
    """``max|a - n| / max|n|``; robust when some components are near zero."""
    a = np.asarray(analytic, dtype=float).ravel()
    n = np.asarray(numeric, dtype=float).ravel()
    return float(np.max(np.abs(a - n)) / max(np.max(np.abs(n)), floor))


def _pick_entry(rng, grad):
    """Random index among entries whose gradient is not negligible (finite
    differences cannot resolve values near roundoff)."""
    mag = np.abs(grad).ravel()
    cand = np.flatnonzero(mag >= 1e-3 * mag.max()) if mag.max() > 0 else np.arange(mag.size)
    return int(rng.choice(cand))


def central_diff(f, x, h):
    """Gradient of scalar ``f`` at array ``x`` (modified in place, restored)."""
    g = np.zeros(x.size)
    flat = x.reshape(-1)
    for i in range(x.size):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g.reshape(x.shape)


def _kink_margin(rf, x, d):
    """Smallest |pre-activation| over both ReLU layers for each query point."""
    _, _, (_, cache) = rf.forward(x, d)
    z1, z3 = cache[1], cache[6]
    return np.minimum(np.abs(z1).min(axis=1), np.abs(z3).min(axis=1))


def _draw_smooth_points(rf, rng, n, lo, hi, margin=1e-3):
    """Query points whose ReLU inputs all sit at least ``margin`` from the kink,
    so a central difference never straddles it."""
    xs, ds = [], []
    while len(xs) < n:
        x = rng.uniform(lo, hi, (n, 3))
        d = rng.normal(size=(n, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        ok = _kink_margin(rf, x, d) > margin
        xs.extend(x[ok])
        ds.extend(d[ok])
    return np.array(xs[:n]), np.array(ds[:n])


def _check_field(seed=0):
    rng = np.random.default_rng(seed)
    cfg = FieldConfig(bounds_min=(-2.0, -2.0, -2.0), bounds_max=(2.0, 2.0, 2.0), log2_hash_size=12,
                      hidden_width=16, color_hidden_width=16, geo_features=7, grid_init_scale=0.5)
    rf = RadianceField(cfg, seed=seed)
    grid, dec = rf.grid, rf.decoder
    x, d = _draw_smooth_points(rf, rng, 20, -1.8, 1.8)
    a_s = rng.normal(size=20)
    a_c = rng.normal(size=(20, 3))

    def scalar(k=None):
        ks = range(20) if k is None else [k]
        total = 0.0
        for i in ks:
            s, c = field_eval(grid, dec, x[i], d[i])
            total += a_s[i] * s + a_c[i] @ c
        return total

    out = []
    # parameters: pick entries that the queries actually touch
    grads = {k: np.zeros_like(v) for k, v in rf.params.items()}
    for i in range(20):
        g, _ = field_eval_backward(grid, dec, x[i], d[i], a_s[i], a_c[i])
        for k in grads:
            grads[k] += g[k]
    errs = []
    names = list(grads)
    for j in range(20):
        name = names[j % len(names)]
        arr = rf.params[name]
        flat_i = _pick_entry(rng, grads[name])
        num = central_diff(lambda: scalar(), arr.reshape(-1)[flat_i : flat_i + 1], 1e-4)[0]
        errs.append(rel_error(grads[name].reshape(-1)[flat_i], num))
    out.append(Check("field", "parameter gradients (20 entries)", max(errs), 1e-3))
    errs = []
    for i in range(20):
        _, gx = field_eval_backward(grid, dec, x[i], d[i], a_s[i], a_c[i])
        xi = x[i].copy()

        def f(xi=xi, i=i):
            s, c = field_eval(grid, dec, xi, d[i])
            return a_s[i] * s + a_c[i] @ c

        errs.append(vec_rel_error(gx, central_diff(f, xi, 1e-5)))
    out.append(Check("field", "position gradients (20 points)", max(errs), 1e-3))
    return out


def _render_setup(seed):
    rng = np.random.default_rng(seed)
    cfg = FieldConfig(bounds_min=(-50.0,) * 3, bounds_max=(50.0,) * 3, log2_hash_size=12, hidden_width=16,
                      color_hidden_width=16, geo_features=7, grid_init_scale=0.5)
    rf = RadianceField(cfg, seed=seed)
    n, s = 6, 24
    origins = rng.uniform(-1, 1, (n, 3))
    dirs = rng.normal(size=(n, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    t = np.sort(rng.uniform(0.2, 8.0, (n, s)), axis=1)
    for _ in range(100):
        x = (origins[:, None, :] + t[..., None] * dirs[:, None, :]).reshape(-1, 3)
        bad = (_kink_margin(rf, x, np.repeat(dirs, s, axis=0)) <= 1e-3).reshape(n, s)
        if not bad.any():
            break
        t = np.sort(np.where(bad, rng.uniform(0.2, 8.0, (n, s)), t), axis=1)
    rcfg = RenderConfig(n_samples=s, near=0.1, far=10.0)
    w_c = rng.normal(size=(n, 3))
    w_d = rng.normal(size=n) * 0.1
    w_o = rng.normal(size=n)
    return rf, rcfg, origins, dirs, t, (w_c, w_d, w_o)


def _check_render(seed=1):
    rf, rcfg, origins, dirs, t, (w_c, w_d, w_o) = _render_setup(seed)
    rng = np.random.default_rng(seed)
    n = len(origins)

    def loss():
        rays = RayBatch(origins, dirs, np.full(n, rcfg.near), np.full(n, rcfg.far))
        out = render_rays(rf, rays, rcfg, rng, t_samples=t)
        return float((w_c * out.color).sum() + (w_d * out.depth).sum() + (w_o * out.opacity).sum()), out

    _, out = loss()
    grads = rf.zero_grads()
    g_o, g_d = render_backward(rf, out, w_c, w_d, w_o, grads)
    res = [
        Check("render", "ray origin gradients", vec_rel_error(g_o, central_diff(lambda: loss()[0], origins, 1e-5)), 1e-3),
        # sample points move by t*h along a direction, so use a step ~1e-5 m in space
        Check("render", "ray direction gradients", vec_rel_error(g_d, central_diff(lambda: loss()[0], dirs, 1e-6)), 1e-3),
    ]
    errs = []
    names = list(grads)
    for j in range(20):
        name = names[j % len(names)]
        flat_i = _pick_entry(rng, grads[name])
        arr = rf.params[name].reshape(-1)
        num = central_diff(lambda: loss()[0], arr[flat_i : flat_i + 1], 1e-4)[0]
        errs.append(rel_error(grads[name].reshape(-1)[flat_i], num))
    res.append(Check("render", "field parameter gradients (20 entries)", max(errs), 1e-3))
    return res


def _check_losses(seed=2):
    rng = np.random.default_rng(seed)
    out = []
    pred, gt = rng.uniform(size=(7, 3)), rng.uniform(size=(7, 3))
    _, g = color_loss(pred, gt)
    out.append(Check("losses", "color adjoint", vec_rel_error(g, central_diff(lambda: color_loss(pred, gt)[0], pred, 1e-6)), 1e-6))
    pd, gd = rng.uniform(1, 10, 9), rng.uniform(1, 10, 9)
    mask = rng.uniform(size=9) > 0.3
    mask[0] = True
    _, g = depth_loss(pd, gd, mask)
    out.append(Check("losses", "depth adjoint", vec_rel_error(g, central_diff(lambda: depth_loss(pd, gd, mask)[0], pd, 1e-6)), 1e-4))
    px, py = rng.uniform(size=(3, 8, 8, 3)), rng.uniform(size=(3, 8, 8, 3))
    _, g = dssim_loss(px, py)
    out.append(Check("losses", "DSSIM adjoint", vec_rel_error(g, central_diff(lambda: dssim_loss(px, py)[0], px, 1e-6)), 1e-4))
    dp = rng.uniform(1, 5, (2, 8, 8))
    _, g = depth_smoothness_loss(dp)
    out.append(Check("losses", "depth smoothness adjoint",
                     vec_rel_error(g, central_diff(lambda: depth_smoothness_loss(dp)[0], dp, 1e-6)), 1e-4))
    return out


def _tiny_dataset(seed=3):
    """A one-second rig with 16x12 cameras and a sparse LiDAR, simulated in memory."""
    from .rig_sim import LidarModel, courtyard_scene, default_rig, make_trajectory, simulate_dataset

    rig = default_rig(width=16, height=12, fx=12.0, lidar=LidarModel(rings=4, azimuth_steps=24))
    track = make_trajectory("arc", duration=1.2, turn_deg=30.0, start=(-3.0, -2.0))
    return simulate_dataset(courtyard_scene(), rig, track, 1.0, supersample=1, seed=seed)


def _check_calib(seed=3):
    from .optimizer import JointModel
    from .rig_sim import perturb

    rng = np.random.default_rng(seed)
    out = []
    ds = _tiny_dataset(seed)
    calib = perturb(ds.gt, (20, 5, 50), rng)
    # pose chain: linear functional of the world poses
    for name in calib.calibrated:
        ts = ds.sensors[name].timestamps[1:-1]
        A = rng.normal(size=(len(ts), 3, 3))
        b = rng.normal(size=(len(ts), 3))
        fp = sensor_poses(calib, ds.track, name, ts)
        g = sensor_pose_backward(calib, fp, A, b)
        v = calib[name].vector().copy()

        def f(v=v, name=name, ts=ts, A=A, b=b):
            c = CalibrationState(calib.reference, {**calib.sensors, name: SensorCalibration.from_vector(v)})
            p = sensor_poses(c, ds.track, name, ts)
            return float((A * p.Rw).sum() + (b * p.pw).sum())

        out.append(Check("calib", f"pose chain ({name})", vec_rel_error(g, central_diff(f, v, 1e-6)), 1e-3))
    # full chain with frozen rays and sample distances
    cfg = FieldConfig(bounds_min=(-100.0,) * 3, bounds_max=(100.0,) * 3, log2_hash_size=12, hidden_width=16,
                      color_hidden_width=16, geo_features=7, grid_init_scale=0.5)
    model = JointModel(ds, RadianceField(cfg, seed=seed), calib, RenderConfig(n_samples=12),
                       LossWeights(), PatchSpec(size=4, per_frame=0.5), depth_scale=5.0)
    batch = model.sample_epoch(np.random.default_rng(seed), 6, 10**6)[0]
    t = np.sort(rng.uniform(0.5, 12.0, (len(batch.dirs), 12)), axis=1)
    _, _, _, cgrads = model.loss_and_grads(batch, rng, epoch=10, t_samples=t)
    for name in calib.calibrated:
        v = model.calib[name]
        num = central_diff(lambda: model.loss_and_grads(batch, rng, epoch=10, t_samples=t, need_grad=False)[0], v, 1e-6)
        out.append(Check("calib", f"full chain d(loss)/d(calib) ({name})", vec_rel_error(cgrads[name], num), 1e-2))
    return out


_RUNNERS = {"field": _check_field, "render": _check_render, "losses": _check_losses, "calib": _check_calib}


def run_suites(modules=("all",), seed=0):
    """Run the requested suites; returns ``(checks, seconds)``."""
    if "all" in modules:
        modules = SUITES
    unknown = [m for m in modules if m not in _RUNNERS]
    if unknown:
        raise ValueError(f"unknown gradcheck suite(s): {', '.join(unknown)}")
    t0 = time.perf_counter()
    checks = []
    for m in modules:
        checks.extend(_RUNNERS[m](seed + SUITES.index(m)))
    return checks, time.perf_counter() - t0
