"""Ray generation, stratified sampling and volumetric compositing.

``render_rays`` evaluates the field along batches of rays and composites
color, expected depth and opacity; ``render_backward`` pushes loss adjoints
back to the field parameters and to the ray origins and directions.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NonUnitDirection, PixelOutOfBounds
from .geometry import SE3Pose


@dataclass(frozen=True)
class PinholeIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise ValueError("image size must be at least 1x1")

    def pixel_directions(self, pixels):
        """Unit sensor-frame directions through pixel centers ``(u, v)``."""
        pixels = np.asarray(pixels, dtype=float).reshape(-1, 2)
        u, v = pixels[:, 0], pixels[:, 1]
        if np.any((u < 0) | (u >= self.width) | (v < 0) | (v >= self.height)):
            raise PixelOutOfBounds(f"pixel outside {self.width}x{self.height} image")
        d = np.stack([(u + 0.5 - self.cx) / self.fx, (v + 0.5 - self.cy) / self.fy, np.ones_like(u)], axis=1)
        return d / np.linalg.norm(d, axis=1, keepdims=True)

    def all_pixels(self):
        vv, uu = np.mgrid[0 : self.height, 0 : self.width]
        return np.stack([uu.ravel(), vv.ravel()], axis=1)


@dataclass(frozen=True, eq=False)
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    near: float
    far: float

    def __post_init__(self):
        d = np.asarray(self.direction, dtype=float)
        if abs(np.linalg.norm(d) - 1.0) > 1e-9:
            raise NonUnitDirection("ray direction must be unit length")
        if not 0.0 <= self.near < self.far:
            raise ValueError("need 0 <= near < far")


@dataclass(frozen=True)
class RenderResult:
    color: np.ndarray
    depth: float
    opacity: float


@dataclass(frozen=True)
class RenderConfig:
    n_samples: int = 96
    near: float = 0.1
    far: float = 60.0
    background: tuple = (1.0, 1.0, 1.0)
    importance: bool = False
    n_importance: int = 0  # 0 means n_samples // 2
    clip_to_bounds: bool = True


@dataclass(eq=False)
class RayBatch:
    """Structure-of-arrays rays: ``origins``/``dirs`` ``(R, 3)``, ``near``/``far`` ``(R,)``."""

    origins: np.ndarray
    dirs: np.ndarray
    near: np.ndarray
    far: np.ndarray

    @classmethod
    def from_rays(cls, rays):
        return cls(
            np.array([r.origin for r in rays], dtype=float).reshape(-1, 3),
            np.array([r.direction for r in rays], dtype=float).reshape(-1, 3),
            np.array([r.near for r in rays], dtype=float),
            np.array([r.far for r in rays], dtype=float),
        )

    def __len__(self):
        return len(self.near)


def camera_rays(intr: PinholeIntrinsics, pose: SE3Pose, pixels, near=0.1, far=60.0):
    dirs = intr.pixel_directions(pixels) @ pose.R.T
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    return [Ray(pose.translation.copy(), d, near, far) for d in dirs]


def lidar_rays(pose: SE3Pose, unit_dirs_sensor_frame, near=0.1, far=60.0):
    d = np.asarray(unit_dirs_sensor_frame, dtype=float).reshape(-1, 3)
    if np.any(np.abs(np.linalg.norm(d, axis=1) - 1.0) > 1e-9):
        raise NonUnitDirection("LiDAR directions must be unit length")
    dirs = d @ pose.R.T
    return [Ray(pose.translation.copy(), v, near, far) for v in dirs]


def stratified_samples(ray: Ray, n, rng):
    """One uniform draw in each of ``n`` equal bins of ``[near, far]``."""
    if n < 2:
        raise ValueError("need at least 2 samples per ray")
    return stratified_t(np.array([ray.near]), np.array([ray.far]), n, rng)[0]


def stratified_t(near, far, n, rng):
    u = np.asarray(rng.random((len(near), n)), dtype=float)
    k = np.arange(n)
    return near[:, None] + (far - near)[:, None] * (k + u) / n


def clip_to_box(origins, dirs, near, far, lo, hi):
    """Shrink ``[near, far]`` to the part of each ray inside the box."""
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t0 = (lo - origins) * inv
        t1 = (hi - origins) * inv
    tmin = np.nanmax(np.minimum(t0, t1), axis=1)
    tmax = np.nanmin(np.maximum(t0, t1), axis=1)
    new_near = np.maximum(near, tmin)
    new_far = np.minimum(far, tmax)
    empty = new_far <= new_near
    new_near = np.where(empty, near, new_near)
    new_far = np.where(empty, np.minimum(far, near + 1e-3), new_far)
    return new_near, new_far, empty


def composite(sigmas, colors, ts, background, far):
    """Alpha-composite one ray's samples into color, expected depth and opacity."""
    out = composite_batch(
        np.asarray(sigmas, float)[None, :],
        np.asarray(colors, float).reshape(1, -1, 3),
        np.asarray(ts, float)[None, :],
        np.asarray(background, float),
        np.array([far], float),
    )
    color, depth, opacity = out[0][0], out[1][0], out[2][0]
    return RenderResult(color, float(depth), float(opacity))


def composite_batch(sigma, rgb, t, background, far, depth_far=None):
    """Vectorized compositing; returns (color, depth, opacity, weights, cache).

    ``far`` closes the last sample interval. The unoccluded remainder of the
    ray counts as depth ``depth_far`` (default ``far``); renderers that clip
    rays to the scene box pass the unclipped far here so that escaping the
    box reads as open sky rather than a surface at the box wall.
    """
    depth_far = far if depth_far is None else depth_far
    delta = np.empty_like(t)
    delta[:, :-1] = np.diff(t, axis=1)
    delta[:, -1] = far - t[:, -1]
    tau = sigma * delta
    alpha = -np.expm1(-tau)
    acc_tau = np.cumsum(tau, axis=1)
    trans = np.exp(-(acc_tau - tau))
    w = trans * alpha
    opacity = w.sum(axis=1)
    color = np.einsum("rs,rsc->rc", w, rgb) + (1.0 - opacity)[:, None] * background
    depth = (w * t).sum(axis=1) + (1.0 - opacity) * depth_far
    cache = (delta, tau, trans, w, rgb, t, np.asarray(background, float), depth_far)
    return color, depth, opacity, w, cache


def composite_backward(cache, g_color, g_depth, g_opacity):
    """Adjoints of :func:`composite_batch`; returns (dL/dsigma, dL/drgb)."""
    delta, tau, trans, w, rgb, t, background, depth_far = cache
    g_w = np.einsum("rc,rsc->rs", g_color, rgb) - (g_color @ background)[:, None]
    g_w += g_depth[:, None] * (t - depth_far[:, None]) + g_opacity[:, None]
    g_rgb = w[:, :, None] * g_color[:, None, :]
    gw_w = g_w * w
    # sum over later samples k > j of g_w_k * w_k
    later = np.cumsum(gw_w[:, ::-1], axis=1)[:, ::-1] - gw_w
    trans_next = trans * np.exp(-tau)
    g_sigma = delta * (trans_next * g_w - later)
    return g_sigma, g_rgb


def _sample_pdf(t_coarse, w, n, far, rng):
    """Inverse-CDF samples from piecewise-constant weights over coarse bins."""
    edges = np.concatenate([t_coarse, far[:, None]], axis=1)
    pdf = w + 1e-5
    pdf /= pdf.sum(axis=1, keepdims=True)
    cdf = np.concatenate([np.zeros((len(w), 1)), np.cumsum(pdf, axis=1)], axis=1)
    cdf[:, -1] = 1.0
    u = np.sort(np.asarray(rng.random((len(w), n)), dtype=float), axis=1)
    # per-row searchsorted through a row offset
    rows = np.arange(len(w))[:, None]
    flat = (cdf + 2.0 * rows).ravel()
    k = np.searchsorted(flat, (u + 2.0 * rows).ravel(), side="right").reshape(u.shape) - 1
    k = np.clip(k - rows * cdf.shape[1], 0, cdf.shape[1] - 2)
    c0 = np.take_along_axis(cdf, k, axis=1)
    c1 = np.take_along_axis(cdf, k + 1, axis=1)
    e0 = np.take_along_axis(edges, k, axis=1)
    e1 = np.take_along_axis(edges, k + 1, axis=1)
    frac = np.where(c1 > c0, (u - c0) / np.where(c1 > c0, c1 - c0, 1.0), 0.0)
    return e0 + frac * (e1 - e0)


@dataclass(eq=False)
class RenderOutput:
    color: np.ndarray
    depth: np.ndarray
    opacity: np.ndarray
    cache: tuple = field(default=None, repr=False)


def render_rays(radiance_field, rays, cfg: RenderConfig, rng, t_samples=None):
    """Forward render a :class:`RayBatch` (or list of :class:`Ray`).

    ``t_samples`` may pin the sample distances ``(R, S)``, e.g. for gradient
    checks with frozen sampling.
    """
    if not isinstance(rays, RayBatch):
        rays = RayBatch.from_rays(rays)
    grid = radiance_field.grid
    bg = np.asarray(cfg.background, dtype=float)
    near, far = rays.near, rays.far
    if cfg.clip_to_bounds and t_samples is None:
        near, far, _ = clip_to_box(rays.origins, rays.dirs, near, far, grid.lo, grid.hi)
    if t_samples is None:
        t = stratified_t(near, far, cfg.n_samples, rng)
        if cfg.importance:
            sigma_c, _, _ = _eval_field(radiance_field, rays, t, want_cache=False)
            *_, w_c, _ = composite_batch(sigma_c, np.zeros(t.shape + (3,)), t, bg, far)
            extra = _sample_pdf(t, w_c, cfg.n_importance or cfg.n_samples // 2, far, rng)
            t = np.sort(np.concatenate([t, extra], axis=1), axis=1)
    else:
        t = np.asarray(t_samples, dtype=float)
    sigma, rgb, fcache = _eval_field(radiance_field, rays, t, want_cache=True)
    color, depth, opacity, _, ccache = composite_batch(sigma, rgb, t, bg, far, rays.far)
    return RenderOutput(color, depth, opacity, (rays, t, fcache, ccache))


def _eval_field(radiance_field, rays, t, want_cache):
    R, S = t.shape
    x = rays.origins[:, None, :] + t[:, :, None] * rays.dirs[:, None, :]
    inside = radiance_field.grid.inside(x).ravel()
    idx = np.flatnonzero(inside)
    sigma = np.zeros(R * S)
    rgb = np.zeros((R * S, 3))
    cache = None
    ray_ids = None
    if len(idx):
        # samples are ray-major, so each ray's in-bounds samples are one run
        ray_of = idx // S
        starts = np.flatnonzero(np.r_[True, ray_of[1:] != ray_of[:-1]])
        ray_ids = ray_of[starts]
        s, c, cache = radiance_field.forward(x.reshape(-1, 3)[idx], rays.dirs[ray_ids], groups=starts)
        sigma[idx] = s
        rgb[idx] = c
    if not want_cache:
        cache = None
    return sigma.reshape(R, S), rgb.reshape(R, S, 3), (idx, ray_ids, cache)


def render_backward(radiance_field, out: RenderOutput, g_color, g_depth, g_opacity, grads):
    """Accumulate field gradients into ``grads``; return (dL/dorigins, dL/ddirs)."""
    rays, t, (idx, ray_ids, fcache), ccache = out.cache
    R, S = t.shape
    g_color = np.zeros((R, 3)) if g_color is None else np.asarray(g_color, float)
    g_depth = np.zeros(R) if g_depth is None else np.asarray(g_depth, float)
    g_opacity = np.zeros(R) if g_opacity is None else np.asarray(g_opacity, float)
    g_sigma, g_rgb = composite_backward(ccache, g_color, g_depth, g_opacity)
    g_o = np.zeros((R, 3))
    g_d = np.zeros((R, 3))
    if len(idx) == 0:
        return g_o, g_d
    g_x, g_view = radiance_field.backward(fcache, g_sigma.ravel()[idx], g_rgb.reshape(-1, 3)[idx], grads)
    gx_full = np.zeros((R * S, 3))
    gx_full[idx] = g_x
    gx_full = gx_full.reshape(R, S, 3)
    g_o = gx_full.sum(axis=1)
    g_d = np.einsum("rs,rsk->rk", t, gx_full)
    g_d[ray_ids] += g_view
    return g_o, g_d
