"""Multi-resolution feature grid plus a tiny decoder, with exact adjoints.

The grid encoder trilinearly interpolates per-level feature tables (dense
when ``res**3 <= hash_size``, spatially hashed otherwise). The decoder maps
features to density and, together with a spherical-harmonics view encoding,
to RGB. Backward passes return gradients for every parameter and for the
query positions and directions, since those depend on the calibration.
"""

from __future__ import annotations

from dataclasses import dataclass, fields, replace

import numba
import numpy as np
from scipy.special import expit

from .errors import OutOfBounds

HASH_PRIMES = (1, 2654435761, 805459861)


@dataclass(frozen=True)
class FieldConfig:
    n_levels: int = 8
    base_resolution: int = 16
    max_resolution: int = 256
    features_per_level: int = 2
    log2_hash_size: int = 16
    hidden_width: int = 64
    geo_features: int = 15
    color_hidden_width: int = 64
    sh_degree: int = 2
    bounds_min: tuple = (-1.0, -1.0, -1.0)
    bounds_max: tuple = (1.0, 1.0, 1.0)
    grid_init_scale: float = 1e-4
    density_scale: float = 1.0  # sigma = density_scale * softplus(raw)

    @property
    def hash_size(self):
        return 1 << self.log2_hash_size

    def replace(self, **kw):
        return replace(self, **kw)

    def to_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}


def level_resolutions(cfg: FieldConfig) -> np.ndarray:
    if cfg.n_levels == 1:
        return np.array([cfg.base_resolution], dtype=np.int64)
    res = np.geomspace(cfg.base_resolution, cfg.max_resolution, cfg.n_levels)
    return np.round(res).astype(np.int64)


def spatial_hash(i, j, k, hash_size):
    """``(i*1 xor j*2654435761 xor k*805459861) mod hash_size`` on uint64."""
    i = np.asarray(i, dtype=np.uint64)
    j = np.asarray(j, dtype=np.uint64)
    k = np.asarray(k, dtype=np.uint64)
    h = (i * np.uint64(HASH_PRIMES[0])) ^ (j * np.uint64(HASH_PRIMES[1])) ^ (k * np.uint64(HASH_PRIMES[2]))
    return h % np.uint64(hash_size)


@numba.njit(cache=True, inline="always")
def _cell(p, r):
    x = p * (r - 1)
    i = np.int64(np.floor(x))
    if i > r - 2:
        i = r - 2
    if i < 0:
        i = 0
    return i, x - i


@numba.njit(cache=True, inline="always")
def _level_setup(xn, n, r, hashed, hash_size, wts, idx):
    """Per-axis corner weights ``wts[axis, side]`` and index terms ``idx[axis, side]``.

    A corner's table row is ``idx[0,a] + idx[1,b] + idx[2,c]`` (dense) or their
    xor masked to the table size (hashed).
    """
    for a in range(3):
        i, f = _cell(xn[n, a], r)
        wts[a, 0] = 1.0 - f
        wts[a, 1] = f
        for side in range(2):
            v = np.uint64(i + side)
            if hashed:
                if a == 0:
                    idx[a, side] = v
                elif a == 1:
                    idx[a, side] = v * np.uint64(2654435761)
                else:
                    idx[a, side] = v * np.uint64(805459861)
            else:
                stride = 1 if a == 0 else (r if a == 1 else r * r)
                idx[a, side] = v * np.uint64(stride)


@numba.njit(cache=True, inline="always")
def _row(idx, cx, cy, cz, hashed, mask):
    if hashed:
        return np.int64((idx[0, cx] ^ idx[1, cy] ^ idx[2, cz]) & mask)
    return np.int64(idx[0, cx] + idx[1, cy] + idx[2, cz])


@numba.njit(cache=True)
def _encode_kernel(xn, table, offsets, res, hashed, hash_size, out):
    n_pts = xn.shape[0]
    n_feat = table.shape[1]
    mask = np.uint64(hash_size - 1)
    wts = np.empty((3, 2))
    idx = np.empty((3, 2), dtype=np.uint64)
    for n in range(n_pts):
        for lv in range(res.shape[0]):
            _level_setup(xn, n, res[lv], hashed[lv], hash_size, wts, idx)
            base = lv * n_feat
            off = offsets[lv]
            for cz in range(2):
                for cy in range(2):
                    wyz = wts[1, cy] * wts[2, cz]
                    for cx in range(2):
                        w = wts[0, cx] * wyz
                        row = off + _row(idx, cx, cy, cz, hashed[lv], mask)
                        for f in range(n_feat):
                            out[n, base + f] += w * table[row, f]


@numba.njit(cache=True)
def _encode_backward_kernel(xn, g_out, table, offsets, res, hashed, hash_size, g_table, g_xn):
    n_pts = xn.shape[0]
    n_feat = table.shape[1]
    mask = np.uint64(hash_size - 1)
    wts = np.empty((3, 2))
    idx = np.empty((3, 2), dtype=np.uint64)
    sgn = (-1.0, 1.0)
    for n in range(n_pts):
        for lv in range(res.shape[0]):
            _level_setup(xn, n, res[lv], hashed[lv], hash_size, wts, idx)
            base = lv * n_feat
            off = offsets[lv]
            scale = res[lv] - 1.0
            gx = 0.0
            gy = 0.0
            gz = 0.0
            for cz in range(2):
                for cy in range(2):
                    for cx in range(2):
                        wx = wts[0, cx]
                        wy = wts[1, cy]
                        wz = wts[2, cz]
                        w = wx * wy * wz
                        row = off + _row(idx, cx, cy, cz, hashed[lv], mask)
                        dot = 0.0
                        for f in range(n_feat):
                            g = g_out[n, base + f]
                            g_table[row, f] += w * g
                            dot += g * table[row, f]
                        gx += dot * sgn[cx] * wy * wz
                        gy += dot * wx * sgn[cy] * wz
                        gz += dot * wx * wy * sgn[cz]
            g_xn[n, 0] += gx * scale
            g_xn[n, 1] += gy * scale
            g_xn[n, 2] += gz * scale


class MultiResGrid:
    """Per-level feature tables over an axis-aligned scene box."""

    def __init__(self, cfg: FieldConfig, rng=None):
        self.cfg = cfg
        self.resolutions = level_resolutions(cfg)
        self.hashed = self.resolutions**3 > cfg.hash_size
        sizes = np.where(self.hashed, cfg.hash_size, self.resolutions**3)
        self.offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)
        self.lo = np.asarray(cfg.bounds_min, dtype=float)
        self.hi = np.asarray(cfg.bounds_max, dtype=float)
        n_rows = int(self.offsets[-1])
        if rng is None:
            self.table = np.zeros((n_rows, cfg.features_per_level))
        else:
            s = cfg.grid_init_scale
            self.table = rng.uniform(-s, s, size=(n_rows, cfg.features_per_level))

    @property
    def output_dim(self):
        return self.cfg.n_levels * self.cfg.features_per_level

    def normalize(self, x):
        return (np.asarray(x, dtype=float) - self.lo) / (self.hi - self.lo)

    def inside(self, x):
        x = np.asarray(x, dtype=float)
        return np.all((x >= self.lo) & (x <= self.hi), axis=-1)

    def row_index(self, level, ijk):
        """Table row of integer vertex ``ijk`` at ``level`` (offset included)."""
        r = int(self.resolutions[level])
        i, j, k = (int(v) for v in ijk)
        if self.hashed[level]:
            idx = int(spatial_hash(i, j, k, self.cfg.hash_size))
        else:
            idx = i + j * r + k * r * r
        return int(self.offsets[level]) + idx

    def encode_normalized(self, xn):
        xn = np.ascontiguousarray(xn, dtype=float).reshape(-1, 3)
        out = np.zeros((xn.shape[0], self.output_dim))
        _encode_kernel(xn, self.table, self.offsets, self.resolutions, self.hashed, self.cfg.hash_size, out)
        return out

    def encode_normalized_backward(self, xn, g_out, g_table):
        """Accumulate table gradients into ``g_table``; return dLoss/dxn."""
        xn = np.ascontiguousarray(xn, dtype=float).reshape(-1, 3)
        g_xn = np.zeros_like(xn)
        _encode_backward_kernel(
            xn, np.ascontiguousarray(g_out), self.table, self.offsets, self.resolutions,
            self.hashed, self.cfg.hash_size, g_table, g_xn,
        )
        return g_xn

    def encode(self, x):
        """Features for world points ``x`` (``(3,)`` or ``(N, 3)``)."""
        x = np.asarray(x, dtype=float)
        if not np.all(self.inside(x)):
            raise OutOfBounds(f"query outside scene bounds {self.lo}..{self.hi}")
        out = self.encode_normalized(self.normalize(x))
        return out[0] if x.ndim == 1 else out


# Real spherical harmonics, degrees 0..3 (graphics convention).
_C0 = 0.28209479177387814
_C1 = 0.48860251190291987
_C2 = (1.0925484305920792, 0.94617469575755997, 0.31539156525251999, 0.54627421529603959)
_C3 = (0.59004358992664352, 2.8906114426405538, 0.45704579946446572, 0.3731763325901154, 1.4453057213202769)


def sh_components(degree):
    return (degree + 1) ** 2


def sh_encode(d, degree, jacobian=False):
    """SH basis of unit directions ``d`` ``(N, 3)``; optionally ``(N, C, 3)`` Jacobian."""
    if not 0 <= degree <= 3:
        raise ValueError("sh_degree must be in 0..3")
    d = np.asarray(d, dtype=float).reshape(-1, 3)
    x, y, z = d[:, 0], d[:, 1], d[:, 2]
    one = np.ones_like(x)
    zero = np.zeros_like(x)
    comps = [_C0 * one]
    jac = [(zero, zero, zero)]
    if degree >= 1:
        comps += [-_C1 * y, _C1 * z, -_C1 * x]
        jac += [(zero, -_C1 * one, zero), (zero, zero, _C1 * one), (-_C1 * one, zero, zero)]
    if degree >= 2:
        a, b, c, e = _C2
        comps += [a * x * y, -a * y * z, b * z * z - c, -a * x * z, e * (x * x - y * y)]
        jac += [
            (a * y, a * x, zero),
            (zero, -a * z, -a * y),
            (zero, zero, 2 * b * z),
            (-a * z, zero, -a * x),
            (2 * e * x, -2 * e * y, zero),
        ]
    if degree >= 3:
        A, B, C, D, E = _C3
        comps += [
            A * y * (y * y - 3 * x * x),
            B * x * y * z,
            C * y * (1 - 5 * z * z),
            D * z * (5 * z * z - 3),
            C * x * (1 - 5 * z * z),
            E * z * (x * x - y * y),
            A * x * (3 * y * y - x * x),
        ]
        jac += [
            (-6 * A * x * y, A * (3 * y * y - 3 * x * x), zero),
            (B * y * z, B * x * z, B * x * y),
            (zero, C * (1 - 5 * z * z), -10 * C * y * z),
            (zero, zero, D * (15 * z * z - 3)),
            (C * (1 - 5 * z * z), zero, -10 * C * x * z),
            (2 * E * x * z, -2 * E * y * z, E * (x * x - y * y)),
            (A * (3 * y * y - 3 * x * x), 6 * A * x * y, zero),
        ]
    basis = np.stack(comps, axis=1)
    if not jacobian:
        return basis
    J = np.stack([np.stack(j, axis=1) for j in jac], axis=1)
    return basis, J


DECODER_PARAMS = ("w1", "b1", "w2", "b2", "w3", "b3", "w4", "b4")


class FieldDecoder:
    """Density head ``feat -> (sigma_raw, geo)`` and color head ``(geo, SH(d)) -> rgb``."""

    def __init__(self, cfg: FieldConfig, in_dim, rng=None):
        self.cfg = cfg
        n_sh = sh_components(cfg.sh_degree)
        shapes = {
            "w1": (in_dim, cfg.hidden_width),
            "b1": (cfg.hidden_width,),
            "w2": (cfg.hidden_width, 1 + cfg.geo_features),
            "b2": (1 + cfg.geo_features,),
            "w3": (cfg.geo_features + n_sh, cfg.color_hidden_width),
            "b3": (cfg.color_hidden_width,),
            "w4": (cfg.color_hidden_width, 3),
            "b4": (3,),
        }
        self.params = {}
        for name, shape in shapes.items():
            if rng is not None and name.startswith("w"):
                lim = np.sqrt(6.0 / (shape[0] + shape[1]))
                self.params[name] = rng.uniform(-lim, lim, size=shape)
            else:
                self.params[name] = np.zeros(shape)

    def forward(self, feat, d, groups=None):
        """Decode features; ``d`` is per point, or per group when ``groups`` is given.

        ``groups`` holds the start offset of each run of consecutive points
        sharing one view direction (samples along a ray), so the direction
        encoding is evaluated once per run.
        """
        p = self.params
        G = self.cfg.geo_features
        z1 = feat @ p["w1"] + p["b1"]
        h1 = np.maximum(z1, 0.0)
        o = h1 @ p["w2"] + p["b2"]
        sigma = self.cfg.density_scale * np.logaddexp(0.0, o[:, 0])
        sh, sh_jac = sh_encode(d, self.cfg.sh_degree, jacobian=True)
        geo = o[:, 1 : 1 + G]
        z_dir = sh @ p["w3"][G:]
        if groups is not None:
            counts = np.diff(np.append(groups, len(feat)))
            z_dir = np.repeat(z_dir, counts, axis=0)
        z3 = geo @ p["w3"][:G] + z_dir + p["b3"]
        h3 = np.maximum(z3, 0.0)
        rgb = expit(h3 @ p["w4"] + p["b4"])
        cache = (feat, z1, h1, o, sh, sh_jac, z3, h3, rgb, groups)
        return sigma, rgb, cache

    def backward(self, cache, g_sigma, g_rgb, grads):
        """Accumulate into ``grads``; return (dLoss/dfeat, dLoss/dd) with ``d`` as passed."""
        feat, z1, h1, o, sh, sh_jac, z3, h3, rgb, groups = cache
        p = self.params
        G = self.cfg.geo_features
        g_z4 = g_rgb * rgb * (1.0 - rgb)
        grads["w4"] += h3.T @ g_z4
        grads["b4"] += g_z4.sum(axis=0)
        g_z3 = (g_z4 @ p["w4"].T) * (z3 > 0)
        grads["b3"] += g_z3.sum(axis=0)
        geo = o[:, 1 : 1 + G]
        grads["w3"][:G] += geo.T @ g_z3
        g_zdir = g_z3 if groups is None else np.add.reduceat(g_z3, groups, axis=0)
        grads["w3"][G:] += sh.T @ g_zdir
        g_sh = g_zdir @ p["w3"][G:].T
        g_d = np.einsum("nc,nck->nk", g_sh, sh_jac)
        g_o = np.empty_like(o)
        g_o[:, 0] = self.cfg.density_scale * g_sigma * expit(o[:, 0])
        g_o[:, 1:] = g_z3 @ p["w3"][:G].T
        grads["w2"] += h1.T @ g_o
        grads["b2"] += g_o.sum(axis=0)
        g_z1 = (g_o @ p["w2"].T) * (z1 > 0)
        grads["w1"] += feat.T @ g_z1
        grads["b1"] += g_z1.sum(axis=0)
        return g_z1 @ p["w1"].T, g_d


class RadianceField:
    """Grid encoder + decoder; the learnable scene representation."""

    def __init__(self, cfg: FieldConfig = FieldConfig(), seed=None, zero=False):
        self.cfg = cfg
        rng = None if zero else np.random.default_rng(seed)
        self.grid = MultiResGrid(cfg, rng)
        self.decoder = FieldDecoder(cfg, self.grid.output_dim, rng)

    @property
    def params(self):
        """Ordered parameter arrays (the checkpoint order)."""
        out = {"grid": self.grid.table}
        out.update(self.decoder.params)
        return out

    def set_params(self, params):
        self.grid.table = np.array(params["grid"], dtype=float).reshape(self.grid.table.shape)
        for name in DECODER_PARAMS:
            self.decoder.params[name] = np.array(params[name], dtype=float).reshape(
                self.decoder.params[name].shape
            )

    def zero_grads(self):
        return {k: np.zeros_like(v) for k, v in self.params.items()}

    def copy(self):
        other = RadianceField(self.cfg, zero=True)
        other.set_params({k: v.copy() for k, v in self.params.items()})
        return other

    def forward(self, x, d, groups=None):
        """Batched evaluation at in-bounds points; returns (sigma, rgb, cache).

        See :meth:`FieldDecoder.forward` for ``groups``.
        """
        xn = self.grid.normalize(x).reshape(-1, 3)
        feat = self.grid.encode_normalized(xn)
        sigma, rgb, dcache = self.decoder.forward(feat, np.asarray(d, dtype=float).reshape(-1, 3), groups)
        return sigma, rgb, (xn, dcache)

    def backward(self, cache, g_sigma, g_rgb, grads):
        """Accumulate parameter gradients; return (dLoss/dx, dLoss/dd)."""
        xn, dcache = cache
        g_feat, g_d = self.decoder.backward(dcache, g_sigma, g_rgb, grads)
        g_xn = self.grid.encode_normalized_backward(xn, g_feat, grads["grid"])
        return g_xn / (self.grid.hi - self.grid.lo), g_d


def field_eval(grid: MultiResGrid, decoder: FieldDecoder, x, d):
    """Density (per meter) and RGB at one point ``x`` seen along direction ``d``."""
    x = np.asarray(x, dtype=float).reshape(3)
    feat = grid.encode(x)[None, :]
    sigma, rgb, _ = decoder.forward(feat, np.asarray(d, dtype=float).reshape(1, 3))
    return float(sigma[0]), rgb[0]


def field_eval_backward(grid: MultiResGrid, decoder: FieldDecoder, x, d, adjoint_sigma, adjoint_rgb):
    """Parameter gradients and dLoss/dx for a single query; see :func:`field_eval`."""
    x = np.asarray(x, dtype=float).reshape(1, 3)
    if not np.all(grid.inside(x)):
        raise OutOfBounds("query outside scene bounds")
    xn = grid.normalize(x)
    feat = grid.encode_normalized(xn)
    _, _, cache = decoder.forward(feat, np.asarray(d, dtype=float).reshape(1, 3))
    grads = {"grid": np.zeros_like(grid.table)}
    grads.update({k: np.zeros_like(v) for k, v in decoder.params.items()})
    g_feat, _ = decoder.backward(cache, np.array([adjoint_sigma], float), np.asarray(adjoint_rgb, float).reshape(1, 3), grads)
    g_xn = grid.encode_normalized_backward(xn, g_feat, grads["grid"])
    return grads, (g_xn / (grid.hi - grid.lo))[0]
