"""Joint optimization of the scene field and the rig calibration.

Every non-reference sensor's world pose is ``track(t + delta) * extrinsic``,
so photometric, depth and patch losses back-propagate through the renderer
into the extrinsic rotation (6D), translation and clock offset. The field and
the calibration use separate Adam groups with exponentially decaying rates.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .calibration import CalibrationState, SensorCalibration, sensor_poses, sensor_pose_backward
from .errors import NonFiniteLoss, ShapeMismatch
from .field import RadianceField
from .geometry import Rot6D, chordal_quat_mean, matrix_to_quat, quat_to_matrix
from .losses import LossWeights, PatchSpec, color_loss, depth_loss, depth_smoothness_loss, dssim_loss, total_loss
from .renderer import RayBatch, RenderConfig, render_backward, render_rays

log = logging.getLogger(__name__)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass(frozen=True)
class TrainSchedule:
    epochs: int = 50
    lr_network: float = 1e-2
    lr_calib: float = 5e-5
    lr_final_factor: float = 1e-2
    weight_decay: float = 1e-6
    grid_weight_decay: Optional[float] = None  # None: same as weight_decay
    grid_decay_epochs: int = 5
    depth_loss_start_epoch: int = 2
    calib_warmup_epochs: int = 0  # calibration held at the priors while the field forms
    batch_rays: int = 1024
    rays_per_frame: int = 1024
    frame_stride: int = 1
    seed: int = 0
    optimize_spatial: bool = True
    optimize_temporal: bool = True
    average_last: int = 10

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not 0 < self.lr_final_factor <= 1:
            raise ValueError("lr_final_factor must be in (0, 1]")

    def replace(self, **kw):
        return replace(self, **kw)


def lr_at_epoch(schedule: TrainSchedule, epoch):
    """(network, calibration) learning rates; ``epoch`` may be fractional."""
    f = schedule.lr_final_factor ** (epoch / schedule.epochs)
    return schedule.lr_network * f, schedule.lr_calib * f


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


def adam_step(params, grads, state: AdamState, lr, weight_decay=0.0, lr_scale=None):
    """In-place Adam update with bias correction and decoupled weight decay.

    ``weight_decay`` is a scalar or a per-parameter dict; ``lr_scale`` an
    optional per-parameter multiplier (array or scalar) used to freeze entries.
    """
    state.step += 1
    b1t = 1.0 - ADAM_BETA1**state.step
    b2t = 1.0 - ADAM_BETA2**state.step
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeMismatch(f"gradient for {name!r} has shape {g.shape}, parameter {p.shape}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * g * g
        step_lr = lr if lr_scale is None else lr * lr_scale.get(name, 1.0)
        wd = weight_decay.get(name, 0.0) if isinstance(weight_decay, dict) else weight_decay
        if wd:
            p *= 1.0 - step_lr * wd
        p -= step_lr * (m / b1t) / (np.sqrt(v / b2t) + ADAM_EPS)
    return params


@dataclass
class RayBatchSpec:
    """Rays of one optimization step, grouped by supervision type."""

    sensor: np.ndarray  # (R,) index into the sensor list
    frame: np.ndarray  # (R,) frame index within the sensor
    dirs: np.ndarray  # (R, 3) sensor-frame unit directions
    is_camera: np.ndarray  # (R,) bool
    rgb: np.ndarray  # (R, 3) targets for camera rays
    depth: np.ndarray  # (R,) targets for LiDAR rays
    patches: np.ndarray  # (P, s*s) ray indices, row-major patches

    def __len__(self):
        return len(self.sensor)


@dataclass
class EpochReport:
    epoch: int
    losses: dict
    calibration: CalibrationState
    lr_network: float
    lr_calib: float
    n_batches: int
    seconds: float = 0.0


@dataclass
class CalibrationResult:
    calibration: CalibrationState
    history: list
    field: RadianceField
    final_state: CalibrationState


class _SensorData:
    """Flattened per-sensor training arrays."""

    def __init__(self, stream, frame_stride):
        self.name = stream.name
        self.kind = stream.kind
        keep = np.arange(0, len(stream), frame_stride)
        self.frames = keep
        self.timestamps = stream.timestamps[keep]
        if stream.kind == "camera":
            intr = stream.intrinsics
            self.intrinsics = intr
            self.pixel_dirs = intr.pixel_directions(intr.all_pixels())
            self.images = stream.images[keep].reshape(len(keep), -1, 3).astype(float) / 255.0
        else:
            self.scans = [stream.scans[i] for i in keep]


class JointModel:
    """Field + calibration parameters with a differentiable batch loss."""

    def __init__(self, dataset, radiance_field: RadianceField, priors: CalibrationState,
                 render_cfg: RenderConfig = RenderConfig(), weights: LossWeights = LossWeights(),
                 patch: PatchSpec = PatchSpec(), frame_stride=1, depth_scale=None):
        self.dataset = dataset
        self.field = radiance_field
        self.render_cfg = render_cfg
        self.weights = weights
        self.patch = patch
        self.reference = dataset.reference
        self.names = list(dataset.sensors)
        self.sensors = [_SensorData(dataset.sensors[n], frame_stride) for n in self.names]
        self.calib = {n: priors[n].vector().copy() for n in self.names if n != self.reference}
        # depth terms are measured in scene units (the largest box side)
        if depth_scale is None:
            depth_scale = float(np.max(radiance_field.grid.hi - radiance_field.grid.lo))
        self.depth_scale = depth_scale

    # -- calibration <-> vectors -----------------------------------------------------

    def calibration(self) -> CalibrationState:
        return CalibrationState(self.reference, {n: SensorCalibration.from_vector(v) for n, v in self.calib.items()})

    # -- sampling --------------------------------------------------------------------

    def sample_epoch(self, rng, rays_per_frame, batch_rays):
        """Shuffle one epoch of random rays and patches into batches."""
        units_single = []
        patch_units = []
        s = self.patch.size
        for si, sd in enumerate(self.sensors):
            for fi in range(len(sd.timestamps)):
                if sd.kind == "camera":
                    n_pix = sd.images.shape[1]
                    pix = rng.choice(n_pix, size=min(rays_per_frame, n_pix), replace=False)
                    units_single.append((si, fi, pix))
                    n_patch = rng.poisson(self.patch.per_frame) if self.patch.per_frame > 0 else 0
                    W, H = sd.intrinsics.width, sd.intrinsics.height
                    for _ in range(n_patch):
                        u0 = rng.integers(0, W - s + 1)
                        v0 = rng.integers(0, H - s + 1)
                        vv, uu = np.mgrid[v0 : v0 + s, u0 : u0 + s]
                        patch_units.append((si, fi, (vv * W + uu).ravel()))
                else:
                    n_ret = len(sd.scans[fi][1])
                    if n_ret == 0:
                        continue
                    idx = rng.choice(n_ret, size=min(rays_per_frame, n_ret), replace=False)
                    units_single.append((si, fi, idx))
        singles = np.concatenate(
            [np.stack([np.full(len(ix), si), np.full(len(ix), fi), ix], axis=1) for si, fi, ix in units_single]
        ) if units_single else np.zeros((0, 3), dtype=np.int64)
        singles = singles[rng.permutation(len(singles))]
        order = rng.permutation(len(patch_units))
        patch_units = [patch_units[i] for i in order]
        total = len(singles) + s * s * len(patch_units)
        n_batches = max(1, int(np.ceil(total / batch_rays)))
        single_chunks = np.array_split(singles, n_batches)
        batches = []
        for b in range(n_batches):
            mine = patch_units[b::n_batches]
            batches.append(self.make_batch(single_chunks[b], mine))
        return batches

    def make_batch(self, singles, patch_units):
        rows = [np.asarray(singles, dtype=np.int64).reshape(-1, 3)]
        patches = []
        offset = len(rows[0])
        for si, fi, ix in patch_units:
            rows.append(np.stack([np.full(len(ix), si), np.full(len(ix), fi), ix], axis=1))
            patches.append(np.arange(offset, offset + len(ix)))
            offset += len(ix)
        rows = np.concatenate(rows).astype(np.int64)
        R = len(rows)
        dirs = np.zeros((R, 3))
        rgb = np.zeros((R, 3))
        depth = np.zeros(R)
        is_cam = np.zeros(R, dtype=bool)
        for si, sd in enumerate(self.sensors):
            sel = np.flatnonzero(rows[:, 0] == si)
            if not len(sel):
                continue
            fi, ix = rows[sel, 1], rows[sel, 2]
            if sd.kind == "camera":
                is_cam[sel] = True
                dirs[sel] = sd.pixel_dirs[ix]
                rgb[sel] = sd.images[fi, ix]
            else:
                for f in np.unique(fi):
                    m = sel[fi == f]
                    d, r = sd.scans[f]
                    dirs[m] = d[rows[m, 2]]
                    depth[m] = r[rows[m, 2]]
        s2 = self.patch.size**2
        patches = np.array(patches, dtype=np.int64).reshape(-1, s2)
        return RayBatchSpec(rows[:, 0], rows[:, 1], dirs, is_cam, rgb, depth, patches)

    # -- forward / backward --------------------------------------------------------------

    def _poses(self, batch):
        """World rotation/position per ray plus per-sensor frame bookkeeping."""
        R = len(batch)
        Rw = np.zeros((R, 3, 3))
        pw = np.zeros((R, 3))
        groups = []
        calib = self.calibration()
        for si, sd in enumerate(self.sensors):
            sel = np.flatnonzero(batch.sensor == si)
            if not len(sel):
                continue
            frames, inverse = np.unique(batch.frame[sel], return_inverse=True)
            fp = sensor_poses(calib, self.dataset.track, sd.name, sd.timestamps[frames])
            Rw[sel] = fp.Rw[inverse]
            pw[sel] = fp.pw[inverse]
            groups.append((sd.name, sel, inverse, len(frames), fp))
        return Rw, pw, groups, calib

    def loss_and_grads(self, batch: RayBatchSpec, rng, epoch=None, t_samples=None, need_grad=True):
        """Total loss, named parts, field gradients and calibration gradients."""
        w = self.weights
        if epoch is not None and epoch < self._depth_start:
            w = replace(w, lambda_d=0.0)
        Rw, pw, groups, calib = self._poses(batch)
        dirs_w = np.einsum("rij,rj->ri", Rw, batch.dirs)
        near = np.full(len(batch), self.render_cfg.near)
        far = np.full(len(batch), self.render_cfg.far)
        rays = RayBatch(pw, dirs_w, near, far)
        out = render_rays(self.field, rays, self.render_cfg, rng, t_samples=t_samples)

        parts = {}
        g_color = np.zeros((len(batch), 3))
        g_depth = np.zeros(len(batch))
        cam = np.flatnonzero(batch.is_camera)
        lid = np.flatnonzero(~batch.is_camera)
        if len(cam) and w.lambda_c > 0:
            parts["c"], g = color_loss(out.color[cam], batch.rgb[cam])
            g_color[cam] += w.lambda_c * g
        if len(lid) and w.lambda_d > 0:
            k = 1.0 / self.depth_scale
            parts["d"], g = depth_loss(out.depth[lid] * k, batch.depth[lid] * k)
            g_depth[lid] += w.lambda_d * k * g
        if len(batch.patches):
            s = self.patch.size
            P = len(batch.patches)
            if w.lambda_ssim > 0:
                pred = out.color[batch.patches].reshape(P, s, s, 3)
                gt = batch.rgb[batch.patches].reshape(P, s, s, 3)
                parts["ssim"], g = dssim_loss(pred, gt)
                np.add.at(g_color, batch.patches.ravel(), w.lambda_ssim * g.reshape(-1, 3))
            if w.lambda_ds > 0:
                k = 1.0 / self.depth_scale
                parts["ds"], g = depth_smoothness_loss(out.depth[batch.patches].reshape(P, s, s) * k)
                np.add.at(g_depth, batch.patches.ravel(), w.lambda_ds * k * g.ravel())
        total = total_loss(parts, w)
        if not need_grad:
            return total, parts, None, None

        grads = self.field.zero_grads()
        g_o, g_d = render_backward(self.field, out, g_color, g_depth, None, grads)
        calib_grads = {n: np.zeros(10) for n in self.calib}
        for name, sel, inverse, n_frames, fp in groups:
            if name == self.reference:
                continue
            g_pw = np.zeros((n_frames, 3))
            np.add.at(g_pw, inverse, g_o[sel])
            g_Rw = np.zeros((n_frames, 3, 3))
            np.add.at(g_Rw, inverse, g_d[sel][:, :, None] * batch.dirs[sel][:, None, :])
            calib_grads[name] += sensor_pose_backward(calib, fp, g_Rw, g_pw)
        return total, parts, grads, calib_grads

    _depth_start = 0


def _calib_lr_scale(schedule: TrainSchedule):
    scale = np.ones(10)
    if not schedule.optimize_spatial:
        scale[:9] = 0.0
    if not schedule.optimize_temporal:
        scale[9] = 0.0
    return scale


class Trainer:
    """Holds the optimizer state across epochs."""

    def __init__(self, model: JointModel, schedule: TrainSchedule):
        self.model = model
        self.schedule = schedule
        self.adam_field = AdamState()
        self.adam_calib = AdamState()
        model._depth_start = schedule.depth_loss_start_epoch

    def train_epoch(self, epoch) -> EpochReport:
        sch = self.schedule
        model = self.model
        rng = np.random.default_rng([sch.seed, epoch])
        t0 = time.perf_counter()
        batches = model.sample_epoch(rng, sch.rays_per_frame, sch.batch_rays)
        sums = {}
        counts = {}
        grid_wd = sch.weight_decay if sch.grid_weight_decay is None else sch.grid_weight_decay
        wd = {name: sch.weight_decay for name in model.field.params}
        wd["grid"] = grid_wd if epoch < sch.grid_decay_epochs else 0.0
        cal_scale = _calib_lr_scale(sch)
        lr_net = lr_cal = None
        for b, batch in enumerate(batches):
            lr_net, lr_cal = lr_at_epoch(sch, epoch + b / len(batches))
            try:
                total, parts, grads, cgrads = model.loss_and_grads(batch, rng, epoch=epoch)
            except NonFiniteLoss as exc:
                exc.diagnostics.update(epoch=epoch, batch=b, calibration=model.calibration())
                raise
            for k, v in parts.items():
                sums[k] = sums.get(k, 0.0) + v
                counts[k] = counts.get(k, 0) + 1
            sums["total"] = sums.get("total", 0.0) + total
            counts["total"] = counts.get("total", 0) + 1
            adam_step(model.field.params, grads, self.adam_field, lr_net, wd)
            if model.calib and cal_scale.any() and epoch >= sch.calib_warmup_epochs:
                adam_step(model.calib, cgrads, self.adam_calib, lr_cal,
                          lr_scale={n: cal_scale for n in model.calib})
            # the grid table may have been rebound by set_params; keep views in sync
        losses = {k: sums[k] / counts[k] for k in sums}
        for k in ("c", "d", "ssim", "ds"):
            losses.setdefault(k, 0.0)
        report = EpochReport(epoch, losses, model.calibration(), lr_net, lr_cal, len(batches),
                             time.perf_counter() - t0)
        log.info("epoch %d loss %.5f (%.1fs)", epoch, losses["total"], report.seconds)
        return report


def average_calibrations(states) -> CalibrationState:
    """Per-parameter mean: translations and offsets averaged, rotations by chordal mean."""
    states = list(states)
    ref = states[0]
    out = {}
    for name in ref.calibrated:
        quats = np.array([matrix_to_quat(s[name].R) for s in states])
        q = chordal_quat_mean(quats)
        t = np.mean([s[name].translation for s in states], axis=0)
        d = float(np.mean([s[name].delta for s in states]))
        out[name] = SensorCalibration(Rot6D.from_matrix(quat_to_matrix(q)), t, d)
    return CalibrationState(ref.reference, out)


def calibrate(dataset, priors: CalibrationState, schedule: TrainSchedule = TrainSchedule(),
              field_cfg=None, render_cfg: RenderConfig = RenderConfig(), weights: LossWeights = LossWeights(),
              patch: PatchSpec = PatchSpec(), callback=None, depth_scale=None) -> CalibrationResult:
    """Run all epochs; the result averages the last ``average_last`` epoch snapshots."""
    from .field import FieldConfig

    radiance_field = RadianceField(field_cfg or FieldConfig(), seed=schedule.seed)
    model = JointModel(dataset, radiance_field, priors, render_cfg, weights, patch, schedule.frame_stride, depth_scale)
    trainer = Trainer(model, schedule)
    history = []
    for epoch in range(schedule.epochs):
        report = trainer.train_epoch(epoch)
        history.append(report)
        if callback is not None:
            callback(report)
    tail = [r.calibration for r in history[-schedule.average_last :]]
    return CalibrationResult(average_calibrations(tail), history, radiance_field, model.calibration())
