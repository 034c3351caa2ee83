"""Estimator-style front end: ``fit`` a rig dataset, then query poses and renders."""

from __future__ import annotations

import logging

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .calibration import CalibrationState, SensorCalibration, sensor_poses
from .config import Config
from .metrics import metrics
from .optimizer import calibrate
from .renderer import PinholeIntrinsics, RayBatch, render_rays
from .validation import check_dataset, check_priors, scene_bounds

log = logging.getLogger(__name__)


class RigCalibrator(BaseEstimator):
    """Targetless spatiotemporal calibration of a camera/LiDAR rig.

    Parameters
    ----------
    config : Config or None
        Full configuration; ``None`` uses the library defaults.
    epochs, seed : int or None
        Overrides for the training schedule.
    freeze_spatial, freeze_temporal : bool
        Keep extrinsics (or clock offsets) at their priors.
    auto_bounds : bool
        Derive the scene box from the trajectory and LiDAR returns under the
        priors instead of the configured ``[field]`` bounds.
    """

    def __init__(self, config=None, epochs=None, seed=None, freeze_spatial=False, freeze_temporal=False,
                 auto_bounds=True, callback=None):
        self.config = config
        self.epochs = epochs
        self.seed = seed
        self.freeze_spatial = freeze_spatial
        self.freeze_temporal = freeze_temporal
        self.auto_bounds = auto_bounds
        self.callback = callback

    def _resolved_config(self, dataset, priors) -> Config:
        cfg = self.config if self.config is not None else Config()
        train = cfg.train
        if self.epochs is not None:
            train = train.replace(epochs=int(self.epochs))
        if self.seed is not None:
            train = train.replace(seed=int(self.seed))
        train = train.replace(
            optimize_spatial=train.optimize_spatial and not self.freeze_spatial,
            optimize_temporal=train.optimize_temporal and not self.freeze_temporal,
        )
        field = cfg.field
        if self.auto_bounds:
            lo, hi = scene_bounds(dataset, priors)
            field = field.replace(bounds_min=lo, bounds_max=hi)
        return cfg.replace(train=train, field=field)

    def fit(self, X, y=None):
        """Calibrate on dataset ``X`` starting from priors ``y`` (a CalibrationState).

        Without priors the calibration starts from identity extrinsics and
        zero offsets.
        """
        check_dataset(X)
        if y is None:
            y = CalibrationState(X.reference, {n: SensorCalibration.identity() for n in X.names})
        priors = check_priors(y, X)
        cfg = self._resolved_config(X, priors)
        result = calibrate(
            X, priors, cfg.train, cfg.field, cfg.render, cfg.loss.weights(), cfg.loss.patch(),
            callback=self.callback, depth_scale=cfg.loss.depth_scale or None,
        )
        self.config_ = cfg
        self.priors_ = priors
        self.calibration_ = result.calibration
        self.final_calibration_ = result.final_state
        self.history_ = result.history
        self.field_ = result.field
        self.reference_ = X.reference
        return self

    def transform(self, X):
        """World poses ``(R (N, 3, 3), p (N, 3))`` for every frame of every sensor."""
        check_is_fitted(self, "calibration_")
        out = {}
        for name, s in X.sensors.items():
            fp = sensor_poses(self.calibration_, X.track, name, s.timestamps)
            out[name] = (fp.Rw, fp.pw)
        return out

    def predict(self, X, track=None, intrinsics: PinholeIntrinsics = None, rng=None):
        """Render reference-camera views at reference-clock times ``X``.

        ``X`` may also be a list of ``(R, p)`` world poses. Returns ``(images
        (N, H, W, 3), depths (N, H, W))``.
        """
        check_is_fitted(self, "field_")
        if intrinsics is None:
            raise ValueError("predict needs camera intrinsics")
        rng = np.random.default_rng(0) if rng is None else rng
        poses = []
        for item in X:
            if np.isscalar(item):
                if track is None:
                    raise ValueError("time queries need the reference trajectory")
                pose = track.pose_at(float(item))
                poses.append((pose.R, pose.translation))
            else:
                poses.append(item)
        return render_views(self.field_, self.config_.render, poses, intrinsics, rng)

    def score(self, X, y=None):
        """Negative mean translation error (cm) against the dataset's ground truth."""
        check_is_fitted(self, "calibration_")
        gt = y if y is not None else X.gt
        if gt is None:
            raise ValueError("score needs ground truth")
        errs = metrics(self.calibration_, gt)
        return -float(np.mean([e.translation_cm[0] for e in errs.sensors.values()]))


def render_views(radiance_field, render_cfg, poses, intr: PinholeIntrinsics, rng, chunk=4096):
    """Render full images and depth maps for a list of ``(R, p)`` camera poses."""
    dirs_cam = intr.pixel_directions(intr.all_pixels())
    images, depths = [], []
    for R, p in poses:
        R = np.asarray(R, dtype=float)
        p = np.asarray(p, dtype=float)
        dirs = dirs_cam @ R.T
        color = np.empty((len(dirs), 3))
        depth = np.empty(len(dirs))
        for a in range(0, len(dirs), chunk):
            b = min(a + chunk, len(dirs))
            n = b - a
            rays = RayBatch(np.repeat(p[None], n, 0), dirs[a:b], np.full(n, render_cfg.near), np.full(n, render_cfg.far))
            out = render_rays(radiance_field, rays, render_cfg, rng)
            color[a:b] = out.color
            depth[a:b] = out.depth
        images.append(color.reshape(intr.height, intr.width, 3))
        depths.append(depth.reshape(intr.height, intr.width))
    return np.stack(images), np.stack(depths)
