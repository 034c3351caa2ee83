"""Command-line entry point: ``stcalib {simulate,calibrate,evaluate,render,gradcheck}``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import errors
from .calibration import read_calibration, write_calibration
from .config import Config, load_config, save_config
from .dataset import load_checkpoint, load_dataset, save_checkpoint, save_dataset, write_pfm, write_ppm
from .geometry import quat_to_matrix
from .metrics import history_to_csv, metrics, read_history, report_svg, report_table
from .renderer import PinholeIntrinsics
from .trajectory import read_trajectory

log = logging.getLogger("stcalib")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

DATA_ERRORS = (
    errors.ParseError, errors.MissingFile, errors.SensorSetMismatch, errors.ShapeMismatch,
    errors.DuplicateTimestamp, errors.NonUnitDirection, errors.EmptyBatch, errors.UnknownSensor,
    errors.TooFewKnots, errors.OutOfBounds, errors.PixelOutOfBounds, errors.PatchTooSmall, OSError,
)
NUMERIC_ERRORS = (errors.NonFiniteLoss, FloatingPointError, errors.DegenerateRotation)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage; our contract reserves 2 for data errors
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _config(path):
    return load_config(path) if path else Config()


# -- simulate -----------------------------------------------------------------------


def cmd_simulate(args):
    from .rig_sim import simulate_from_config

    cfg = _config(args.config)
    ds, priors = simulate_from_config(cfg.simulate, seed=args.seed)
    out = Path(args.out)
    save_dataset(out, ds, blind=args.blind)
    write_calibration(out / "priors.txt", priors)
    save_config(out / "config.txt", cfg)
    print(f"wrote {out} ({sum(len(s) for s in ds.sensors.values())} frames, priors in {out / 'priors.txt'})")
    return EXIT_OK


# -- calibrate ----------------------------------------------------------------------


def cmd_calibrate(args):
    from .estimator import RigCalibrator

    if args.freeze_spatial and args.freeze_temporal:
        raise UsageError("--freeze-spatial and --freeze-temporal are mutually exclusive")
    cfg = _config(args.config)
    ds = load_dataset(args.data)
    priors = read_calibration(args.priors) if args.priors else None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    def progress(rep):
        parts = " ".join(f"{k}={v:.4g}" for k, v in rep.losses.items())
        print(f"epoch {rep.epoch:3d}  {parts}  ({rep.seconds:.1f}s)", flush=True)

    est = RigCalibrator(cfg, epochs=args.epochs, seed=args.seed, freeze_spatial=args.freeze_spatial,
                        freeze_temporal=args.freeze_temporal, callback=None if args.quiet else progress)
    est.fit(ds, priors)
    write_calibration(out / "calibration.txt", est.calibration_)
    write_calibration(out / "calibration_last_epoch.txt", est.final_calibration_)
    (out / "history.csv").write_text(history_to_csv(est.history_))
    save_config(out / "config.txt", est.config_)
    ref = ds.sensors[ds.reference]
    extra = {
        "camera.fx": ref.intrinsics.fx, "camera.fy": ref.intrinsics.fy, "camera.cx": ref.intrinsics.cx,
        "camera.cy": ref.intrinsics.cy, "camera.width": ref.intrinsics.width, "camera.height": ref.intrinsics.height,
        "trajectory": str((Path(args.data) / "trajectory.txt").resolve()),
    }
    save_checkpoint(out / "field.ckpt", est.field_, est.config_.render, extra)
    table = report_table(est.history_, ds.gt, est.config_.train.average_last)
    (out / "report.txt").write_text(table)
    (out / "report.svg").write_text(report_svg(est.history_, ds.gt))
    print(table, end="")
    print(f"results in {out}")
    return EXIT_OK


# -- evaluate -----------------------------------------------------------------------


def cmd_evaluate(args):
    gt = read_calibration(args.gt)
    result = Path(args.result)
    if result.is_dir():
        history = read_history(result / "history.csv", gt.reference)
        table = report_table(history, gt, args.last)
        errs = metrics(read_calibration(result / "calibration.txt"), gt)
    else:
        table = None
        errs = metrics(read_calibration(result), gt)
    lines = ["sensor,translation_cm,rotation_deg,temporal_ms"]
    for name, e in errs.sensors.items():
        lines.append(f"{name},{e.translation_cm[0]!r},{e.rotation_deg[0]!r},{e.temporal_ms[0]!r}")
    if table is not None:
        print(f"per-epoch errors, last {args.last} epochs (mean±std):")
        print(table, end="")
        (result / "errors.csv").write_text("\n".join(lines) + "\n")
    print("averaged calibration:")
    for name, e in errs.sensors.items():
        print(f"  {name:<10} {e.translation_cm[0]:8.2f} cm {e.rotation_deg[0]:8.3f} deg {e.temporal_ms[0]:8.2f} ms")
    return EXIT_OK


# -- render -------------------------------------------------------------------------


def parse_pose(spec):
    """``"t"`` (seconds on the reference clock) or ``"qw,qx,qy,qz,tx,ty,tz"``."""
    parts = [p for p in spec.replace(",", " ").split() if p]
    try:
        vals = [float(p) for p in parts]
    except ValueError:
        raise UsageError(f"bad pose spec {spec!r}") from None
    if len(vals) == 1:
        return vals[0]
    if len(vals) == 7:
        q = np.array(vals[:4])
        if np.linalg.norm(q) == 0:
            raise UsageError("pose quaternion must be non-zero")
        return quat_to_matrix(q / np.linalg.norm(q)), np.array(vals[4:])
    raise UsageError(f"pose spec needs 1 or 7 numbers, got {len(vals)}")


def cmd_render(args):
    from .estimator import render_views

    pose = parse_pose(args.pose)
    rf, rcfg, header = load_checkpoint(args.checkpoint)
    try:
        intr = PinholeIntrinsics(*(float(header[f"camera.{k}"]) for k in ("fx", "fy", "cx", "cy")),
                                 int(header["camera.width"]), int(header["camera.height"]))
    except KeyError as exc:
        raise errors.ParseError(args.checkpoint, None, f"checkpoint lacks camera intrinsics ({exc})") from None
    if np.isscalar(pose):
        traj = Path(args.data) / "trajectory.txt" if args.data else header.get("trajectory")
        if not traj:
            raise UsageError("time poses need --data (no trajectory recorded in the checkpoint)")
        p = read_trajectory(traj).pose_at(float(pose))
        pose = (p.R, p.translation)
    if args.samples:
        from dataclasses import replace

        rcfg = replace(rcfg, n_samples=args.samples)
    images, depths = render_views(rf, rcfg, [pose], intr, np.random.default_rng(args.seed))
    out = Path(args.out)
    stem = out.with_suffix("") if out.suffix.lower() in (".ppm", ".pfm") else out
    write_ppm(stem.with_suffix(".ppm"), np.round(np.clip(images[0], 0, 1) * 255).astype(np.uint8))
    write_pfm(stem.with_suffix(".pfm"), depths[0])
    print(f"wrote {stem.with_suffix('.ppm')} and {stem.with_suffix('.pfm')}")
    return EXIT_OK


# -- gradcheck ----------------------------------------------------------------------


def cmd_gradcheck(args):
    from .gradcheck import run_suites

    checks, seconds = run_suites(args.module)
    for c in checks:
        print(c.line())
    failed = [c for c in checks if not c.passed]
    print(f"{len(checks) - len(failed)}/{len(checks)} checks passed in {seconds:.1f}s")
    return EXIT_NUMERIC if failed else EXIT_OK


def build_parser():
    p = _Parser(prog="stcalib", description="Targetless spatiotemporal camera/LiDAR calibration.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress at INFO level")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("simulate", help="build a synthetic dataset, ground truth and perturbed priors")
    s.add_argument("--config", help="config file (defaults when omitted)")
    s.add_argument("--out", required=True, help="output dataset directory")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--blind", action="store_true", help="omit the ground-truth calibration file")
    s.set_defaults(func=cmd_simulate)

    c = sub.add_parser("calibrate", help="jointly fit the scene field and the calibration")
    c.add_argument("--data", required=True, help="dataset directory")
    c.add_argument("--priors", help="initial calibration file (identity when omitted)")
    c.add_argument("--config", help="config file (defaults when omitted)")
    c.add_argument("--out", required=True, help="result directory")
    c.add_argument("--seed", type=int)
    c.add_argument("--epochs", type=int)
    c.add_argument("--freeze-spatial", action="store_true", help="keep extrinsics at the priors")
    c.add_argument("--freeze-temporal", action="store_true", help="keep clock offsets at the priors")
    c.add_argument("--quiet", action="store_true", help="no per-epoch progress lines")
    c.set_defaults(func=cmd_calibrate)

    e = sub.add_parser("evaluate", help="errors of a result against ground truth")
    e.add_argument("--result", required=True, help="result directory or calibration file")
    e.add_argument("--gt", required=True, help="ground-truth calibration file")
    e.add_argument("--last", type=int, default=10, help="epochs averaged in the table")
    e.set_defaults(func=cmd_evaluate)

    r = sub.add_parser("render", help="novel view (PPM) and depth map (PFM) from a checkpoint")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--pose", required=True, help='reference time "t" or "qw,qx,qy,qz,tx,ty,tz"')
    r.add_argument("--out", required=True, help="output path; .ppm and .pfm are written side by side")
    r.add_argument("--data", help="dataset whose trajectory resolves time poses")
    r.add_argument("--samples", type=int, help="samples per ray (checkpoint setting by default)")
    r.add_argument("--seed", type=int, default=0)
    r.set_defaults(func=cmd_render)

    g = sub.add_parser("gradcheck", help="finite-difference checks of all adjoints")
    g.add_argument("--module", nargs="+", default=["all"], choices=["all", "field", "render", "losses", "calib"])
    g.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"stcalib: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NUMERIC_ERRORS as exc:
        print(f"stcalib: numerical failure: {exc}", file=sys.stderr)
        for k, v in getattr(exc, "diagnostics", {}).items():
            print(f"  {k}: {v}", file=sys.stderr)
        return EXIT_NUMERIC
    except DATA_ERRORS as exc:
        print(f"stcalib: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
