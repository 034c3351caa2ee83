"""Calibration error metrics, history CSV and reports (text table, SVG plot)."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .calibration import CalibrationState, SensorCalibration
from .errors import MissingFile, ParseError, SensorSetMismatch
from .geometry import Rot6D, matrix_to_quat, quat_to_matrix, rotation_geodesic_deg

HISTORY_COLUMNS = ("epoch", "sensor", "tx", "ty", "tz", "qw", "qx", "qy", "qz", "delta",
                   "loss_c", "loss_d", "loss_ssim", "loss_ds")


@dataclass(frozen=True)
class SensorErrors:
    """Each field is ``(mean, std)``; std is the population std over epochs."""

    translation_cm: tuple
    rotation_deg: tuple
    temporal_ms: tuple


@dataclass(frozen=True)
class CalibrationErrors:
    sensors: dict  # name -> SensorErrors

    def __getitem__(self, name):
        return self.sensors[name]

    def as_rows(self):
        return [
            (n, *e.translation_cm, *e.rotation_deg, *e.temporal_ms) for n, e in self.sensors.items()
        ]


def sensor_errors(est: SensorCalibration, gt: SensorCalibration):
    """``(cm, degrees, ms)`` for one sensor."""
    t = 100.0 * float(np.linalg.norm(np.asarray(est.translation) - np.asarray(gt.translation)))
    r = rotation_geodesic_deg(est.R, gt.R)
    d = 1000.0 * abs(est.delta - gt.delta)
    return t, r, d


def _check_sets(est: CalibrationState, gt: CalibrationState):
    if set(est.calibrated) != set(gt.calibrated) or est.reference != gt.reference:
        raise SensorSetMismatch(
            f"sensor sets differ: {sorted(est.names)} (ref {est.reference}) vs {sorted(gt.names)} (ref {gt.reference})"
        )


def metrics(est: CalibrationState, gt: CalibrationState) -> CalibrationErrors:
    """Errors of one calibration against ground truth (std is zero)."""
    _check_sets(est, gt)
    out = {}
    for name in gt.calibrated:
        t, r, d = sensor_errors(est[name], gt[name])
        out[name] = SensorErrors((t, 0.0), (r, 0.0), (d, 0.0))
    return CalibrationErrors(out)


def history_errors(states, gt: CalibrationState, last=10) -> CalibrationErrors:
    """Mean and population std of per-epoch errors over the last ``last`` states."""
    states = list(states)[-last:]
    if not states:
        raise ValueError("empty history")
    out = {}
    for name in gt.calibrated:
        errs = []
        for s in states:
            _check_sets(s, gt)
            errs.append(sensor_errors(s[name], gt[name]))
        e = np.array(errs)
        mean, std = e.mean(axis=0), e.std(axis=0)
        out[name] = SensorErrors(*((float(m), float(s)) for m, s in zip(mean, std)))
    return CalibrationErrors(out)


def pm(mean, std, digits=1):
    return f"{mean:.{digits}f}±{std:.{digits}f}"


# -- history CSV ---------------------------------------------------------------------


def _g(x):
    return format(float(x), ".17g")


def history_rows(history):
    """One row per (epoch, calibrated sensor) from a list of epoch reports."""
    rows = []
    for rep in history:
        cal = rep.calibration
        for name in cal.calibrated:
            c = cal[name]
            q = matrix_to_quat(c.R)
            rows.append(
                [rep.epoch, name, *c.translation, *q, c.delta]
                + [rep.losses.get(k, 0.0) for k in ("c", "d", "ssim", "ds")]
            )
    return rows


def history_to_csv(history) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(HISTORY_COLUMNS)
    for row in history_rows(history):
        w.writerow([row[0], row[1]] + [_g(v) for v in row[2:]])
    return buf.getvalue()


def write_history(path, history):
    Path(path).write_text(history_to_csv(history))


@dataclass
class HistoryEntry:
    """A parsed history row group: the calibration and losses of one epoch."""

    epoch: int
    calibration: CalibrationState
    losses: dict


def read_history(path, reference) -> list:
    """Parse a history CSV back into per-epoch :class:`HistoryEntry` objects."""
    path = Path(path)
    if not path.exists():
        raise MissingFile(f"history file {path} not found")
    epochs = {}
    losses = {}
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if tuple(header or ()) != HISTORY_COLUMNS:
            raise ParseError(path, 1, "unexpected history header")
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(HISTORY_COLUMNS):
                raise ParseError(path, lineno, f"expected {len(HISTORY_COLUMNS)} fields")
            try:
                epoch = int(row[0])
                vals = [float(v) for v in row[2:]]
            except ValueError as exc:
                raise ParseError(path, lineno, str(exc)) from None
            t, q, d = np.array(vals[0:3]), np.array(vals[3:7]), vals[7]
            cal = SensorCalibration(Rot6D.from_matrix(quat_to_matrix(q)), t, d)
            epochs.setdefault(epoch, {})[row[1]] = cal
            losses[epoch] = dict(zip(("c", "d", "ssim", "ds"), vals[8:12]))
    return [HistoryEntry(e, CalibrationState(reference, epochs[e]), losses[e]) for e in sorted(epochs)]


# -- reports ---------------------------------------------------------------------------


def report_table(history, gt: CalibrationState = None, last=10) -> str:
    """Per-sensor mean±std over the last epochs; error columns only with ground truth."""
    if not history:
        raise ValueError("empty history")
    states = [h.calibration for h in history][-last:]
    lines = []
    if gt is not None:
        errs = history_errors(states, gt, last)
        lines.append(f"{'sensor':<12} {'t err [cm]':>14} {'R err [deg]':>14} {'delta err [ms]':>15}")
        for name, e in errs.sensors.items():
            lines.append(
                f"{name:<12} {pm(*e.translation_cm, 1):>14} {pm(*e.rotation_deg, 2):>14} {pm(*e.temporal_ms, 1):>15}"
            )
    else:
        lines.append(f"{'sensor':<12} {'tx [m]':>16} {'ty [m]':>16} {'tz [m]':>16} {'delta [ms]':>14}")
        for name in states[0].calibrated:
            t = np.array([s[name].translation for s in states])
            d = 1000.0 * np.array([s[name].delta for s in states])
            cols = [pm(t[:, k].mean(), t[:, k].std(), 4) for k in range(3)]
            lines.append(f"{name:<12} {cols[0]:>16} {cols[1]:>16} {cols[2]:>16} {pm(d.mean(), d.std(), 1):>14}")
    return "\n".join(lines) + "\n"


def _polyline(xs, ys, x0, y0, w, h, color, log_y=False):
    ys = np.asarray(ys, dtype=float)
    if log_y:
        ys = np.log10(np.maximum(ys, 1e-12))
    lo, hi = float(ys.min()), float(ys.max())
    span = hi - lo if hi > lo else 1.0
    xs = np.asarray(xs, dtype=float)
    xspan = xs.max() - xs.min() if len(xs) > 1 else 1.0
    px = x0 + (xs - xs.min()) / xspan * w
    py = y0 + h - (ys - lo) / span * h
    pts = " ".join(f"{a:.1f},{b:.1f}" for a, b in zip(px, py))
    return f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{pts}"/>'


_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def report_svg(history, gt: CalibrationState = None) -> str:
    """Self-contained SVG: total loss (log scale) and, with ground truth, per-sensor errors."""
    epochs = [h.epoch for h in history]
    w, h, pad = 360, 200, 40
    panels = ["loss"] + (["cm", "deg", "ms"] if gt is not None else [])
    width = pad + len(panels) * (w + pad)
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{h + 2 * pad}" font-family="sans-serif" font-size="11">']
    out.append(f'<rect width="{width}" height="{h + 2 * pad}" fill="white"/>')
    for k, panel in enumerate(panels):
        x0 = pad + k * (w + pad)
        out.append(f'<rect x="{x0}" y="{pad}" width="{w}" height="{h}" fill="none" stroke="#888"/>')
        if panel == "loss":
            out.append(f'<text x="{x0}" y="{pad - 8}">loss parts (log10)</text>')
            for j, key in enumerate(("c", "d", "ssim", "ds")):
                ys = [hh.losses.get(key, 0.0) for hh in history]
                if max(ys) > 0:
                    out.append(_polyline(epochs, ys, x0, pad, w, h, _COLORS[j], log_y=True))
                    out.append(f'<text x="{x0 + 6}" y="{pad + 14 + 13 * j}" fill="{_COLORS[j]}">{key}</text>')
        else:
            idx = {"cm": 0, "deg": 1, "ms": 2}[panel]
            out.append(f'<text x="{x0}" y="{pad - 8}">error [{panel}] per epoch</text>')
            for j, name in enumerate(gt.calibrated):
                ys = [sensor_errors(hh.calibration[name], gt[name])[idx] for hh in history]
                out.append(_polyline(epochs, ys, x0, pad, w, h, _COLORS[j % len(_COLORS)]))
                out.append(f'<text x="{x0 + 6}" y="{pad + 14 + 13 * j}" fill="{_COLORS[j % len(_COLORS)]}">{name}</text>')
        out.append(f'<text x="{x0}" y="{pad + h + 14}">epoch {epochs[0]}</text>')
        out.append(f'<text x="{x0 + w - 50}" y="{pad + h + 14}">epoch {epochs[-1]}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
