"""Rig datasets on disk and in memory, plus field checkpoints.

Layout of a dataset directory::

    manifest.txt        INI sections: [dataset] and one [sensor <name>] each
    trajectory.txt      reference trajectory (``t qw qx qy qz tx ty tz``)
    <cam>/<frame>.ppm   binary P6 8-bit image
    <cam>/<frame>.t     timestamp on the sensor clock, seconds
    <lidar>/<frame>.xyz lines ``dx dy dz range`` in the sensor frame
    <lidar>/<frame>.t
    gt_calib.txt        ground truth calibration (omitted in blind mode)
"""

from __future__ import annotations

import configparser
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .calibration import CalibrationState, read_calibration, write_calibration
from .errors import MissingFile, ParseError
from .field import FieldConfig, RadianceField
from .renderer import PinholeIntrinsics, RenderConfig
from .trajectory import TimedPoseTrack, read_trajectory, write_trajectory


@dataclass(eq=False)
class SensorStream:
    name: str
    kind: str
    timestamps: np.ndarray
    intrinsics: Optional[PinholeIntrinsics] = None
    images: Optional[np.ndarray] = None  # (N, H, W, 3) uint8
    scans: list = field(default_factory=list)  # [(dirs (M, 3), ranges (M,))]
    rate: float = 0.0
    lidar_max_range: float = 0.0

    def __len__(self):
        return len(self.timestamps)

    def image_float(self, i):
        return self.images[i].astype(float) / 255.0


@dataclass(eq=False)
class RigDataset:
    reference: str
    track: TimedPoseTrack
    sensors: dict
    gt: Optional[CalibrationState] = None

    @property
    def names(self):
        return list(self.sensors)

    def cameras(self):
        return [s for s in self.sensors.values() if s.kind == "camera"]

    def lidars(self):
        return [s for s in self.sensors.values() if s.kind == "lidar"]

    def same_content(self, other) -> bool:
        """Exact equality of everything stored on disk."""
        if self.reference != other.reference or self.names != other.names:
            return False
        tr, to = self.track, other.track
        if not (np.array_equal(tr.times, to.times) and np.array_equal(tr.quats, to.quats)
                and np.array_equal(tr.translations, to.translations)):
            return False
        for name in self.names:
            a, b = self.sensors[name], other.sensors[name]
            if a.kind != b.kind or not np.array_equal(a.timestamps, b.timestamps):
                return False
            if a.kind == "camera":
                if a.intrinsics != b.intrinsics or not np.array_equal(a.images, b.images):
                    return False
            else:
                if len(a.scans) != len(b.scans):
                    return False
                for (da, ra), (db, rb) in zip(a.scans, b.scans):
                    if not (np.array_equal(da, db) and np.array_equal(ra, rb)):
                        return False
        if (self.gt is None) != (other.gt is None):
            return False
        return self.gt is None or self.gt.equals(other.gt)


# -- PPM -----------------------------------------------------------------------------


def write_ppm(path, image):
    img = np.asarray(image)
    if img.dtype != np.uint8:
        raise TypeError("PPM writer expects uint8 RGB")
    h, w, _ = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(img).tobytes())


def read_ppm(path):
    path = Path(path)
    if not path.exists():
        raise MissingFile(f"image {path} not found")
    data = path.read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ParseError(path, None, "truncated PPM header")
        tokens.append(data[start:pos])
    pos += 1
    if tokens[0] != b"P6":
        raise ParseError(path, 1, f"not a binary PPM (magic {tokens[0]!r})")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise ParseError(path, None, "bad PPM header") from None
    if maxval != 255:
        raise ParseError(path, None, "only 8-bit PPM is supported")
    pixels = data[pos:]
    if len(pixels) < w * h * 3:
        raise ParseError(path, None, f"truncated PPM: {len(pixels)} of {w * h * 3} bytes")
    return np.frombuffer(pixels[: w * h * 3], dtype=np.uint8).reshape(h, w, 3).copy()


def write_pfm(path, image):
    """Little-endian PFM (``Pf`` grayscale or ``PF`` color), bottom row first."""
    img = np.asarray(image, dtype="<f4")
    color = img.ndim == 3
    h, w = img.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"{'PF' if color else 'Pf'}\n{w} {h}\n-1.0\n".encode("ascii"))
        fh.write(np.ascontiguousarray(img[::-1]).tobytes())


# -- dataset files -------------------------------------------------------------------


def _fmt(x):
    return format(float(x), ".17g")


def _frame_stem(i):
    return f"{i:06d}"


def save_dataset(directory, ds: RigDataset, blind=False):
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    write_trajectory(root / "trajectory.txt", ds.track)
    lines = ["[dataset]", f"reference = {ds.reference}", "trajectory = trajectory.txt",
             "sensors = " + ", ".join(ds.names), ""]
    for name, s in ds.sensors.items():
        sub = root / name
        sub.mkdir(exist_ok=True)
        stems = []
        for i, t in enumerate(s.timestamps):
            stem = _frame_stem(i)
            stems.append(f"{name}/{stem}")
            (sub / f"{stem}.t").write_text(_fmt(t) + "\n")
            if s.kind == "camera":
                write_ppm(sub / f"{stem}.ppm", s.images[i])
            else:
                dirs, ranges = s.scans[i]
                rows = [" ".join(_fmt(v) for v in (*d, r)) for d, r in zip(dirs, ranges)]
                (sub / f"{stem}.xyz").write_text("\n".join(rows) + ("\n" if rows else ""))
        lines.append(f"[sensor {name}]")
        lines.append(f"kind = {s.kind}")
        lines.append(f"rate = {_fmt(s.rate)}")
        if s.kind == "camera":
            k = s.intrinsics
            lines += [f"fx = {_fmt(k.fx)}", f"fy = {_fmt(k.fy)}", f"cx = {_fmt(k.cx)}", f"cy = {_fmt(k.cy)}",
                      f"width = {k.width}", f"height = {k.height}"]
        else:
            lines.append(f"max_range = {_fmt(s.lidar_max_range)}")
        lines.append("files =")
        lines.extend(f"    {stem}" for stem in stems)
        lines.append("")
    (root / "manifest.txt").write_text("\n".join(lines))
    if ds.gt is not None and not blind:
        write_calibration(root / "gt_calib.txt", ds.gt)
    return root


def _read_timestamp(path):
    if not path.exists():
        raise MissingFile(f"timestamp file {path} not found")
    text = path.read_text().strip()
    try:
        return float(text)
    except ValueError:
        raise ParseError(path, 1, f"bad timestamp {text!r}") from None


def _read_xyz(path):
    if not path.exists():
        raise MissingFile(f"scan file {path} not found")
    rows = []
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 4:
            raise ParseError(path, lineno, f"expected 'dx dy dz range', got {len(parts)} fields")
        try:
            rows.append([float(p) for p in parts])
        except ValueError as exc:
            raise ParseError(path, lineno, str(exc)) from None
    arr = np.array(rows, dtype=float).reshape(-1, 4)
    return arr[:, :3].copy(), arr[:, 3].copy()


def load_dataset(directory) -> RigDataset:
    root = Path(directory)
    manifest = root / "manifest.txt"
    if not manifest.exists():
        raise MissingFile(f"{manifest} not found")
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string(manifest.read_text(), source=str(manifest))
        head = cp["dataset"]
        reference = head["reference"].strip()
        names = [n.strip() for n in head["sensors"].split(",") if n.strip()]
        traj_path = root / head.get("trajectory", "trajectory.txt").strip()
    except configparser.Error as exc:
        raise ParseError(manifest, getattr(exc, "lineno", None), str(exc)) from None
    except KeyError as exc:
        raise ParseError(manifest, None, f"missing key {exc}") from None
    if not traj_path.exists():
        raise MissingFile(f"trajectory {traj_path} not found")
    track = read_trajectory(traj_path)
    sensors = {}
    for name in names:
        key = f"sensor {name}"
        if key not in cp:
            raise ParseError(manifest, None, f"no section [{key}]")
        sec = cp[key]
        try:
            kind = sec["kind"].strip()
            rate = float(sec.get("rate", "0"))
            stems = [s.strip() for s in sec["files"].split("\n") if s.strip()]
            if kind == "camera":
                intr = PinholeIntrinsics(float(sec["fx"]), float(sec["fy"]), float(sec["cx"]), float(sec["cy"]),
                                         int(sec["width"]), int(sec["height"]))
            elif kind != "lidar":
                raise ValueError(f"unknown kind {kind!r}")
        except (KeyError, ValueError) as exc:
            raise ParseError(manifest, None, f"[{key}]: {exc}") from None
        ts = np.array([_read_timestamp(root / f"{s}.t") for s in stems], dtype=float)
        if kind == "camera":
            imgs = [read_ppm(root / f"{s}.ppm") for s in stems]
            for s, im in zip(stems, imgs):
                if im.shape != (intr.height, intr.width, 3):
                    raise ParseError(root / f"{s}.ppm", None, "image size disagrees with manifest")
            images = np.stack(imgs) if imgs else np.zeros((0, intr.height, intr.width, 3), np.uint8)
            sensors[name] = SensorStream(name, kind, ts, intrinsics=intr, images=images, rate=rate)
        else:
            scans = [_read_xyz(root / f"{s}.xyz") for s in stems]
            sensors[name] = SensorStream(name, kind, ts, scans=scans, rate=rate,
                                         lidar_max_range=float(sec.get("max_range", "0")))
    gt_path = root / "gt_calib.txt"
    gt = read_calibration(gt_path) if gt_path.exists() else None
    return RigDataset(reference, track, sensors, gt)


# -- checkpoints ------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"STCALCKP"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, radiance_field: RadianceField, render_cfg: RenderConfig = None, extra=None):
    """Binary checkpoint.

    Layout: 8-byte magic, u32 version, u32 header length, UTF-8 ``key = value``
    header (field config, render config, ``extra`` entries), then every
    parameter as little-endian float64 in :attr:`RadianceField.params` order
    (grid table row-major, then w1 b1 w2 b2 w3 b3 w4 b4).
    """
    header = {}
    for k, v in radiance_field.cfg.to_dict().items():
        header[f"field.{k}"] = v
    if render_cfg is not None:
        for k, v in render_cfg.__dict__.items():
            header[f"render.{k}"] = v
    for k, v in (extra or {}).items():
        header[k] = v
    text = "\n".join(f"{k} = {_header_value(v)}" for k, v in header.items()).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(text)))
        fh.write(text)
        for arr in radiance_field.params.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def _header_value(v):
    if isinstance(v, (tuple, list)):
        return " ".join(_header_value(x) for x in v)
    if isinstance(v, float):
        return _fmt(v)
    return str(v)


def _parse_value(text, default):
    if isinstance(default, bool):
        return text.strip() == "True"
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    if isinstance(default, tuple):
        return tuple(float(x) for x in text.split())
    return text


def load_checkpoint(path):
    """Returns ``(field, render_config, header dict)``."""
    path = Path(path)
    if not path.exists():
        raise MissingFile(f"checkpoint {path} not found")
    data = path.read_bytes()
    if data[:8] != CHECKPOINT_MAGIC:
        raise ParseError(path, None, "bad checkpoint magic")
    version, hlen = struct.unpack("<II", data[8:16])
    if version != CHECKPOINT_VERSION:
        raise ParseError(path, None, f"unsupported checkpoint version {version}")
    header = {}
    for line in data[16 : 16 + hlen].decode("utf-8").splitlines():
        if "=" in line:
            k, v = line.split("=", 1)
            header[k.strip()] = v.strip()
    fdefaults = FieldConfig().to_dict()
    fkw = {k: _parse_value(header[f"field.{k}"], d) for k, d in fdefaults.items() if f"field.{k}" in header}
    cfg = FieldConfig(**fkw)
    rdefaults = RenderConfig().__dict__
    rkw = {k: _parse_value(header[f"render.{k}"], d) for k, d in rdefaults.items() if f"render.{k}" in header}
    rcfg = RenderConfig(**rkw)
    rf = RadianceField(cfg, zero=True)
    pos = 16 + hlen
    params = {}
    for name, arr in rf.params.items():
        n = arr.size * 8
        chunk = data[pos : pos + n]
        if len(chunk) != n:
            raise ParseError(path, None, f"truncated checkpoint while reading {name}")
        params[name] = np.frombuffer(chunk, dtype="<f8").reshape(arr.shape).astype(float)
        pos += n
    rf.set_params(params)
    return rf, rcfg, header
