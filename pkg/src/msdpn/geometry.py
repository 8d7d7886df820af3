# src/msdpn/geometry.py
"""
LiDAR-to-camera geometry: rigid transforms, pinhole projection of planar laser
scans onto the image plane, field-of-view filtering and the scan CSV format.

Frames: LiDAR x forward, y left, z up, scan plane z = 0. Camera z forward
(optical axis), x right, y down.
"""

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Tuple, Union

import numpy as np

from . import FormatError, ShapeError
from .numpy_utils import round_half_away

logger = logging.getLogger(__name__)

Z_EPSILON = 1e-6
SCAN_HEADER = "# msdpn-scan v1"


def _frozen_array(values, shape: Tuple[int, ...], name: str) -> np.ndarray:
    arr = np.array(values, dtype=np.float64)
    if arr.shape != shape:
        raise ShapeError(f"{name} must have shape {shape}, got {arr.shape}.")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class RigidTransform:
    """Maps LiDAR-frame points into the camera frame: p_c = R p_l + t."""
    R: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        R = _frozen_array(self.R, (3, 3), "R")
        t = _frozen_array(self.t, (3,), "t")
        if np.max(np.abs(R.T @ R - np.eye(3))) > 1e-5 or abs(np.linalg.det(R) - 1.0) > 1e-5:
            raise ValueError("R must be a proper rotation (orthonormal, det = 1).")
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    def inverse(self) -> "RigidTransform":
        return RigidTransform(self.R.T, -self.R.T @ self.t)

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """self after other: x -> self(other(x))."""
        return RigidTransform(self.R @ other.R, self.R @ other.t + self.t)


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    alpha: float = 0.0

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"Focal lengths must be positive, got fx={self.fx}, fy={self.fy}.")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError(f"Principal point ({self.cx}, {self.cy}) lies outside "
                             f"the {self.width}x{self.height} image.")

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, self.alpha, self.cx],
                         [0.0, self.fy, self.cy],
                         [0.0, 0.0, 1.0]])

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "alpha": self.alpha, "width": self.width, "height": self.height}


@dataclass(frozen=True)
class CameraRig:
    """Camera intrinsics plus the LiDAR-to-camera extrinsic transform."""
    intrinsics: Intrinsics
    extrinsic: RigidTransform

    def to_dict(self) -> dict:
        return {"intrinsics": self.intrinsics.to_dict(),
                "extrinsic": {"R": [float(v) for v in self.extrinsic.R.ravel()],
                              "t": [float(v) for v in self.extrinsic.t]}}

    @classmethod
    def from_dict(cls, payload: dict) -> "CameraRig":
        k = payload["intrinsics"]
        ext = payload["extrinsic"]
        intrinsics = Intrinsics(fx=float(k["fx"]), fy=float(k["fy"]), cx=float(k["cx"]), cy=float(k["cy"]),
                                width=int(k["width"]), height=int(k["height"]),
                                alpha=float(k.get("alpha", 0.0)))
        return cls(intrinsics, RigidTransform(np.reshape(ext["R"], (3, 3)), ext["t"]))


@dataclass(frozen=True)
class LaserScan:
    """Planar range scan; `valid` marks beams that returned a range."""
    angles: np.ndarray
    ranges: np.ndarray
    valid: np.ndarray
    r_max: float = math.inf

    def __post_init__(self):
        angles = np.array(self.angles, dtype=np.float64).reshape(-1)
        ranges = np.array(self.ranges, dtype=np.float64).reshape(-1)
        valid = np.array(self.valid, dtype=bool).reshape(-1)
        if not (angles.size == ranges.size == valid.size):
            raise ShapeError(f"Scan arrays differ in length: angles={angles.size}, "
                             f"ranges={ranges.size}, valid={valid.size}.")
        if angles.size > 1 and not np.all(np.diff(angles) > 0):
            raise ValueError("Scan angles must be strictly increasing.")
        good = ranges[valid]
        if good.size and not (np.all(good > 0) and np.all(good <= self.r_max)):
            raise ValueError(f"Valid beams must have range in (0, {self.r_max}].")
        for arr in (angles, ranges, valid):
            arr.setflags(write=False)
        object.__setattr__(self, "angles", angles)
        object.__setattr__(self, "ranges", ranges)
        object.__setattr__(self, "valid", valid)

    @classmethod
    def empty(cls) -> "LaserScan":
        return cls(np.zeros(0), np.zeros(0), np.zeros(0, dtype=bool))

    def __len__(self) -> int:
        return int(self.angles.size)

    @property
    def n_valid(self) -> int:
        return int(np.count_nonzero(self.valid))


@dataclass(frozen=True)
class PixelHit:
    u: int
    v: int
    depth: float

    def __post_init__(self):
        if not self.depth > 0:
            raise ValueError(f"Pixel hit depth must be positive, got {self.depth}.")


def scan_to_points(scan: LaserScan) -> np.ndarray:
    """Valid beams as LiDAR-frame points, shape (n_valid, 3)."""
    angles = scan.angles[scan.valid]
    ranges = scan.ranges[scan.valid]
    return np.stack([ranges * np.cos(angles), ranges * np.sin(angles), np.zeros_like(ranges)], axis=1)


def transform_point(T: RigidTransform, p_l) -> np.ndarray:
    """
    Maps a LiDAR-frame point into the camera frame, p_c = R·p_l + t.

    Args:
        T (RigidTransform): LiDAR-to-camera transform.
        p_l (array-like): Point (x, y, z) in the LiDAR frame, metres.

    Returns:
        np.ndarray: The camera-frame point, shape (3,), float64.
    """
    return T.R @ np.asarray(p_l, dtype=np.float64) + T.t


def transform_points(T: RigidTransform, points: np.ndarray) -> np.ndarray:
    """Row-wise transform_point for an (n, 3) array."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    return points @ T.R.T + T.t


def project_point(K: Intrinsics, p_c) -> Optional[Tuple[float, float, float]]:
    """
    Pinhole projection of a camera-frame point.

    Returns:
        Optional[Tuple[float, float, float]]: Unrounded (u, v, depth), or None when
        the point is behind the camera or its rounded pixel falls outside the image.
    """
    x, y, z = (float(c) for c in p_c)
    if z <= Z_EPSILON:
        return None
    u = (K.fx * x + K.alpha * y) / z + K.cx
    v = K.fy * y / z + K.cy
    ui, vi = round_half_away(u), round_half_away(v)
    if not (0 <= ui < K.width and 0 <= vi < K.height):
        return None
    return u, v, z


def project_points(K: Intrinsics, points_c: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """
    Vectorised project_point.

    Returns:
        (u, v, depth, in_view): unrounded coordinates for every point (NaN where
        z <= Z_EPSILON) and a boolean mask of points that survive FOV filtering.
    """
    points_c = np.asarray(points_c, dtype=np.float64).reshape(-1, 3)
    x, y, z = points_c[:, 0], points_c[:, 1], points_c[:, 2]
    front = z > Z_EPSILON
    safe_z = np.where(front, z, 1.0)
    u = np.where(front, (K.fx * x + K.alpha * y) / safe_z + K.cx, np.nan)
    v = np.where(front, K.fy * y / safe_z + K.cy, np.nan)
    ui = round_half_away(np.nan_to_num(u, nan=-1.0))
    vi = round_half_away(np.nan_to_num(v, nan=-1.0))
    in_view = front & (ui >= 0) & (ui < K.width) & (vi >= 0) & (vi < K.height)
    return u, v, z, in_view


def project_scan(scan: LaserScan, T: RigidTransform, K: Intrinsics) -> List[PixelHit]:
    """
    Projects a scan into the image with a z-buffer.

    Beams are mapped into the camera frame, projected, rounded half away from
    zero and filtered to the field of view; when several beams land on one
    pixel the smallest depth is kept. Hits are sorted by (v, u).
    """
    if scan.n_valid == 0:
        return []
    u, v, z, in_view = project_points(K, transform_points(T, scan_to_points(scan)))
    if not np.any(in_view):
        return []
    ui = round_half_away(u[in_view]).astype(np.int64)
    vi = round_half_away(v[in_view]).astype(np.int64)
    depth = z[in_view]
    order = np.lexsort((depth, ui, vi))
    ui, vi, depth = ui[order], vi[order], depth[order]
    first = np.ones(ui.size, dtype=bool)
    first[1:] = (ui[1:] != ui[:-1]) | (vi[1:] != vi[:-1])
    return [PixelHit(u=int(a), v=int(b), depth=float(d)) for a, b, d in zip(ui[first], vi[first], depth[first])]


def back_project(K: Intrinsics, u: float, v: float, depth: float) -> np.ndarray:
    """Inverse of the pinhole projection for unrounded (u, v) at optical-axis depth."""
    y = (v - K.cy) * depth / K.fy
    x = ((u - K.cx) * depth - K.alpha * y) / K.fx
    return np.array([x, y, depth], dtype=np.float64)


def rotation_x(angle_rad: float) -> np.ndarray:
    """
    Right-handed rotation about the x axis.

    Args:
        angle_rad (float): Rotation angle in radians.

    Returns:
        np.ndarray: 3×3 rotation matrix.
    """
    c, s = math.cos(angle_rad), math.sin(angle_rad)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rotation_y(angle_rad: float) -> np.ndarray:
    """3×3 rotation about the y axis (radians)."""
    c, s = math.cos(angle_rad), math.sin(angle_rad)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rotation_z(angle_rad: float) -> np.ndarray:
    """3×3 rotation about the z axis (radians)."""
    c, s = math.cos(angle_rad), math.sin(angle_rad)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


# LiDAR (x fwd, y left, z up) -> camera (x right, y down, z fwd)
LIDAR_TO_CAMERA_AXES = np.array([[0.0, -1.0, 0.0],
                                 [0.0, 0.0, -1.0],
                                 [1.0, 0.0, 0.0]])


def forward_aligned_transform(t=(0.0, 0.1, 0.0), pitch_rad: float = 0.0) -> RigidTransform:
    """LiDAR mounted looking along the optical axis, offset by `t` (camera frame),
    optionally pitched about the camera x axis."""
    return RigidTransform(rotation_x(pitch_rad) @ LIDAR_TO_CAMERA_AXES, t)


# --- Scan file I/O ---

def write_scan_csv(path: Union[str, Path], scan: LaserScan, logger_instance: logging.Logger = None) -> Path:
    """
    Writes a scan as UTF-8 CSV: header line, then `angle_rad,range_m` per beam
    with invalid beams stored as range -1.
    """
    log = logger_instance if logger_instance is not None else logger
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [SCAN_HEADER]
    for angle, rng, ok in zip(scan.angles, scan.ranges, scan.valid):
        lines.append(f"{float(angle)!r},{float(rng) if ok else -1.0!r}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    log.debug(f"Wrote scan with {len(scan)} beams ({scan.n_valid} valid) to {path}")
    return path


def read_scan_csv(path: Union[str, Path], logger_instance: logging.Logger = None) -> LaserScan:
    """
    Reads a scan written by write_scan_csv.

    Raises:
        FileNotFoundError: If the file does not exist.
        FormatError: On a missing header or a malformed line (offset = line number).
    """
    log = logger_instance if logger_instance is not None else logger
    path = Path(path)
    if not path.exists():
        log.error(f"Scan file not found: {path}")
        raise FileNotFoundError(f"Scan file not found: {path}")
    raw = path.read_bytes()
    try:
        lines = raw.decode("utf-8").splitlines()
    except UnicodeDecodeError as e:
        raise FormatError("scan file is not UTF-8", path=path, offset=raw[:e.start].count(b"\n") + 1)
    if not lines or lines[0].strip() != SCAN_HEADER:
        raise FormatError(f"missing '{SCAN_HEADER}' header", path=path, offset=1)
    angles, ranges = [], []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != 2:
            raise FormatError("expected 'angle_rad,range_m'", path=path, offset=lineno)
        try:
            angles.append(float(parts[0]))
            ranges.append(float(parts[1]))
        except ValueError:
            raise FormatError(f"non-numeric value in '{line}'", path=path, offset=lineno)
    ranges = np.asarray(ranges, dtype=np.float64)
    valid = ranges > 0
    try:
        return LaserScan(angles, np.where(valid, ranges, 0.0), valid)
    except ValueError as e:
        raise FormatError(str(e), path=path)
