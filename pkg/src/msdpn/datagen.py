# src/msdpn/datagen.py
"""
Synthetic data for desk-scale experiments and all binary/dataset file I/O.

World frame: X right, Y down (gravity), Z forward, room centred at the origin.
The camera yaws about Y; its frame coincides with the world axes at yaw 0.
Scenes are closed rooms with axis-aligned boxes standing on the floor, which
gives the vertically constant depth structure the ref-d encoding relies on.
"""

import json
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from . import FormatError, InvariantError
from .encoding import DepthImage
from .geometry import (CameraRig, Intrinsics, LaserScan, RigidTransform, forward_aligned_transform,
                       read_scan_csv, rotation_y, write_scan_csv)
from .system_utils import ordered_map

logger = logging.getLogger(__name__)

TENSOR_MAGIC = b"MSDT"
TENSOR_VERSION = 1
DTYPE_F32 = 0
MANIFEST_NAME = "manifest.json"
DATASET_VERSION = 1
SAMPLE_FILE_KEYS = ("rgb", "depth", "scan", "rig")

AMBIENT = 0.2
LIGHT_DIRECTION = np.array([0.35, -0.8, -0.5]) / np.linalg.norm([0.35, -0.8, -0.5])  # towards the light
WALL_ALBEDO = {
    "x": (0.75, 0.70, 0.65),
    "floor": (0.45, 0.40, 0.35),
    "ceiling": (0.90, 0.90, 0.90),
    "z": (0.60, 0.65, 0.75),
}
CAMERA_WALL_MARGIN = 0.5
CAMERA_BOX_MARGIN = 0.3


@dataclass(frozen=True)
class Box:
    center: Tuple[float, float, float]
    half_sizes: Tuple[float, float, float]
    albedo: Tuple[float, float, float]

    @property
    def lo(self) -> np.ndarray:
        return np.subtract(self.center, self.half_sizes)

    @property
    def hi(self) -> np.ndarray:
        return np.add(self.center, self.half_sizes)


@dataclass(frozen=True)
class Scene:
    room_half_extents: Tuple[float, float, float]
    boxes: Tuple[Box, ...]
    camera_position: Tuple[float, float, float]
    camera_yaw: float
    lidar_pose: RigidTransform = field(default_factory=forward_aligned_transform)

    @property
    def camera_rotation(self) -> np.ndarray:
        """Camera-to-world rotation."""
        return rotation_y(self.camera_yaw)

    def lidar_origin(self) -> np.ndarray:
        return np.asarray(self.camera_position) + self.camera_rotation @ self.lidar_pose.t


@dataclass
class SceneSample:
    rgb: np.ndarray            # 3×H×W float32 in [0, 1]
    gt_depth: DepthImage
    scan: LaserScan
    rig: CameraRig
    sample_id: str = ""


# --- scene generation ---

def validate_scene(scene: Scene) -> None:
    """Raises InvariantError unless boxes and camera sit inside the room and the
    camera is outside every box."""
    half = np.asarray(scene.room_half_extents)
    cam = np.asarray(scene.camera_position)
    if np.any(np.abs(cam) >= half):
        raise InvariantError(f"Camera {cam} outside room {half}.")
    for box in scene.boxes:
        if np.any(box.lo < -half - 1e-9) or np.any(box.hi > half + 1e-9):
            raise InvariantError(f"Box {box} leaves the room.")
        if np.all(cam > box.lo) and np.all(cam < box.hi):
            raise InvariantError(f"Camera inside box {box}.")
    if np.linalg.norm(scene.lidar_pose.t) >= 0.5:
        raise InvariantError("LiDAR offset from the camera must stay below 0.5 m.")


def generate_scene(seed: int, min_boxes: int = 2, max_boxes: int = 6, n_boxes: Optional[int] = None,
                   lidar_pose: Optional[RigidTransform] = None) -> Scene:
    """
    Seeded room of 4-8 m per horizontal side with boxes standing on the floor
    (2-6 by default; `n_boxes` forces a count, 0 gives an empty room).
    Boxes may overlap each other but keep clear of the camera footprint.
    """
    rng = np.random.default_rng(seed)
    hx, hz = rng.uniform(2.0, 4.0, size=2)
    hy = rng.uniform(1.25, 1.75)
    count = int(rng.integers(min_boxes, max_boxes + 1)) if n_boxes is None else n_boxes

    camera_height = rng.uniform(1.0, 1.5)
    yaw = float(rng.uniform(-math.pi, math.pi))
    px = rng.uniform(-hx + CAMERA_WALL_MARGIN, hx - CAMERA_WALL_MARGIN)
    pz = rng.uniform(-hz + CAMERA_WALL_MARGIN, hz - CAMERA_WALL_MARGIN)

    def _clear_of_camera(box: Box) -> bool:
        return not (box.lo[0] - CAMERA_BOX_MARGIN < px < box.hi[0] + CAMERA_BOX_MARGIN and
                    box.lo[2] - CAMERA_BOX_MARGIN < pz < box.hi[2] + CAMERA_BOX_MARGIN)

    boxes: List[Box] = []
    for _ in range(count):
        sx, sz = rng.uniform(0.2, 0.6, size=2)
        sy = rng.uniform(0.3, 1.0)
        albedo = tuple(float(a) for a in rng.uniform(0.2, 1.0, size=3))
        for _attempt in range(100):
            cx = rng.uniform(-hx + sx, hx - sx)
            cz = rng.uniform(-hz + sz, hz - sz)
            candidate = Box((float(cx), float(hy - sy), float(cz)), (float(sx), float(sy), float(sz)), albedo)
            if _clear_of_camera(candidate):
                break
        else:
            # corner diagonally opposite the camera is always clear
            cx = -math.copysign(hx - sx, px)
            cz = -math.copysign(hz - sz, pz)
            candidate = Box((float(cx), float(hy - sy), float(cz)), (float(sx), float(sy), float(sz)), albedo)
        boxes.append(candidate)

    position = (float(px), float(hy - camera_height), float(pz))
    scene = Scene((float(hx), float(hy), float(hz)), tuple(boxes), position, yaw,
                  lidar_pose if lidar_pose is not None else forward_aligned_transform())
    validate_scene(scene)
    return scene


# --- ray casting ---

def _cast(scene: Scene, origins: np.ndarray, directions: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Nearest intersection of rays with the room and its boxes.

    The ray parameter is in units of the (unnormalised) direction.

    Returns:
        (t, normal, albedo): per ray, with outward-facing surface normals.
    """
    origins = np.broadcast_to(np.asarray(origins, dtype=np.float64), directions.shape)
    half = np.asarray(scene.room_half_extents)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / directions
        t_lo = (-half - origins) * inv
        t_hi = (half - origins) * inv
        t_exit = np.fmax(t_lo, t_hi)
        axis = np.argmin(t_exit, axis=1)
        t_best = np.take_along_axis(t_exit, axis[:, None], axis=1)[:, 0]
        rows = np.arange(directions.shape[0])
        normal = np.zeros_like(directions)
        normal[rows, axis] = -np.sign(directions[rows, axis])
        albedo = np.empty_like(directions)
        albedo[axis == 0] = WALL_ALBEDO["x"]
        albedo[axis == 2] = WALL_ALBEDO["z"]
        floor = (axis == 1) & (directions[:, 1] > 0)
        albedo[floor] = WALL_ALBEDO["floor"]
        albedo[(axis == 1) & ~floor] = WALL_ALBEDO["ceiling"]

        for box in scene.boxes:
            b_lo = (box.lo - origins) * inv
            b_hi = (box.hi - origins) * inv
            near = np.fmin(b_lo, b_hi)
            far = np.fmax(b_lo, b_hi)
            face = np.argmax(near, axis=1)
            t_near = np.take_along_axis(near, face[:, None], axis=1)[:, 0]
            t_far = np.min(far, axis=1)
            hit = (t_near <= t_far) & (t_near > 0) & (t_near < t_best)
            if not np.any(hit):
                continue
            t_best = np.where(hit, t_near, t_best)
            face_normal = np.zeros_like(directions)
            face_normal[rows, face] = -np.sign(directions[rows, face])
            normal[hit] = face_normal[hit]
            albedo[hit] = box.albedo
    return t_best, normal, albedo


def _pixel_rays(scene: Scene, K: Intrinsics, height: int, width: int) -> np.ndarray:
    """World-frame ray directions with unit camera z, so t equals optical-axis depth."""
    v, u = np.meshgrid(np.arange(height, dtype=np.float64), np.arange(width, dtype=np.float64), indexing="ij")
    y = (v - K.cy) / K.fy
    x = (u - K.cx - K.alpha * y) / K.fx
    rays_c = np.stack([x, y, np.ones_like(x)], axis=-1).reshape(-1, 3)
    return rays_c @ scene.camera_rotation.T


def render(scene: Scene, K: Intrinsics, height: int, width: int) -> Tuple[DepthImage, np.ndarray]:
    """Depth (z^c, m) and Lambertian RGB (3×H×W in [0, 1]) from one ray cast."""
    rays = _pixel_rays(scene, K, height, width)
    t, normal, albedo = _cast(scene, np.asarray(scene.camera_position), rays)
    if not np.all(np.isfinite(t)):
        raise InvariantError("A camera ray escaped the room.")
    lambert = np.clip(normal @ LIGHT_DIRECTION, 0.0, None)
    shade = AMBIENT + (1.0 - AMBIENT) * lambert
    rgb = np.clip(albedo * shade[:, None], 0.0, 1.0)
    depth = DepthImage(t.reshape(height, width).astype(np.float32))
    return depth, rgb.reshape(height, width, 3).transpose(2, 0, 1).astype(np.float32)


def render_depth(scene: Scene, K: Intrinsics, height: int, width: int) -> DepthImage:
    """
    Ground-truth depth image of the scene seen from its camera.

    Args:
        scene (Scene): Room, boxes and camera pose.
        K (Intrinsics): Camera intrinsics.
        height (int): Image rows.
        width (int): Image columns.

    Returns:
        DepthImage: Optical-axis depth (m) of the nearest surface at every pixel centre.
    """
    return render(scene, K, height, width)[0]


def render_rgb(scene: Scene, K: Intrinsics, height: int, width: int) -> np.ndarray:
    """Lambert-shaded 3×H×W float32 image in [0, 1]; see render_depth for the arguments."""
    return render(scene, K, height, width)[1]


def beam_angles(n_beams: int, fov_rad: float) -> np.ndarray:
    """
    Beam angles (rad) spread evenly over `fov_rad`, centred on 0.

    Both ends are included unless the field of view is a full circle, where the
    last beam would repeat the first.
    """
    if n_beams < 1:
        return np.zeros(0)
    if n_beams == 1:
        return np.zeros(1)
    full_circle = fov_rad >= 2 * math.pi - 1e-12
    return np.linspace(-fov_rad / 2, fov_rad / 2, n_beams, endpoint=not full_circle)


def beams_for_resolution(resolution_rad: float, fov_rad: float) -> int:
    """
    Number of beams whose spacing over `fov_rad` is (as close as possible to)
    `resolution_rad`, following beam_angles' end-point rule.

    Raises:
        ValueError: If either angle is not positive.
    """
    if resolution_rad <= 0 or fov_rad <= 0:
        raise ValueError(f"Angular resolution and field of view must be positive, got {resolution_rad}, {fov_rad}.")
    steps = max(1, int(round(fov_rad / resolution_rad)))
    return steps if fov_rad >= 2 * math.pi - 1e-12 else steps + 1


def simulate_scan(scene: Scene, lidar_pose: Optional[RigidTransform] = None, n_beams: int = 360,
                  fov_rad: float = math.pi, r_max: float = 20.0, noise_std: float = 0.0,
                  seed: int = 0) -> LaserScan:
    """
    Planar scan from the LiDAR mounted at `lidar_pose` (LiDAR -> camera).

    Beams are spread evenly over `fov_rad` in the LiDAR z = 0 plane; a beam is
    invalid when its nearest hit is farther than `r_max`. Optional Gaussian
    range noise is applied to valid beams.
    """
    pose = scene.lidar_pose if lidar_pose is None else lidar_pose
    angles = beam_angles(n_beams, fov_rad)
    dirs_l = np.stack([np.cos(angles), np.sin(angles), np.zeros_like(angles)], axis=1)
    to_world = scene.camera_rotation @ pose.R
    dirs_w = dirs_l @ to_world.T
    origin = np.asarray(scene.camera_position) + scene.camera_rotation @ pose.t
    ranges, _, _ = _cast(scene, origin, dirs_w) if angles.size else (np.zeros(0), None, None)
    if noise_std > 0 and ranges.size:
        rng = np.random.default_rng(seed)
        ranges = ranges + rng.normal(0.0, noise_std, size=ranges.shape)
    valid = np.isfinite(ranges) & (ranges > 0) & (ranges <= r_max)
    return LaserScan(angles, np.where(valid, ranges, 0.0), valid, r_max=r_max)


def simulate_2d_from_pointcloud(cloud: np.ndarray, elevation_band_rad: float = 0.005,
                                angular_resolution_rad: float = math.radians(0.25)) -> LaserScan:
    """
    Sub-samples a 3-D point cloud (sensor frame) into a planar scan.

    Points whose elevation lies within ±band are binned by azimuth on a uniform
    grid; each occupied bin yields one beam at the bin centre with the nearest
    planar range. Bins without points produce no beam.
    """
    cloud = np.asarray(cloud, dtype=np.float64).reshape(-1, 3)
    if cloud.shape[0] == 0:
        raise ValueError("Point cloud is empty.")
    planar = np.hypot(cloud[:, 0], cloud[:, 1])
    elevation = np.arctan2(cloud[:, 2], planar)
    keep = (np.abs(elevation) <= elevation_band_rad) & (planar > 0)
    if not np.any(keep):
        return LaserScan.empty()
    n_bins = int(round(2 * math.pi / angular_resolution_rad))
    azimuth = np.arctan2(cloud[keep, 1], cloud[keep, 0])
    bins = np.clip(np.floor((azimuth + math.pi) / angular_resolution_rad).astype(np.int64), 0, n_bins - 1)
    nearest = np.full(n_bins, np.inf)
    np.minimum.at(nearest, bins, planar[keep])
    occupied = np.flatnonzero(np.isfinite(nearest))
    angles = -math.pi + (occupied + 0.5) * angular_resolution_rad
    return LaserScan(angles, nearest[occupied], np.ones(occupied.size, dtype=bool))


def default_rig(height: int = 64, width: int = 64, hfov_deg: float = 70.0,
                lidar_pose: Optional[RigidTransform] = None) -> CameraRig:
    """Upright pinhole camera centred on the image; LiDAR 0.1 m below, facing forward."""
    fx = (width / 2.0) / math.tan(math.radians(hfov_deg) / 2.0)
    K = Intrinsics(fx=fx, fy=fx, cx=(width - 1) / 2.0, cy=(height - 1) / 2.0, width=width, height=height)
    return CameraRig(K, lidar_pose if lidar_pose is not None else forward_aligned_transform())


def synthesize_sample(seed: int, height: int = 64, width: int = 64, beams: int = 360,
                      fov_rad: float = math.pi, r_max: float = 20.0, noise_std: float = 0.0,
                      min_boxes: int = 2, max_boxes: int = 6, rig: Optional[CameraRig] = None) -> SceneSample:
    rig = default_rig(height, width) if rig is None else rig
    scene = generate_scene(seed, min_boxes=min_boxes, max_boxes=max_boxes, lidar_pose=rig.extrinsic)
    depth, rgb = render(scene, rig.intrinsics, height, width)
    scan = simulate_scan(scene, n_beams=beams, fov_rad=fov_rad, r_max=r_max, noise_std=noise_std, seed=seed)
    return SceneSample(rgb=rgb, gt_depth=depth, scan=scan, rig=rig, sample_id=f"{seed:06d}")


def generate_dataset(n: int, seed: int = 0, height: int = 64, width: int = 64, beams: int = 360,
                     fov_rad: float = math.pi, r_max: float = 20.0, noise_std: float = 0.0,
                     min_boxes: int = 2, max_boxes: int = 6, workers: Optional[int] = None,
                     logger_instance: Optional[logging.Logger] = None) -> List[SceneSample]:
    """`n` samples from scene seeds seed, seed+1, ...; rendered on a thread pool, returned in order."""
    log = logger_instance if logger_instance is not None else logger
    log.info(f"Synthesizing {n} samples ({height}x{width}, {beams} beams) from seed {seed}")

    def _one(index: int) -> SceneSample:
        sample = synthesize_sample(seed + index, height, width, beams, fov_rad, r_max, noise_std,
                                   min_boxes, max_boxes)
        sample.sample_id = f"{index:06d}"
        return sample

    return ordered_map(_one, range(n), workers=workers, logger_instance=log)


# --- tensor files ---

def encode_tensor(array: np.ndarray) -> bytes:
    """MSDT record of `array` as little-endian float32 (header, u32 dims, data)."""
    array = np.asarray(array)
    if array.ndim == 0:
        raise FormatError("rank-0 tensors cannot be stored")
    if array.ndim > 255:
        raise FormatError(f"rank {array.ndim} exceeds the format limit")
    header = TENSOR_MAGIC + struct.pack("<BBB", TENSOR_VERSION, DTYPE_F32, array.ndim)
    header += struct.pack(f"<{array.ndim}I", *array.shape)
    return header + np.ascontiguousarray(array, dtype="<f4").tobytes()


def decode_tensor(buffer: bytes, offset: int = 0, path=None) -> Tuple[np.ndarray, int]:
    """Decodes one tensor record at `offset`; returns the array and the next offset."""
    if len(buffer) < offset + 7:
        raise FormatError("truncated tensor header", path=path, offset=len(buffer))
    if buffer[offset:offset + 4] != TENSOR_MAGIC:
        raise FormatError(f"bad tensor magic {bytes(buffer[offset:offset + 4])!r}", path=path, offset=offset)
    version, dtype, rank = struct.unpack_from("<BBB", buffer, offset + 4)
    if version != TENSOR_VERSION:
        raise FormatError(f"unsupported tensor version {version}", path=path, offset=offset + 4)
    if dtype != DTYPE_F32:
        raise FormatError(f"unsupported dtype code {dtype}", path=path, offset=offset + 5)
    if rank == 0:
        raise FormatError("rank-0 tensor", path=path, offset=offset + 6)
    cursor = offset + 7
    if len(buffer) < cursor + 4 * rank:
        raise FormatError("truncated tensor dimensions", path=path, offset=len(buffer))
    dims = struct.unpack_from(f"<{rank}I", buffer, cursor)
    cursor += 4 * rank
    nbytes = 4 * int(np.prod(dims, dtype=np.int64))
    if len(buffer) < cursor + nbytes:
        raise FormatError(f"truncated tensor payload (need {nbytes} bytes)", path=path, offset=len(buffer))
    array = np.frombuffer(buffer, dtype="<f4", count=nbytes // 4, offset=cursor).astype(np.float32).reshape(dims)
    return array, cursor + nbytes


def write_tensor(path: Union[str, Path], array: np.ndarray, logger_instance: Optional[logging.Logger] = None) -> Path:
    log = logger_instance if logger_instance is not None else logger
    path = Path(path)
    payload = encode_tensor(array)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(payload)
    log.debug(f"Wrote tensor {np.shape(array)} to {path}")
    return path


def read_tensor(path: Union[str, Path], logger_instance: Optional[logging.Logger] = None) -> np.ndarray:
    """
    Raises:
        FileNotFoundError: If the file does not exist.
        FormatError: Bad magic, version, dtype, rank, trailing bytes or truncation.
    """
    log = logger_instance if logger_instance is not None else logger
    path = Path(path)
    if not path.exists():
        log.error(f"Tensor file not found: {path}")
        raise FileNotFoundError(f"Tensor file not found: {path}")
    buffer = path.read_bytes()
    array, end = decode_tensor(buffer, 0, path=path)
    if end != len(buffer):
        raise FormatError(f"{len(buffer) - end} trailing bytes after tensor record", path=path, offset=end)
    return array


# --- datasets ---

def write_dataset(directory: Union[str, Path], samples: Sequence[SceneSample],
                  logger_instance: Optional[logging.Logger] = None) -> Path:
    """
    Writes samples as <dir>/<id>/{rgb.msdt, depth.msdt, scan.csv, rig.json}
    plus <dir>/manifest.json listing them in order.
    """
    log = logger_instance if logger_instance is not None else logger
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for index, sample in enumerate(samples):
        sample_id = sample.sample_id or f"{index:06d}"
        sample_dir = directory / sample_id
        write_tensor(sample_dir / "rgb.msdt", sample.rgb, logger_instance=log)
        write_tensor(sample_dir / "depth.msdt", sample.gt_depth.data, logger_instance=log)
        write_scan_csv(sample_dir / "scan.csv", sample.scan, logger_instance=log)
        (sample_dir / "rig.json").write_text(json.dumps(sample.rig.to_dict(), indent=2, sort_keys=True) + "\n",
                                             encoding="utf-8")
        entries.append({"id": sample_id,
                        "rgb": f"{sample_id}/rgb.msdt",
                        "depth": f"{sample_id}/depth.msdt",
                        "scan": f"{sample_id}/scan.csv",
                        "rig": f"{sample_id}/rig.json"})
    manifest = {"format": "msdpn-dataset", "version": DATASET_VERSION, "samples": entries}
    (directory / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    log.info(f"Wrote dataset of {len(entries)} samples to {directory}")
    return directory


def _sample_paths(directory: Path, entry, manifest_path: Path, index: int) -> dict:
    if not isinstance(entry, dict):
        raise FormatError(f"sample entry {index} is not an object", path=manifest_path)
    missing = [key for key in SAMPLE_FILE_KEYS + ("id",) if not isinstance(entry.get(key), str)]
    if missing:
        raise FormatError(f"sample entry {index} lacks {missing}", path=manifest_path)
    return {key: directory / entry[key] for key in SAMPLE_FILE_KEYS}


def read_dataset(directory: Union[str, Path], logger_instance: Optional[logging.Logger] = None) -> List[SceneSample]:
    """
    Loads a dataset written by write_dataset, in manifest order.

    Raises:
        FileNotFoundError: If the manifest or any file it references is missing
                           (the message names the file).
        FormatError: On a malformed manifest or sample file.
    """
    log = logger_instance if logger_instance is not None else logger
    directory = Path(directory)
    manifest_path = directory / MANIFEST_NAME
    if not manifest_path.exists():
        log.error(f"Dataset manifest not found: {manifest_path}")
        raise FileNotFoundError(f"Dataset manifest not found: {manifest_path}")
    try:
        manifest = json.loads(manifest_path.read_bytes().decode("utf-8"))
    except UnicodeDecodeError as e:
        raise FormatError("manifest is not UTF-8", path=manifest_path, offset=e.start)
    except json.JSONDecodeError as e:
        raise FormatError(f"invalid JSON: {e.msg}", path=manifest_path, offset=e.pos)
    if not isinstance(manifest, dict) or manifest.get("version") != DATASET_VERSION \
            or not isinstance(manifest.get("samples"), list):
        raise FormatError("unsupported manifest layout or version", path=manifest_path)

    samples: List[SceneSample] = []
    for index, entry in enumerate(manifest["samples"]):
        paths = _sample_paths(directory, entry, manifest_path, index)
        for path in paths.values():
            if not path.exists():
                log.error(f"Manifest entry '{entry['id']}' references missing file {path}")
                raise FileNotFoundError(f"Dataset file missing: {path}")
        try:
            rig = CameraRig.from_dict(json.loads(paths["rig"].read_bytes().decode("utf-8")))
        except (KeyError, TypeError, ValueError) as e:
            raise FormatError(f"invalid rig description: {e}", path=paths["rig"])
        try:
            depth = DepthImage(read_tensor(paths["depth"], logger_instance=log))
        except FormatError:
            raise
        except ValueError as e:
            raise FormatError(f"invalid depth image: {e}", path=paths["depth"])
        rgb = read_tensor(paths["rgb"], logger_instance=log)
        if rgb.shape != (3,) + depth.shape:
            raise FormatError(f"rgb of shape {rgb.shape} does not match depth {depth.shape}", path=paths["rgb"])
        if not np.all((rgb >= 0) & (rgb <= 1)):
            raise FormatError("rgb values outside [0, 1]", path=paths["rgb"])
        samples.append(SceneSample(rgb=rgb, gt_depth=depth,
                                   scan=read_scan_csv(paths["scan"], logger_instance=log),
                                   rig=rig, sample_id=entry["id"]))
    log.info(f"Loaded {len(samples)} samples from {directory}")
    return samples
