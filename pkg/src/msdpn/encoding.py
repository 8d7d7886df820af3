# src/msdpn/encoding.py
"""
Network input encodings built from projected scans.

- proj-d: the sparse projected depth image, zero where no beam lands.
- ref-d: proj-d extended along the image vertical (gravity) direction, so that
  every scanned column carries a depth in every row.
"""

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Sequence, Union

import cv2
import numpy as np

from . import InvariantError, ShapeError
from .geometry import LaserScan, PixelHit
from .numpy_utils import nearest_rank_percentile, population_mean_std

logger = logging.getLogger(__name__)

INPUT_MODES = ("proj-d", "ref-d", "rgb-only")


@dataclass(frozen=True)
class DepthImage:
    """H×W depth in metres; 0.0 means "no measurement"."""
    data: np.ndarray

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float32)
        if data.ndim != 2:
            raise ShapeError(f"Depth image must be 2-D, got shape {data.shape}.")
        if not np.all(np.isfinite(data)) or np.any(data < 0):
            raise ValueError("Depth values must be finite and non-negative.")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @classmethod
    def zeros(cls, height: int, width: int) -> "DepthImage":
        return cls(np.zeros((height, width), dtype=np.float32))

    @property
    def shape(self):
        return self.data.shape

    @property
    def mask(self) -> np.ndarray:
        """Validity mask (kappa): 1 where a depth is present."""
        return (self.data > 0).astype(np.float32)


@dataclass(frozen=True)
class InputTensor:
    """C×H×W network input: RGB in [0, 1] followed by the depth channel (if any)."""
    tensor: np.ndarray
    mode: str

    @property
    def uses_residual_head(self) -> bool:
        return self.mode == "ref-d"


def make_proj_d(hits: Iterable[PixelHit], height: int, width: int) -> DepthImage:
    """
    Rasterises projected hits into a depth image.

    Raises:
        InvariantError: If a hit lies outside the image, which means the
                        projection upstream did not filter it.
    """
    image = np.zeros((height, width), dtype=np.float32)
    for hit in hits:
        if not (0 <= hit.u < width and 0 <= hit.v < height):
            raise InvariantError(f"Hit ({hit.u}, {hit.v}) outside the {width}x{height} image.")
        image[hit.v, hit.u] = hit.depth
    return DepthImage(image)


def make_ref_d(proj_d: DepthImage) -> DepthImage:
    """
    Fills every column that holds at least one measurement: each pixel takes the
    depth of the vertically nearest measured pixel of its column, ties going to
    the smaller depth. Empty columns stay zero.
    """
    src = proj_d.data
    height, width = src.shape
    if height == 0 or width == 0:
        return proj_d
    hit = src > 0
    rows = np.arange(height)[:, None].repeat(width, axis=1)

    # nearest measured row at or above / at or below each pixel
    above = np.maximum.accumulate(np.where(hit, rows, -1), axis=0)
    below = np.minimum.accumulate(np.where(hit, rows, height)[::-1], axis=0)[::-1]
    has_above = above >= 0
    has_below = below < height
    dist_above = np.where(has_above, rows - above, np.iinfo(np.int64).max)
    dist_below = np.where(has_below, below - rows, np.iinfo(np.int64).max)

    cols = np.arange(width)[None, :].repeat(height, axis=0)
    depth_above = np.where(has_above, src[np.clip(above, 0, height - 1), cols], np.inf)
    depth_below = np.where(has_below, src[np.clip(below, 0, height - 1), cols], np.inf)

    filled = np.where(dist_above < dist_below, depth_above,
                      np.where(dist_below < dist_above, depth_below, np.minimum(depth_above, depth_below)))
    filled = np.where(np.isfinite(filled), filled, 0.0).astype(np.float32)
    return DepthImage(filled)


def dropout_scan(scan: LaserScan, keep_fraction: float, seed: int) -> LaserScan:
    """
    Invalidates a uniformly random subset of valid beams so that exactly
    ceil(keep_fraction * n_valid) stay valid. Angles and ranges are unchanged.
    """
    if not 0.0 <= keep_fraction <= 1.0:
        raise ValueError(f"keep_fraction must lie in [0, 1], got {keep_fraction}.")
    valid_idx = np.flatnonzero(scan.valid)
    keep = math.ceil(round(keep_fraction * valid_idx.size, 9))
    if keep >= valid_idx.size:
        return scan
    rng = np.random.default_rng(seed)
    chosen = rng.permutation(valid_idx)[:keep]
    valid = np.zeros(len(scan), dtype=bool)
    valid[chosen] = True
    return LaserScan(scan.angles, scan.ranges, valid, r_max=scan.r_max)


def assemble_input(rgb: np.ndarray, depth_channel: DepthImage = None, mode: str = "proj-d") -> InputTensor:
    """
    Channel-concatenates RGB (3×H×W in [0, 1]) and the depth channel.

    `mode` is 'proj-d' or 'ref-d' for RGB+depth inputs, or 'rgb-only' in which
    case the depth channel is ignored and the result has three channels.
    """
    if mode not in INPUT_MODES:
        raise ValueError(f"Unknown input mode '{mode}'; expected one of {INPUT_MODES}.")
    rgb = np.asarray(rgb, dtype=np.float32)
    if rgb.ndim != 3 or rgb.shape[0] != 3:
        raise ShapeError(f"RGB must be 3×H×W, got {rgb.shape}.")
    if np.any(rgb < 0) or np.any(rgb > 1):
        raise ValueError("RGB values must lie in [0, 1].")
    if mode == "rgb-only":
        return InputTensor(rgb.copy(), mode)
    if depth_channel is None:
        raise ValueError(f"Mode '{mode}' needs a depth channel.")
    if depth_channel.shape != rgb.shape[1:]:
        raise ShapeError(f"Depth channel {depth_channel.shape} does not match RGB {rgb.shape[1:]}.")
    return InputTensor(np.concatenate([rgb, depth_channel.data[None]], axis=0), mode)


def encode_depth(hits: Sequence[PixelHit], height: int, width: int, mode: str) -> DepthImage:
    """proj-d or ref-d image for `mode` (all-zero for 'rgb-only')."""
    proj_d = make_proj_d(hits, height, width)
    if mode == "ref-d":
        return make_ref_d(proj_d)
    if mode == "rgb-only":
        return DepthImage.zeros(height, width)
    return proj_d


def scan_row_stats(proj_d_list: Sequence[DepthImage], logger_instance: logging.Logger = None) -> Dict[str, float]:
    """
    Statistics of the topmost scan row (minimum v) across a set of proj-d images.

    Returns:
        Dict[str, float]: mean_min_v, std_min_v (population), p10_low / p10_high
        (5th / 95th nearest-rank percentiles, bounding the central 90 %),
        n_images (used) and n_excluded (images without any hit).

    Raises:
        ValueError: If the list is empty or no image holds a hit.
    """
    log = logger_instance if logger_instance is not None else logger
    if len(proj_d_list) == 0:
        raise ValueError("scan_row_stats needs at least one image.")
    min_vs: List[int] = []
    excluded = 0
    for image in proj_d_list:
        rows = np.flatnonzero(np.any(image.data > 0, axis=1))
        if rows.size == 0:
            excluded += 1
            continue
        min_vs.append(int(rows[0]))
    if excluded:
        log.warning(f"{excluded} image(s) without scan hits excluded from row statistics.")
    if not min_vs:
        raise ValueError("No image holds a scan hit.")
    mean, std = population_mean_std(min_vs, logger_instance=log)
    return {
        "mean_min_v": mean,
        "std_min_v": std,
        "p10_low": nearest_rank_percentile(min_vs, 5.0),
        "p10_high": nearest_rank_percentile(min_vs, 95.0),
        "n_images": len(min_vs),
        "n_excluded": excluded,
    }


def write_depth_png(path: Union[str, Path], depth: DepthImage, logger_instance: logging.Logger = None) -> Path:
    """Writes depth as a 16-bit grayscale PNG in millimetres (0 = invalid)."""
    log = logger_instance if logger_instance is not None else logger
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    millimetres = np.clip(np.floor(depth.data.astype(np.float64) * 1000.0 + 0.5), 0, np.iinfo(np.uint16).max)
    if not cv2.imwrite(str(path), millimetres.astype(np.uint16)):
        log.error(f"OpenCV could not write PNG to {path}")
        raise IOError(f"Could not write PNG: {path}")
    log.debug(f"Wrote depth preview {path}")
    return path


def read_depth_png(path: Union[str, Path]) -> DepthImage:
    """Reads a millimetre PNG written by write_depth_png back into metres."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"PNG not found: {path}")
    raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if raw is None or raw.dtype != np.uint16 or raw.ndim != 2:
        raise ValueError(f"{path} is not a 16-bit grayscale PNG.")
    return DepthImage(raw.astype(np.float32) / 1000.0)
