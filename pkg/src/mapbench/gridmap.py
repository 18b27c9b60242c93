"""Occupancy-grid substrate: tri-state raster maps with metric georegistration,
PGM + metadata I/O, world/cell coordinate bridging, raycasting and Euclidean
distance fields.

Grids are immutable after construction; every operation here is a pure read.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path

import numpy as np
from scipy import ndimage

TWO_PI = 2.0 * math.pi

# Trinary pixel encoding used by save_map (free is near-white, unknown is the
# conventional mid grey).
PIXEL_OCCUPIED = 0
PIXEL_FREE = 254
PIXEL_UNKNOWN = 205

DEFAULT_OCCUPIED_THRESH = 0.65
DEFAULT_FREE_THRESH = 0.196


class MapFormatError(ValueError):
    """Malformed map image or metadata."""


class OutOfBoundsError(ValueError):
    """A world point fell outside the grid raster."""


class CellState(IntEnum):
    FREE = 0
    OCCUPIED = 1
    UNKNOWN = 2


def normalize_angle(theta: float) -> float:
    """Wrap an angle to (-pi, pi]; values already in range pass through exactly."""
    theta = float(theta)
    if -math.pi < theta <= math.pi:
        return theta
    t = math.fmod(theta + math.pi, TWO_PI)
    if t <= 0.0:
        t += TWO_PI
    return t - math.pi


def normalize_angles(theta: np.ndarray) -> np.ndarray:
    """Vectorized wrap to (-pi, pi]; in-range values pass through exactly."""
    t = np.asarray(theta, dtype=np.float64)
    wrapped = np.mod(t + math.pi, TWO_PI) - math.pi
    wrapped = np.where(wrapped <= -math.pi, wrapped + TWO_PI, wrapped)
    return np.where((t > -math.pi) & (t <= math.pi), t, wrapped)


@dataclass(frozen=True)
class Pose2D:
    """Planar pose (meters, radians); theta is normalized to (-pi, pi]."""

    x: float
    y: float
    theta: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "theta", normalize_angle(float(self.theta)))


@dataclass(frozen=True)
class OccupancyGrid:
    """Tri-state raster map.

    cells has shape (height, width), row iy increasing with world +y (PGM row 0
    is the top of the image, i.e. the highest-y row; I/O handles the flip).
    origin is the world pose of the corner of cell (0, 0).
    """

    width: int
    height: int
    resolution: float
    origin: Pose2D
    cells: np.ndarray = field(repr=False)

    def __post_init__(self):
        if self.resolution <= 0:
            raise MapFormatError(f"resolution must be > 0, got {self.resolution}")
        if self.width <= 0 or self.height <= 0:
            raise MapFormatError(f"degenerate grid {self.width}x{self.height}")
        cells = np.ascontiguousarray(self.cells, dtype=np.uint8)
        if cells.shape != (self.height, self.width):
            raise MapFormatError(
                f"cells shape {cells.shape} != (height, width) = "
                f"({self.height}, {self.width})")
        if not np.isin(cells, (0, 1, 2)).all():
            raise MapFormatError("cells contain values outside {Free, Occupied, Unknown}")
        cells.setflags(write=False)
        object.__setattr__(self, "cells", cells)

    @property
    def occupied_mask(self) -> np.ndarray:
        return self.cells == CellState.OCCUPIED

    def state_at(self, ix: int, iy: int) -> CellState:
        return CellState(self.cells[iy, ix])


@dataclass(frozen=True)
class DistanceField:
    """Per-cell Euclidean distance in meters to the nearest Occupied cell.

    all_free flags the degenerate no-occupied-cell case, where every value is
    the +inf sentinel.
    """

    resolution: float
    origin: Pose2D
    distances: np.ndarray = field(repr=False)
    all_free: bool = False

    def __post_init__(self):
        d = np.ascontiguousarray(self.distances, dtype=np.float64)
        d.setflags(write=False)
        object.__setattr__(self, "distances", d)


def _world_to_cell_float(grid: OccupancyGrid, points: np.ndarray) -> np.ndarray:
    """Continuous cell coordinates of world points (no bounds check)."""
    p = np.asarray(points, dtype=np.float64)
    o = grid.origin
    dx = p[..., 0] - o.x
    dy = p[..., 1] - o.y
    c, s = math.cos(o.theta), math.sin(o.theta)
    lx = c * dx + s * dy
    ly = -s * dx + c * dy
    return np.stack([lx, ly], axis=-1) / grid.resolution


def world_to_cell(grid: OccupancyGrid, point) -> tuple[int, int] | None:
    """Cell index (ix, iy) containing a world point, or None when out of bounds."""
    f = _world_to_cell_float(grid, np.asarray(point, dtype=np.float64))
    ix = math.floor(f[0])
    iy = math.floor(f[1])
    if 0 <= ix < grid.width and 0 <= iy < grid.height:
        return ix, iy
    return None


def cell_to_world(grid: OccupancyGrid, index) -> tuple[float, float]:
    """World coordinates of a cell center."""
    ix, iy = index
    if not (0 <= ix < grid.width and 0 <= iy < grid.height):
        raise OutOfBoundsError(f"cell index {(ix, iy)} outside {grid.width}x{grid.height}")
    lx = (ix + 0.5) * grid.resolution
    ly = (iy + 0.5) * grid.resolution
    o = grid.origin
    c, s = math.cos(o.theta), math.sin(o.theta)
    return (o.x + c * lx - s * ly, o.y + s * lx + c * ly)


def cells_to_world(grid: OccupancyGrid, ix: np.ndarray, iy: np.ndarray) -> np.ndarray:
    """Vectorized cell-center coordinates, shape (N, 2)."""
    lx = (np.asarray(ix, dtype=np.float64) + 0.5) * grid.resolution
    ly = (np.asarray(iy, dtype=np.float64) + 0.5) * grid.resolution
    o = grid.origin
    c, s = math.cos(o.theta), math.sin(o.theta)
    return np.stack([o.x + c * lx - s * ly, o.y + s * lx + c * ly], axis=-1)


def measure_distance(grid: OccupancyGrid, a, b) -> float:
    """Distance between the cell centers containing two world points.

    Emulates a pixel-based measuring tool: the result is pixel distance times
    resolution, so it carries the tool's cell-snap quantization by design.
    """
    ca = world_to_cell(grid, a)
    cb = world_to_cell(grid, b)
    if ca is None:
        raise OutOfBoundsError(f"point {tuple(a)} outside the grid")
    if cb is None:
        raise OutOfBoundsError(f"point {tuple(b)} outside the grid")
    di = ca[0] - cb[0]
    dj = ca[1] - cb[1]
    return math.sqrt(float(di * di + dj * dj)) * grid.resolution


def raycast(grid: OccupancyGrid, origin, bearing: float, max_range: float) -> float | None:
    """Range to the first Occupied cell along a ray, or None for no hit.

    Grid traversal visits every crossed cell (DDA); the returned range is the
    distance at which the ray enters the occupied cell. Unknown cells do not
    block. A ray starting inside an Occupied cell returns 0.0.
    """
    if max_range <= 0:
        raise ValueError(f"max_range must be > 0, got {max_range}")
    start = world_to_cell(grid, origin)
    if start is None:
        raise OutOfBoundsError(f"ray origin {tuple(origin)} outside the grid")
    ix, iy = start
    cells = grid.cells
    if cells[iy, ix] == CellState.OCCUPIED:
        return 0.0

    res = grid.resolution
    local = _world_to_cell_float(grid, np.asarray(origin, dtype=np.float64)) * res
    ang = bearing - grid.origin.theta
    dx, dy = math.cos(ang), math.sin(ang)

    step_x = 1 if dx > 0 else -1
    step_y = 1 if dy > 0 else -1
    # Distance along the ray to the next vertical / horizontal cell boundary.
    if dx != 0.0:
        nx = (ix + (1 if dx > 0 else 0)) * res
        t_max_x = (nx - local[0]) / dx
        t_dx = res / abs(dx)
    else:
        t_max_x = math.inf
        t_dx = math.inf
    if dy != 0.0:
        ny = (iy + (1 if dy > 0 else 0)) * res
        t_max_y = (ny - local[1]) / dy
        t_dy = res / abs(dy)
    else:
        t_max_y = math.inf
        t_dy = math.inf

    while True:
        if t_max_x < t_max_y:
            t = t_max_x
            t_max_x += t_dx
            ix += step_x
        else:
            t = t_max_y
            t_max_y += t_dy
            iy += step_y
        if t > max_range:
            return None
        if not (0 <= ix < grid.width and 0 <= iy < grid.height):
            return None
        if cells[iy, ix] == CellState.OCCUPIED:
            return t


def distance_transform(grid: OccupancyGrid) -> DistanceField:
    """Exact Euclidean distance field to the nearest Occupied cell, in meters.

    The nearest-cell assignment comes from scipy's exact EDT feature transform;
    distances are then evaluated as sqrt(di^2 + dj^2) * resolution over integer
    cell offsets, which keeps them bit-identical to a brute-force search.
    """
    occ = grid.occupied_mask
    if not occ.any():
        d = np.full((grid.height, grid.width), np.inf)
        return DistanceField(grid.resolution, grid.origin, d, all_free=True)
    idx = ndimage.distance_transform_edt(~occ, return_distances=False, return_indices=True)
    rows = np.arange(grid.height, dtype=np.int64)[:, None]
    cols = np.arange(grid.width, dtype=np.int64)[None, :]
    di = idx[0].astype(np.int64) - rows
    dj = idx[1].astype(np.int64) - cols
    d = np.sqrt((di * di + dj * dj).astype(np.float64)) * grid.resolution
    return DistanceField(grid.resolution, grid.origin, d, all_free=False)


def occupied_points(grid: OccupancyGrid) -> np.ndarray:
    """World centers of all Occupied cells in row-major order, shape (N, 2)."""
    iy, ix = np.nonzero(grid.occupied_mask)
    return cells_to_world(grid, ix, iy)


# ---------------------------------------------------------------------------
# map file I/O: binary PGM (P5) plus a plain-text key: value metadata file


def _classify(pixels: np.ndarray, negate: int, occupied_thresh: float,
              free_thresh: float) -> np.ndarray:
    p = pixels.astype(np.float64) / 255.0
    if not negate:
        p = 1.0 - p
    out = np.full(pixels.shape, CellState.UNKNOWN, dtype=np.uint8)
    out[p > occupied_thresh] = CellState.OCCUPIED
    out[p < free_thresh] = CellState.FREE
    return out


def _read_pgm(path: Path) -> np.ndarray:
    data = path.read_bytes()
    if not data.startswith(b"P5"):
        raise MapFormatError(f"{path}: not a binary PGM (P5) file")
    # Header tokens: magic, width, height, maxval; '#' comments allowed.
    tokens: list[bytes] = []
    pos = 2
    while len(tokens) < 3 and pos < len(data):
        ch = data[pos:pos + 1]
        if ch == b"#":
            nl = data.find(b"\n", pos)
            if nl < 0:
                raise MapFormatError(f"{path}: truncated header comment")
            pos = nl + 1
        elif ch.isspace():
            pos += 1
        else:
            end = pos
            while end < len(data) and not data[end:end + 1].isspace():
                end += 1
            tokens.append(data[pos:end])
            pos = end
    if len(tokens) < 3 or pos >= len(data):
        raise MapFormatError(f"{path}: truncated PGM header")
    pos += 1  # single whitespace after maxval
    try:
        width, height, maxval = (int(t) for t in tokens)
    except ValueError as e:
        raise MapFormatError(f"{path}: bad PGM header token: {e}") from e
    if maxval != 255:
        raise MapFormatError(f"{path}: only maxval 255 supported, got {maxval}")
    raster = data[pos:pos + width * height]
    if len(raster) != width * height:
        raise MapFormatError(
            f"{path}: raster has {len(raster)} bytes, expected {width * height}")
    return np.frombuffer(raster, dtype=np.uint8).reshape(height, width)


def _parse_metadata(path: Path) -> dict:
    meta: dict = {}
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if ":" not in line:
            raise MapFormatError(f"{path}:{lineno}: expected 'key: value'")
        key, value = line.split(":", 1)
        meta[key.strip()] = value.strip()
    return meta


def _parse_origin(text: str) -> Pose2D:
    inner = text.strip()
    if inner.startswith("[") and inner.endswith("]"):
        inner = inner[1:-1]
    parts = [p for p in inner.replace(",", " ").split() if p]
    if len(parts) != 3:
        raise MapFormatError(f"origin must be [x, y, yaw], got {text!r}")
    x, y, yaw = (float(p) for p in parts)
    return Pose2D(x, y, yaw)


def load_map(image_path, meta_path) -> OccupancyGrid:
    """Load an occupancy grid from a PGM image and its metadata file."""
    image_path = Path(image_path)
    meta_path = Path(meta_path)
    meta = _parse_metadata(meta_path)
    for required in ("resolution", "origin"):
        if required not in meta:
            raise MapFormatError(f"{meta_path}: missing required field '{required}'")
    try:
        resolution = float(meta["resolution"])
    except ValueError as e:
        raise MapFormatError(f"{meta_path}: bad resolution: {e}") from e
    if resolution <= 0:
        raise MapFormatError(f"{meta_path}: resolution must be > 0, got {resolution}")
    origin = _parse_origin(meta["origin"])
    negate = int(meta.get("negate", "0"))
    occupied_thresh = float(meta.get("occupied_thresh", DEFAULT_OCCUPIED_THRESH))
    free_thresh = float(meta.get("free_thresh", DEFAULT_FREE_THRESH))

    pixels = _read_pgm(image_path)
    cells = _classify(pixels, negate, occupied_thresh, free_thresh)[::-1]  # row 0 = top
    height, width = cells.shape
    return OccupancyGrid(width, height, resolution, origin, cells)


def save_map(grid: OccupancyGrid, image_path, meta_path) -> None:
    """Write a grid as binary PGM + metadata; load_map round-trips exactly."""
    image_path = Path(image_path)
    meta_path = Path(meta_path)
    lut = np.empty(3, dtype=np.uint8)
    lut[CellState.FREE] = PIXEL_FREE
    lut[CellState.OCCUPIED] = PIXEL_OCCUPIED
    lut[CellState.UNKNOWN] = PIXEL_UNKNOWN
    pixels = lut[grid.cells[::-1]]
    header = f"P5\n{grid.width} {grid.height}\n255\n".encode("ascii")
    image_path.write_bytes(header + pixels.tobytes())
    o = grid.origin
    meta_path.write_text(
        f"image: {image_path.name}\n"
        f"resolution: {grid.resolution!r}\n"
        f"origin: [{o.x!r}, {o.y!r}, {o.theta!r}]\n"
        "negate: 0\n"
        f"occupied_thresh: {DEFAULT_OCCUPIED_THRESH}\n"
        f"free_thresh: {DEFAULT_FREE_THRESH}\n")
