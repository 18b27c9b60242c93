"""Map-quality metrics between a candidate occupancy grid and a reference:
distance-based geometric verification plus nearest-neighbor, Hausdorff, ICP,
SSIM and corner-matching measures, aggregated into a single report.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .gridmap import (
    CellState,
    OccupancyGrid,
    PIXEL_FREE,
    PIXEL_OCCUPIED,
    PIXEL_UNKNOWN,
    cells_to_world,
    normalize_angle,
    occupied_points,
    world_to_cell,
)

_STAT_TOL = 1e-9


class MetricError(ValueError):
    """A metric could not be computed for the given inputs."""


@dataclass(frozen=True)
class DeviationStats:
    """Four-number deviation summary over a set of per-item values (meters)."""

    average: float
    median: float
    max: float
    min: float
    count: int
    per_item: tuple = ()
    skipped: tuple = ()

    def __post_init__(self):
        if self.count != len(self.per_item):
            raise ValueError("count must equal the number of per-item values")
        if self.min < -_STAT_TOL:
            raise ValueError("deviations must be non-negative")
        if not (self.min - _STAT_TOL <= self.median <= self.max + _STAT_TOL):
            raise ValueError("median outside [min, max]")
        if not (self.min - _STAT_TOL <= self.average <= self.max + _STAT_TOL):
            raise ValueError("average outside [min, max]")

    @classmethod
    def from_deviations(cls, values, skipped=()) -> "DeviationStats":
        vals = np.asarray(list(values), dtype=np.float64)
        if vals.size == 0:
            raise MetricError("no values to aggregate")
        return cls(
            average=float(vals.mean()),
            median=float(np.median(vals)),
            max=float(vals.max()),
            min=float(vals.min()),
            count=int(vals.size),
            per_item=tuple(float(v) for v in vals),
            skipped=tuple(skipped),
        )


@dataclass(frozen=True)
class Transform2D:
    """Rigid planar transform: rotate by theta, then translate by (tx, ty)."""

    theta: float
    tx: float
    ty: float

    def __post_init__(self):
        object.__setattr__(self, "theta", normalize_angle(float(self.theta)))

    @classmethod
    def identity(cls) -> "Transform2D":
        return cls(0.0, 0.0, 0.0)

    def apply(self, points: np.ndarray) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        c, s = math.cos(self.theta), math.sin(self.theta)
        x = c * p[..., 0] - s * p[..., 1] + self.tx
        y = s * p[..., 0] + c * p[..., 1] + self.ty
        return np.stack([x, y], axis=-1)

    def compose(self, other: "Transform2D") -> "Transform2D":
        """self after other: (self.compose(other)).apply(p) == self.apply(other.apply(p))."""
        c, s = math.cos(self.theta), math.sin(self.theta)
        tx = c * other.tx - s * other.ty + self.tx
        ty = s * other.tx + c * other.ty + self.ty
        return Transform2D(self.theta + other.theta, tx, ty)

    def inverse(self) -> "Transform2D":
        c, s = math.cos(self.theta), math.sin(self.theta)
        return Transform2D(-self.theta, -(c * self.tx + s * self.ty),
                           -(-s * self.tx + c * self.ty))


@dataclass(frozen=True)
class ReferenceMeasurement:
    """A ground-truth length between two world-frame feature locations."""

    id: str
    endpoint_a: tuple
    endpoint_b: tuple
    true_length: float

    def __post_init__(self):
        if self.true_length <= 0:
            raise ValueError(f"true_length must be > 0, got {self.true_length}")
        if tuple(self.endpoint_a) == tuple(self.endpoint_b):
            raise ValueError("endpoints must be distinct")


def load_reference_measurements(path) -> list[ReferenceMeasurement]:
    """Read a reference CSV with header id,ax,ay,bx,by,true_length."""
    refs = []
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            refs.append(ReferenceMeasurement(
                id=row["id"],
                endpoint_a=(float(row["ax"]), float(row["ay"])),
                endpoint_b=(float(row["bx"]), float(row["by"])),
                true_length=float(row["true_length"]),
            ))
    return refs


def save_reference_measurements(refs, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["id", "ax", "ay", "bx", "by", "true_length"])
        for r in refs:
            w.writerow([r.id, repr(r.endpoint_a[0]), repr(r.endpoint_a[1]),
                        repr(r.endpoint_b[0]), repr(r.endpoint_b[1]),
                        repr(r.true_length)])


# ---------------------------------------------------------------------------
# geometric verification

def _occupied_cells_and_centers(grid: OccupancyGrid):
    iy, ix = np.nonzero(grid.occupied_mask)
    return ix, iy, cells_to_world(grid, ix, iy)


def geometric_verification(grid: OccupancyGrid, refs, snap_radius: float = 1.2) -> DeviationStats:
    """Deviation between reference lengths and their measurement in the map.

    Emulates a human measuring in a map viewer: each endpoint snaps to the
    nearest Occupied cell of the grid (the feature as drawn in this map, within
    snap_radius), and the measured value is the cell-center distance (pixel
    distance times resolution). Items whose endpoints are out of bounds or far
    from any structure are skipped and reported.
    """
    refs = list(refs)
    if not refs:
        raise MetricError("at least one reference measurement required")
    ix, iy, centers = _occupied_cells_and_centers(grid)
    if centers.shape[0] == 0:
        raise MetricError("grid has no occupied cells to measure against")
    tree = cKDTree(centers)

    deviations = []
    skipped = []
    for ref in refs:
        if world_to_cell(grid, ref.endpoint_a) is None or \
                world_to_cell(grid, ref.endpoint_b) is None:
            skipped.append((ref.id, "endpoint out of bounds"))
            continue
        ends = np.array([ref.endpoint_a, ref.endpoint_b], dtype=np.float64)
        d, idx = tree.query(ends, distance_upper_bound=max(snap_radius, 1e-9))
        if not np.isfinite(d).all():
            skipped.append((ref.id, f"no occupied cell within {snap_radius} m of an endpoint"))
            continue
        di = int(ix[idx[0]]) - int(ix[idx[1]])
        dj = int(iy[idx[0]]) - int(iy[idx[1]])
        measured = math.sqrt(float(di * di + dj * dj)) * grid.resolution
        deviations.append(abs(measured - ref.true_length))
    if not deviations:
        raise MetricError("no measurable reference pairs (all skipped)")
    return DeviationStats.from_deviations(deviations, skipped)


# ---------------------------------------------------------------------------
# point-set distances

def _nn_distances(query: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Exact nearest-neighbor distance from each query point to the target set.

    Distances are recomputed as sqrt(dx^2 + dy^2) from the matched pair so they
    are bit-identical to a brute-force pairwise search.
    """
    tree = cKDTree(targets)
    _, idx = tree.query(query)
    diff = query - targets[idx]
    return np.sqrt(diff[:, 0] ** 2 + diff[:, 1] ** 2)


def _point_set(grid_or_points) -> np.ndarray:
    if isinstance(grid_or_points, OccupancyGrid):
        return occupied_points(grid_or_points)
    return np.asarray(grid_or_points, dtype=np.float64).reshape(-1, 2)


def adnn(candidate: OccupancyGrid, reference: OccupancyGrid,
         symmetric: bool = False) -> float:
    """Average distance from candidate occupied cell centers to their nearest
    reference occupied cell center (candidate -> reference; penalizes
    hallucinated structure). symmetric=True averages both directions."""
    if abs(candidate.resolution - reference.resolution) > 1e-12:
        raise MetricError("grids must share resolution")
    cand = occupied_points(candidate)
    ref = occupied_points(reference)
    if cand.shape[0] == 0:
        raise MetricError("candidate has no occupied cells")
    if ref.shape[0] == 0:
        raise MetricError("reference has no occupied cells")
    forward = float(_nn_distances(cand, ref).mean())
    if not symmetric:
        return forward
    return 0.5 * (forward + float(_nn_distances(ref, cand).mean()))


def hausdorff(candidate: OccupancyGrid, reference: OccupancyGrid) -> float:
    """Symmetric Hausdorff distance between the occupied cell-center sets."""
    cand = _point_set(candidate)
    ref = _point_set(reference)
    if cand.shape[0] == 0 or ref.shape[0] == 0:
        raise MetricError("both occupied sets must be non-empty")
    d_cr = float(_nn_distances(cand, ref).max())
    d_rc = float(_nn_distances(ref, cand).max())
    return max(d_cr, d_rc)


# ---------------------------------------------------------------------------
# ICP alignment

@dataclass(frozen=True)
class IcpConfig:
    max_iterations: int = 50
    convergence_tol: float = 1e-5   # meters, change in mean residual
    correspondence_cutoff: float = 1.0  # meters
    max_points: int = 20000         # deterministic subsample bound per cloud
    subsample_seed: int = 0
    init: str = "centroid"          # "centroid" | "identity"


@dataclass(frozen=True)
class IcpResult:
    transform: Transform2D
    residuals: DeviationStats
    rmse: float
    iterations: int
    converged: bool


def _maybe_subsample(points: np.ndarray, config: IcpConfig) -> np.ndarray:
    if points.shape[0] <= config.max_points:
        return points
    rng = np.random.default_rng(config.subsample_seed)
    keep = np.sort(rng.choice(points.shape[0], config.max_points, replace=False))
    return points[keep]


def icp_align(candidate, reference, config: IcpConfig | None = None) -> IcpResult:
    """Iterative closest point: rigid transform mapping candidate occupied
    points into the reference frame, plus residual statistics.

    Accepts OccupancyGrids or raw (N, 2) point arrays. Each iteration matches
    nearest neighbors under the correspondence cutoff, then solves the
    closed-form 2D rigid least-squares step on centroid-demeaned coordinates.
    """
    config = config or IcpConfig()
    cand = _maybe_subsample(_point_set(candidate), config)
    ref = _maybe_subsample(_point_set(reference), config)
    if cand.shape[0] < 1 or ref.shape[0] < 1:
        raise MetricError("both point sets must be non-empty")

    if config.init == "centroid":
        shift = ref.mean(axis=0) - cand.mean(axis=0)
        transform = Transform2D(0.0, float(shift[0]), float(shift[1]))
    else:
        transform = Transform2D.identity()

    tree = cKDTree(ref)
    cutoff = config.correspondence_cutoff
    prev_mean = None
    converged = False
    iterations = 0
    for iterations in range(1, config.max_iterations + 1):
        moved = transform.apply(cand)
        d, idx = tree.query(moved)
        mask = d <= cutoff
        if not mask.any():
            raise MetricError(
                f"no correspondences under cutoff {cutoff} m")
        mean_res = float(d[mask].mean())
        if prev_mean is not None and abs(prev_mean - mean_res) < config.convergence_tol:
            converged = True
            break
        prev_mean = mean_res

        src = moved[mask]
        dst = ref[idx[mask]]
        sc = src.mean(axis=0)
        dc = dst.mean(axis=0)
        s = src - sc
        t = dst - dc
        num = float((s[:, 0] * t[:, 1] - s[:, 1] * t[:, 0]).sum())
        den = float((s[:, 0] * t[:, 0] + s[:, 1] * t[:, 1]).sum())
        dtheta = math.atan2(num, den)
        c, si = math.cos(dtheta), math.sin(dtheta)
        dtx = dc[0] - (c * sc[0] - si * sc[1])
        dty = dc[1] - (si * sc[0] + c * sc[1])
        transform = Transform2D(dtheta, dtx, dty).compose(transform)

    moved = transform.apply(cand)
    d, idx = tree.query(moved)
    mask = d <= cutoff
    if not mask.any():
        raise MetricError(f"no correspondences under cutoff {cutoff} m")
    diff = moved[mask] - ref[idx[mask]]
    vals = np.sqrt(diff[:, 0] ** 2 + diff[:, 1] ** 2)
    stats = DeviationStats.from_deviations(vals)
    rmse = float(np.sqrt((vals ** 2).mean()))
    return IcpResult(transform, stats, rmse, iterations, converged)


# ---------------------------------------------------------------------------
# SSIM on the 8-bit pixel encoding

@dataclass(frozen=True)
class SsimConfig:
    window: int = 7          # odd, in cells
    k1: float = 0.01
    k2: float = 0.03
    dynamic_range: float = 255.0


def _pixel_image(grid: OccupancyGrid) -> np.ndarray:
    lut = np.empty(3, dtype=np.float64)
    lut[CellState.FREE] = PIXEL_FREE
    lut[CellState.OCCUPIED] = PIXEL_OCCUPIED
    lut[CellState.UNKNOWN] = PIXEL_UNKNOWN
    return lut[grid.cells]


def ssim_images(a: np.ndarray, b: np.ndarray, config: SsimConfig | None = None) -> float:
    """Mean structural similarity over all uniform windows fully inside two
    equally-shaped images (window variances are population variances)."""
    config = config or SsimConfig()
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 2:
        raise MetricError(f"images must share a 2D shape, got {a.shape} vs {b.shape}")
    w = config.window
    if w % 2 != 1 or w < 1:
        raise MetricError(f"window must be odd and positive, got {w}")
    h, wid = a.shape
    if w > wid or w > h:
        raise MetricError(f"window {w} larger than image {wid}x{h}")
    off = w // 2
    sl = (slice(off, h - off), slice(off, wid - off))

    def mean(img):
        return ndimage.uniform_filter(img, size=w)[sl]

    ua = mean(a)
    ub = mean(b)
    va = mean(a * a) - ua * ua
    vb = mean(b * b) - ub * ub
    cab = mean(a * b) - ua * ub
    L = config.dynamic_range
    c1 = (config.k1 * L) ** 2
    c2 = (config.k2 * L) ** 2
    s = ((2.0 * ua * ub + c1) * (2.0 * cab + c2)) / \
        ((ua * ua + ub * ub + c1) * (va + vb + c2))
    return float(s.mean())


def ssim(candidate: OccupancyGrid, reference: OccupancyGrid,
         config: SsimConfig | None = None) -> float:
    """SSIM between two grids, computed on the trinary 8-bit pixel encoding."""
    if (candidate.width, candidate.height) != (reference.width, reference.height):
        raise MetricError("grids must have identical raster dimensions")
    return ssim_images(_pixel_image(candidate), _pixel_image(reference), config)


# ---------------------------------------------------------------------------
# Harris corners and corner matching

@dataclass(frozen=True)
class HarrisConfig:
    sigma: float = 1.0              # cells; pre-smoothing and tensor integration
    k: float = 0.04
    response_rel_threshold: float = 0.1  # fraction of the peak response
    nms_radius: int = 5             # cells


@dataclass(frozen=True)
class CornerSet:
    points: np.ndarray   # (N, 2) world coordinates
    scores: np.ndarray   # (N,)

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 2)
        sc = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        if pts.shape[0] != sc.shape[0]:
            raise ValueError("points and scores must have the same length")
        pts.setflags(write=False)
        sc.setflags(write=False)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "scores", sc)

    def __len__(self):
        return self.points.shape[0]


def harris_corners(grid: OccupancyGrid, config: HarrisConfig | None = None) -> CornerSet:
    """Corner responses on the binary occupancy image (Occupied = 1).

    Corners are local maxima of det(M) - k*trace(M)^2 over the Gaussian-smoothed
    structure tensor M, thresholded relative to the peak response, with greedy
    non-maximum suppression at nms_radius.
    """
    config = config or HarrisConfig()
    img = grid.occupied_mask.astype(np.float64)
    sm = ndimage.gaussian_filter(img, config.sigma)
    gy, gx = np.gradient(sm)
    jxx = ndimage.gaussian_filter(gx * gx, config.sigma)
    jyy = ndimage.gaussian_filter(gy * gy, config.sigma)
    jxy = ndimage.gaussian_filter(gx * gy, config.sigma)
    resp = jxx * jyy - jxy * jxy - config.k * (jxx + jyy) ** 2

    peak = float(resp.max(initial=0.0))
    if peak <= 0.0:
        return CornerSet(np.empty((0, 2)), np.empty(0))
    thr = config.response_rel_threshold * peak
    size = 2 * config.nms_radius + 1
    local_max = resp == ndimage.maximum_filter(resp, size=size)
    cy, cx = np.nonzero(local_max & (resp >= thr))
    scores = resp[cy, cx]

    # Greedy suppression resolves plateaus/ties deterministically.
    order = np.lexsort((cx, cy, -scores))
    keep_x, keep_y, keep_s = [], [], []
    r2 = config.nms_radius ** 2
    for i in order:
        x, y = int(cx[i]), int(cy[i])
        if any((x - kx) ** 2 + (y - ky) ** 2 <= r2 for kx, ky in zip(keep_x, keep_y)):
            continue
        keep_x.append(x)
        keep_y.append(y)
        keep_s.append(float(scores[i]))
    pts = cells_to_world(grid, np.array(keep_x, dtype=np.int64),
                         np.array(keep_y, dtype=np.int64)) if keep_x else np.empty((0, 2))
    return CornerSet(pts, np.array(keep_s))


def corner_match_ratio(candidate_corners: CornerSet, reference_corners: CornerSet,
                       match_radius: float) -> float:
    """Greedy nearest-first one-to-one matching; ratio of matched reference corners."""
    n_ref = len(reference_corners)
    if n_ref == 0:
        raise MetricError("reference corner set is empty")
    n_cand = len(candidate_corners)
    if n_cand == 0:
        return 0.0
    diff = candidate_corners.points[:, None, :] - reference_corners.points[None, :, :]
    dist = np.sqrt((diff ** 2).sum(axis=2))
    order = np.argsort(dist, axis=None, kind="stable")
    used_c = np.zeros(n_cand, dtype=bool)
    used_r = np.zeros(n_ref, dtype=bool)
    matched = 0
    for flat in order:
        ci, ri = divmod(int(flat), n_ref)
        if dist[ci, ri] > match_radius:
            break
        if used_c[ci] or used_r[ri]:
            continue
        used_c[ci] = True
        used_r[ri] = True
        matched += 1
    return matched / n_ref


# ---------------------------------------------------------------------------
# aggregate report

_REPORT_LEGS = ("geometric", "adnn", "hausdorff", "icp", "ssim", "corner_match_ratio")


@dataclass(frozen=True)
class MapQualityReport:
    """All map-based quality legs; a leg is either computed or carries a
    failure reason in `failures`."""

    geometric: DeviationStats | None
    adnn: float | None
    hausdorff: float | None
    icp: IcpResult | None
    ssim: float | None
    corner_match_ratio: float | None
    failures: dict = field(default_factory=dict)

    def __post_init__(self):
        for leg in _REPORT_LEGS:
            if getattr(self, leg) is None and leg not in self.failures:
                raise ValueError(f"leg '{leg}' missing without a recorded reason")

    def to_json_dict(self) -> dict:
        def stats_dict(s: DeviationStats | None):
            if s is None:
                return None
            return {"average_m": s.average, "median_m": s.median, "max_m": s.max,
                    "min_m": s.min, "count": s.count,
                    "skipped": [list(item) for item in s.skipped]}

        icp_d = None
        if self.icp is not None:
            icp_d = {
                "theta_rad": self.icp.transform.theta,
                "tx_m": self.icp.transform.tx,
                "ty_m": self.icp.transform.ty,
                "rmse_m": self.icp.rmse,
                "residuals": stats_dict(self.icp.residuals),
                "iterations": self.icp.iterations,
                "converged": self.icp.converged,
            }
        return {
            "geometric": stats_dict(self.geometric),
            "adnn_m": self.adnn,
            "hausdorff_m": self.hausdorff,
            "icp": icp_d,
            "ssim": self.ssim,
            "corner_match_ratio": self.corner_match_ratio,
            "failures": dict(self.failures),
        }

    CSV_HEADER = (
        "geometric_avg_m,geometric_median_m,geometric_max_m,geometric_min_m,"
        "geometric_count,adnn_m,hausdorff_m,icp_theta_rad,icp_tx_m,icp_ty_m,"
        "icp_rmse_m,ssim,corner_match_ratio")

    def to_csv_row(self) -> str:
        def fmt(v):
            return "n/a" if v is None else format(v, "g")

        g = self.geometric
        cols = [
            fmt(g.average if g else None), fmt(g.median if g else None),
            fmt(g.max if g else None), fmt(g.min if g else None),
            fmt(g.count if g else None),
            fmt(self.adnn), fmt(self.hausdorff),
            fmt(self.icp.transform.theta if self.icp else None),
            fmt(self.icp.transform.tx if self.icp else None),
            fmt(self.icp.transform.ty if self.icp else None),
            fmt(self.icp.rmse if self.icp else None),
            fmt(self.ssim), fmt(self.corner_match_ratio),
        ]
        return ",".join(cols)


def map_quality_report(candidate: OccupancyGrid, reference: OccupancyGrid,
                       refs=None, *, snap_radius: float = 1.2,
                       icp_config: IcpConfig | None = None,
                       ssim_config: SsimConfig | None = None,
                       harris_config: HarrisConfig | None = None,
                       corner_match_radius: float = 0.5) -> MapQualityReport:
    """Compute every map-based metric; individual failures are recorded as
    not-computed (with a reason) instead of aborting the report."""
    values: dict = {}
    failures: dict = {}

    def leg(name, fn):
        try:
            values[name] = fn()
        except (MetricError, ValueError) as e:
            values[name] = None
            failures[name] = str(e)

    leg("geometric", lambda: geometric_verification(candidate, list(refs or []),
                                                    snap_radius=snap_radius))
    leg("adnn", lambda: adnn(candidate, reference))
    leg("hausdorff", lambda: hausdorff(candidate, reference))
    leg("icp", lambda: icp_align(candidate, reference, icp_config))
    leg("ssim", lambda: ssim(candidate, reference, ssim_config))

    def corners_leg():
        cand_c = harris_corners(candidate, harris_config)
        ref_c = harris_corners(reference, harris_config)
        return corner_match_ratio(cand_c, ref_c, corner_match_radius)

    leg("corner_match_ratio", corners_leg)
    return MapQualityReport(failures=failures, **values)
