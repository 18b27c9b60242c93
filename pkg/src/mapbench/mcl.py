"""Adaptive Monte Carlo localization replay and trajectory scoring.

Replays a recorded sensor log against an occupancy grid with a
likelihood-field measurement model, an odometry motion model and
KLD-adaptive low-variance resampling, then scores the estimated trajectory
at checkpoints and with APE/RPE, including sustained-divergence detection.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from functools import lru_cache

import numpy as np
from scipy.stats import norm

from .gridmap import (
    DistanceField,
    OccupancyGrid,
    Pose2D,
    distance_transform,
    normalize_angle,
    normalize_angles,
)
from .mapmetrics import DeviationStats


class MclError(ValueError):
    """Invalid filter input or state."""


class MeasurementIncompatible(RuntimeError):
    """Every particle's scan likelihood collapsed to the field floor."""


# ---------------------------------------------------------------------------
# log data types

@dataclass(frozen=True)
class ScanFrame:
    timestamp: float
    bearings: np.ndarray   # radians, sensor frame
    ranges: np.ndarray     # meters; no-return encoded as >= max_range

    def __post_init__(self):
        b = np.ascontiguousarray(self.bearings, dtype=np.float64)
        r = np.ascontiguousarray(self.ranges, dtype=np.float64)
        if b.shape != r.shape or b.ndim != 1:
            raise MclError("bearings and ranges must be equal-length 1D arrays")
        if (r < 0).any():
            raise MclError("ranges must be non-negative")
        b.setflags(write=False)
        r.setflags(write=False)
        object.__setattr__(self, "bearings", b)
        object.__setattr__(self, "ranges", r)


@dataclass(frozen=True)
class OdomFrame:
    timestamp: float
    pose: Pose2D


@dataclass(frozen=True)
class Checkpoint:
    id: int
    timestamp: float
    ground_truth_pose: Pose2D


@dataclass(frozen=True)
class SensorLog:
    """Time-ordered scan + odometry recording with embedded checkpoints."""

    mount: Pose2D
    max_range: float
    odom: tuple
    scans: tuple
    checkpoints: tuple = ()

    def __post_init__(self):
        if self.max_range <= 0:
            raise MclError("max_range must be > 0")
        ot = [f.timestamp for f in self.odom]
        if any(b <= a for a, b in zip(ot, ot[1:])):
            raise MclError("odometry timestamps must be strictly increasing")
        st = [f.timestamp for f in self.scans]
        if any(b < a for a, b in zip(st, st[1:])):
            raise MclError("scan timestamps must be non-decreasing")
        if self.scans and (not self.odom or ot[0] > st[0]):
            raise MclError("need at least one odometry frame at or before the first scan")

    @property
    def span(self) -> tuple[float, float]:
        times = [f.timestamp for f in self.odom] + [f.timestamp for f in self.scans]
        return (min(times), max(times))


def save_sensor_log(log: SensorLog, path) -> None:
    """Write a sensor log as JSON Lines (header first, then time-ordered frames)."""
    lines = [json.dumps({
        "type": "header", "version": 1,
        "mount": [log.mount.x, log.mount.y, log.mount.theta],
        "max_range": log.max_range,
    })]
    events: list[tuple[float, int, dict]] = []
    for f in log.odom:
        events.append((f.timestamp, 0, {"type": "odom", "t": f.timestamp,
                                        "x": f.pose.x, "y": f.pose.y,
                                        "theta": f.pose.theta}))
    for f in log.scans:
        events.append((f.timestamp, 1, {"type": "scan", "t": f.timestamp,
                                        "bearings": f.bearings.tolist(),
                                        "ranges": f.ranges.tolist()}))
    for c in log.checkpoints:
        events.append((c.timestamp, 2, {"type": "checkpoint", "t": c.timestamp,
                                        "id": c.id, "x": c.ground_truth_pose.x,
                                        "y": c.ground_truth_pose.y,
                                        "theta": c.ground_truth_pose.theta}))
    events.sort(key=lambda e: (e[0], e[1]))
    lines.extend(json.dumps(e[2]) for e in events)
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def load_sensor_log(path) -> SensorLog:
    mount = Pose2D(0.0, 0.0, 0.0)
    max_range = None
    odom, scans, checkpoints = [], [], []
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            kind = rec.get("type")
            if kind == "header":
                mx, my, mt = rec["mount"]
                mount = Pose2D(mx, my, mt)
                max_range = float(rec["max_range"])
            elif kind == "odom":
                odom.append(OdomFrame(rec["t"], Pose2D(rec["x"], rec["y"], rec["theta"])))
            elif kind == "scan":
                scans.append(ScanFrame(rec["t"], np.array(rec["bearings"]),
                                       np.array(rec["ranges"])))
            elif kind == "checkpoint":
                checkpoints.append(Checkpoint(int(rec["id"]), rec["t"],
                                              Pose2D(rec["x"], rec["y"], rec["theta"])))
            else:
                raise MclError(f"{path}:{lineno}: unknown record type {kind!r}")
    if max_range is None:
        raise MclError(f"{path}: missing header line")
    return SensorLog(mount, max_range, tuple(odom), tuple(scans), tuple(checkpoints))


# ---------------------------------------------------------------------------
# filter configuration and particle set

@dataclass(frozen=True)
class MclConfig:
    n_min: int = 800
    n_max: int = 5000
    alphas: tuple = (0.05, 0.01, 0.03, 0.005)  # a1 rot/rot, a2 rot/m, a3 trans/trans, a4 trans/rad
    z_hit: float = 0.95
    z_rand: float = 0.05
    sigma_hit: float = 0.1           # meters
    saturation_distance: float = 2.0  # meters, likelihood-field clamp
    beam_subsample: int = 150
    resample_ess_threshold: float = 0.3   # resample when ESS/n drops below
    kld_epsilon: float = 0.05
    kld_delta: float = 0.01
    kld_bin_xy: float = 0.5          # meters
    kld_bin_theta: float = math.radians(10.0)
    init_std: tuple = (0.1, 0.1, 0.05)
    n_init: int | None = None
    seed: int = 0

    def __post_init__(self):
        if not (0 < self.n_min <= self.n_max):
            raise MclError("need 0 < n_min <= n_max")
        if self.z_hit + self.z_rand > 1.0 + 1e-12:
            raise MclError("z_hit + z_rand must be <= 1")
        if self.sigma_hit <= 0:
            raise MclError("sigma_hit must be > 0")
        if self.beam_subsample < 1:
            raise MclError("beam_subsample must be >= 1")
        if not (0 < self.resample_ess_threshold <= 1):
            raise MclError("resample_ess_threshold must be in (0, 1]")

    def to_json_dict(self) -> dict:
        return {
            "n_min": self.n_min, "n_max": self.n_max, "alphas": list(self.alphas),
            "z_hit": self.z_hit, "z_rand": self.z_rand, "sigma_hit": self.sigma_hit,
            "saturation_distance": self.saturation_distance,
            "beam_subsample": self.beam_subsample,
            "resample_ess_threshold": self.resample_ess_threshold,
            "kld_epsilon": self.kld_epsilon, "kld_delta": self.kld_delta,
            "kld_bin_xy": self.kld_bin_xy, "kld_bin_theta": self.kld_bin_theta,
            "init_std": list(self.init_std), "n_init": self.n_init, "seed": self.seed,
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "MclConfig":
        kwargs = dict(d)
        if "alphas" in kwargs:
            kwargs["alphas"] = tuple(kwargs["alphas"])
        if "init_std" in kwargs:
            kwargs["init_std"] = tuple(kwargs["init_std"])
        return cls(**kwargs)


@dataclass(frozen=True)
class ParticleSet:
    poses: np.ndarray     # (n, 3): x, y, theta
    weights: np.ndarray   # (n,)
    normalized: bool = False

    def __post_init__(self):
        p = np.ascontiguousarray(self.poses, dtype=np.float64)
        w = np.ascontiguousarray(self.weights, dtype=np.float64)
        if p.ndim != 2 or p.shape[1] != 3 or w.shape != (p.shape[0],):
            raise MclError("poses must be (n, 3) and weights (n,)")
        if p.shape[0] == 0:
            raise MclError("particle set must be non-empty")
        if (w < 0).any():
            raise MclError("weights must be non-negative")
        if self.normalized and abs(float(w.sum()) - 1.0) > 1e-9:
            raise MclError("normalized flag set but weights do not sum to 1")
        p.setflags(write=False)
        w.setflags(write=False)
        object.__setattr__(self, "poses", p)
        object.__setattr__(self, "weights", w)

    @property
    def n(self) -> int:
        return self.poses.shape[0]


# ---------------------------------------------------------------------------
# likelihood field

@dataclass(frozen=True)
class LikelihoodField:
    """Precomputed beam-endpoint likelihood exp(-d^2 / (2 sigma^2)) with the
    obstacle distance d clamped at saturation_distance."""

    resolution: float
    origin: Pose2D
    values: np.ndarray
    floor: float
    sigma_hit: float
    saturation_distance: float

    def __post_init__(self):
        v = np.ascontiguousarray(self.values, dtype=np.float64)
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    def sample(self, points: np.ndarray) -> np.ndarray:
        """Field values at world points; out-of-map points read as the floor."""
        p = np.asarray(points, dtype=np.float64)
        o = self.origin
        c, s = math.cos(o.theta), math.sin(o.theta)
        dx = p[..., 0] - o.x
        dy = p[..., 1] - o.y
        ix = np.floor((c * dx + s * dy) / self.resolution).astype(np.int64)
        iy = np.floor((-s * dx + c * dy) / self.resolution).astype(np.int64)
        h, w = self.values.shape
        inside = (ix >= 0) & (ix < w) & (iy >= 0) & (iy < h)
        out = np.full(p.shape[:-1], self.floor)
        out[inside] = self.values[iy[inside], ix[inside]]
        return out


def likelihood_field(grid: OccupancyGrid, sigma_hit: float,
                     saturation_distance: float = 2.0) -> LikelihoodField:
    if sigma_hit <= 0 or saturation_distance <= 0:
        raise MclError("sigma_hit and saturation_distance must be > 0")
    df: DistanceField = distance_transform(grid)
    if df.all_free:
        raise MclError("grid has no occupied cells; likelihood field undefined")
    d = np.minimum(df.distances, saturation_distance)
    values = np.exp(-(d * d) / (2.0 * sigma_hit * sigma_hit))
    floor = math.exp(-(saturation_distance ** 2) / (2.0 * sigma_hit ** 2))
    return LikelihoodField(grid.resolution, grid.origin, values, floor,
                           sigma_hit, saturation_distance)


# ---------------------------------------------------------------------------
# filter steps

def init_particles(pose: Pose2D, std, n: int, rng: np.random.Generator,
                   n_min: int | None = None, n_max: int | None = None) -> ParticleSet:
    """Gaussian particle cloud around a pose with uniform weights."""
    if n < 1:
        raise MclError("n must be >= 1")
    if n_min is not None and n < n_min:
        raise MclError(f"n={n} below n_min={n_min}")
    if n_max is not None and n > n_max:
        raise MclError(f"n={n} above n_max={n_max}")
    sx, sy, st = std
    draws = rng.standard_normal((n, 3))
    poses = np.empty((n, 3))
    poses[:, 0] = pose.x + draws[:, 0] * sx
    poses[:, 1] = pose.y + draws[:, 1] * sy
    poses[:, 2] = normalize_angles(pose.theta + draws[:, 2] * st)
    return ParticleSet(poses, np.full(n, 1.0 / n), normalized=True)


def motion_update(particles: ParticleSet, odom_prev: Pose2D, odom_now: Pose2D,
                  alphas, rng: np.random.Generator) -> ParticleSet:
    """Advance particles by the odometry delta under the rot1-trans-rot2 model.

    Each component is perturbed with zero-mean Gaussian noise whose standard
    deviation mixes the motion magnitudes linearly:
    std_rot1 = a1|rot1| + a2*trans, std_trans = a3*trans + a4(|rot1|+|rot2|),
    std_rot2 = a1|rot2| + a2*trans. Weights are unchanged.
    """
    a1, a2, a3, a4 = alphas
    dx = odom_now.x - odom_prev.x
    dy = odom_now.y - odom_prev.y
    trans = math.hypot(dx, dy)
    dtheta = normalize_angle(odom_now.theta - odom_prev.theta)
    rot1 = 0.0 if trans < 1e-9 else normalize_angle(math.atan2(dy, dx) - odom_prev.theta)
    rot2 = normalize_angle(dtheta - rot1)

    std_rot1 = a1 * abs(rot1) + a2 * trans
    std_trans = a3 * trans + a4 * (abs(rot1) + abs(rot2))
    std_rot2 = a1 * abs(rot2) + a2 * trans

    n = particles.n
    noise = rng.standard_normal((n, 3))
    r1 = rot1 + noise[:, 0] * std_rot1
    tr = trans + noise[:, 1] * std_trans
    r2 = rot2 + noise[:, 2] * std_rot2

    theta_mid = particles.poses[:, 2] + r1
    poses = np.empty_like(particles.poses)
    poses[:, 0] = particles.poses[:, 0] + tr * np.cos(theta_mid)
    poses[:, 1] = particles.poses[:, 1] + tr * np.sin(theta_mid)
    poses[:, 2] = normalize_angles(theta_mid + r2)
    return ParticleSet(poses, particles.weights.copy(), normalized=particles.normalized)


def _beam_indices(n_beams: int, subsample: int) -> np.ndarray:
    if subsample >= n_beams:
        return np.arange(n_beams)
    return np.unique(np.round(np.linspace(0, n_beams - 1, subsample)).astype(np.int64))


def sensor_update(particles: ParticleSet, scan: ScanFrame, field: LikelihoodField,
                  config: MclConfig, mount: Pose2D = Pose2D(0.0, 0.0, 0.0),
                  max_range: float = 30.0) -> ParticleSet:
    """Reweight particles by the likelihood-field beam model and normalize.

    Per sampled beam the factor is z_hit*field(endpoint) + z_rand/max_range,
    accumulated in log space; max-range (no-return) beams are skipped. Raises
    MeasurementIncompatible when every particle is indistinguishable from the
    field floor (nothing in the scan matches the map anywhere).
    """
    idx = _beam_indices(scan.bearings.shape[0], config.beam_subsample)
    bearings = scan.bearings[idx]
    ranges = scan.ranges[idx]
    valid = ranges < max_range * (1.0 - 1e-9)
    bearings = bearings[valid]
    ranges = ranges[valid]
    if bearings.size == 0:
        w = particles.weights / particles.weights.sum()
        return ParticleSet(particles.poses.copy(), w, normalized=True)

    px = particles.poses[:, 0][:, None]
    py = particles.poses[:, 1][:, None]
    pt = particles.poses[:, 2][:, None]
    ct = np.cos(particles.poses[:, 2])[:, None]
    st = np.sin(particles.poses[:, 2])[:, None]
    sensor_x = px + ct * mount.x - st * mount.y
    sensor_y = py + st * mount.x + ct * mount.y
    ang = pt + mount.theta + bearings[None, :]
    ex = sensor_x + ranges[None, :] * np.cos(ang)
    ey = sensor_y + ranges[None, :] * np.sin(ang)

    f = field.sample(np.stack([ex, ey], axis=-1))
    rand_term = config.z_rand / max_range
    beam_p = config.z_hit * f + rand_term
    log_w = np.log(beam_p).sum(axis=1)

    floor_log = bearings.size * math.log(config.z_hit * field.floor + rand_term)
    if float(log_w.max()) <= floor_log + 1e-9:
        raise MeasurementIncompatible(
            "scan likelihood at the field floor for every particle")

    scaled = np.exp(log_w - log_w.max()) * particles.weights
    total = float(scaled.sum())
    if total <= 0.0 or not math.isfinite(total):
        raise MeasurementIncompatible("particle weights underflowed to zero")
    return ParticleSet(particles.poses.copy(), scaled / total, normalized=True)


def effective_sample_size(particles: ParticleSet) -> float:
    if not particles.normalized:
        raise MclError("effective sample size requires normalized weights")
    return float(1.0 / (particles.weights ** 2).sum())


@lru_cache(maxsize=8)
def _kld_z(delta: float) -> float:
    return float(norm.ppf(1.0 - delta))


def _kld_bounds(k: np.ndarray, epsilon: float, z: float) -> np.ndarray:
    """Fox's KLD particle-count bound for k occupied bins (0 where k < 2)."""
    k = np.asarray(k, dtype=np.float64)
    out = np.zeros(k.shape)
    mask = k >= 2
    km1 = k[mask] - 1.0
    term = 1.0 - 2.0 / (9.0 * km1) + np.sqrt(2.0 / (9.0 * km1)) * z
    out[mask] = np.ceil(km1 / (2.0 * epsilon) * term ** 3)
    return out


def resample_kld(particles: ParticleSet, config: MclConfig,
                 rng: np.random.Generator) -> ParticleSet:
    """Low-variance resampling with the particle count chosen by the KLD bound
    over occupied (x, y, theta) histogram bins, clamped to [n_min, n_max].
    Weights reset to uniform."""
    if not particles.normalized:
        raise MclError("resampling requires normalized weights")
    w = particles.weights
    if float(w.sum()) <= 0.0:
        raise MclError("degenerate all-zero weights")

    n_max = config.n_max
    positions = (rng.random() + np.arange(n_max)) / n_max
    cum = np.cumsum(w)
    idx = np.minimum(np.searchsorted(cum, positions, side="right"), w.shape[0] - 1)
    poses = particles.poses[idx]

    bx = np.floor(poses[:, 0] / config.kld_bin_xy).astype(np.int64)
    by = np.floor(poses[:, 1] / config.kld_bin_xy).astype(np.int64)
    bt = np.floor(normalize_angles(poses[:, 2]) / config.kld_bin_theta).astype(np.int64)
    bins = np.stack([bx, by, bt], axis=1)
    _, first = np.unique(bins, axis=0, return_index=True)
    new_bin = np.zeros(n_max, dtype=bool)
    new_bin[first] = True
    k = np.cumsum(new_bin)

    bounds = _kld_bounds(k, config.kld_epsilon, _kld_z(config.kld_delta))
    j_arr = np.arange(1, n_max + 1)
    ok = (j_arr >= config.n_min) & (j_arr >= bounds)
    j = int(np.argmax(ok)) + 1 if ok.any() else n_max
    return ParticleSet(poses[:j].copy(), np.full(j, 1.0 / j), normalized=True)


def estimate_pose(particles: ParticleSet) -> tuple[Pose2D, np.ndarray]:
    """Weighted mean pose (circular mean for theta) and a (var_x, var_y,
    circular variance) summary."""
    if not particles.normalized:
        raise MclError("pose estimation requires normalized weights")
    w = particles.weights
    x = float(w @ particles.poses[:, 0])
    y = float(w @ particles.poses[:, 1])
    cs = float(w @ np.cos(particles.poses[:, 2]))
    sn = float(w @ np.sin(particles.poses[:, 2]))
    theta = math.atan2(sn, cs)
    var_x = float(w @ (particles.poses[:, 0] - x) ** 2)
    var_y = float(w @ (particles.poses[:, 1] - y) ** 2)
    circ_var = 1.0 - min(1.0, math.hypot(cs, sn))
    return Pose2D(x, y, theta), np.array([var_x, var_y, circ_var])


# ---------------------------------------------------------------------------
# trajectories

def _interp_angle(a: float, b: float, alpha: float) -> float:
    return normalize_angle(a + normalize_angle(b - a) * alpha)


@dataclass(frozen=True)
class Trajectory:
    """Time-stamped planar pose sequence."""

    times: np.ndarray     # (k,)
    poses: np.ndarray     # (k, 3)

    def __post_init__(self):
        t = np.ascontiguousarray(self.times, dtype=np.float64)
        p = np.ascontiguousarray(self.poses, dtype=np.float64)
        if t.ndim != 1 or p.shape != (t.shape[0], 3):
            raise MclError("times must be (k,) and poses (k, 3)")
        if t.shape[0] == 0:
            raise MclError("trajectory must be non-empty")
        if (np.diff(t) < 0).any():
            raise MclError("timestamps must be non-decreasing")
        t.setflags(write=False)
        p.setflags(write=False)
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "poses", p)

    @property
    def span(self) -> tuple[float, float]:
        return float(self.times[0]), float(self.times[-1])

    def interp(self, t: float) -> Pose2D:
        """Pose at time t: linear in position, shortest-arc in heading
        (clamped at the ends)."""
        times = self.times
        if t <= times[0]:
            p = self.poses[0]
            return Pose2D(p[0], p[1], p[2])
        if t >= times[-1]:
            p = self.poses[-1]
            return Pose2D(p[0], p[1], p[2])
        i = int(np.searchsorted(times, t, side="right")) - 1
        i2 = min(i + 1, times.shape[0] - 1)
        t0, t1 = times[i], times[i2]
        alpha = 0.0 if t1 <= t0 else (t - t0) / (t1 - t0)
        a, b = self.poses[i], self.poses[i2]
        return Pose2D(a[0] + (b[0] - a[0]) * alpha,
                      a[1] + (b[1] - a[1]) * alpha,
                      _interp_angle(a[2], b[2], alpha))

    def positions_at(self, ts: np.ndarray) -> np.ndarray:
        """Vectorized positional interpolation (clamped), shape (len(ts), 2)."""
        ts = np.asarray(ts, dtype=np.float64)
        x = np.interp(ts, self.times, self.poses[:, 0])
        y = np.interp(ts, self.times, self.poses[:, 1])
        return np.stack([x, y], axis=-1)


@dataclass(frozen=True)
class TrajectoryEstimate(Trajectory):
    """Filter output: one entry per processed scan frame, plus per-step
    covariance summary, effective sample size, and divergence annotations."""

    covariances: np.ndarray = field(default=None)  # (k, 3)
    ess: np.ndarray = field(default=None)          # (k,)
    annotations: tuple = ()

    def __post_init__(self):
        super().__post_init__()
        k = self.times.shape[0]
        cov = (np.zeros((k, 3)) if self.covariances is None
               else np.ascontiguousarray(self.covariances, dtype=np.float64))
        e = (np.zeros(k) if self.ess is None
             else np.ascontiguousarray(self.ess, dtype=np.float64))
        if cov.shape != (k, 3) or e.shape != (k,):
            raise MclError("covariances must be (k, 3) and ess (k,)")
        cov.setflags(write=False)
        e.setflags(write=False)
        object.__setattr__(self, "covariances", cov)
        object.__setattr__(self, "ess", e)

    def to_csv(self, path) -> None:
        with open(path, "w") as f:
            f.write("t,x,y,theta,ess\n")
            for i in range(self.times.shape[0]):
                f.write(f"{self.times[i]!r},{self.poses[i, 0]!r},"
                        f"{self.poses[i, 1]!r},{self.poses[i, 2]!r},"
                        f"{self.ess[i]!r}\n")

    @classmethod
    def from_csv(cls, path) -> "TrajectoryEstimate":
        rows = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        return cls(times=rows[:, 0], poses=rows[:, 1:4], ess=rows[:, 4])


# ---------------------------------------------------------------------------
# replay

def run_replay(grid: OccupancyGrid, log: SensorLog, config: MclConfig,
               initial_pose: Pose2D) -> TrajectoryEstimate:
    """Sequential filter over the log's scan frames; deterministic for a fixed
    config seed. Measurement-incompatible updates reset weights to uniform
    (no global re-initialization) and are recorded as annotations."""
    if not log.scans:
        raise MclError("log contains no scan frames")
    field_ = likelihood_field(grid, config.sigma_hit, config.saturation_distance)
    rng = np.random.default_rng(config.seed)
    n0 = config.n_init or max(config.n_min, min(config.n_max, 2 * config.n_min))
    particles = init_particles(initial_pose, config.init_std, n0, rng,
                               n_min=config.n_min, n_max=config.n_max)
    odom_track = Trajectory(
        times=np.array([f.timestamp for f in log.odom]),
        poses=np.array([[f.pose.x, f.pose.y, f.pose.theta] for f in log.odom]))

    times, poses, covs, esss = [], [], [], []
    annotations = []
    prev_odom = odom_track.interp(log.odom[0].timestamp)
    for scan in log.scans:
        now_odom = odom_track.interp(scan.timestamp)
        particles = motion_update(particles, prev_odom, now_odom, config.alphas, rng)
        prev_odom = now_odom
        try:
            particles = sensor_update(particles, scan, field_, config,
                                      mount=log.mount, max_range=log.max_range)
        except MeasurementIncompatible as e:
            annotations.append((scan.timestamp, str(e)))
            particles = ParticleSet(particles.poses.copy(),
                                    np.full(particles.n, 1.0 / particles.n),
                                    normalized=True)
        ess = effective_sample_size(particles)
        if ess / particles.n < config.resample_ess_threshold:
            particles = resample_kld(particles, config, rng)
        pose, cov = estimate_pose(particles)
        times.append(scan.timestamp)
        poses.append([pose.x, pose.y, pose.theta])
        covs.append(cov)
        esss.append(ess)

    return TrajectoryEstimate(times=np.array(times), poses=np.array(poses),
                              covariances=np.array(covs), ess=np.array(esss),
                              annotations=tuple(annotations))


# ---------------------------------------------------------------------------
# trajectory scoring

def checkpoint_deviation(traj: Trajectory, checkpoints) -> DeviationStats:
    """Positional deviation between the time-interpolated estimate and each
    checkpoint's ground-truth pose."""
    checkpoints = list(checkpoints)
    if not checkpoints:
        raise MclError("no checkpoints supplied")
    t0, t1 = traj.span
    values = []
    for cp in checkpoints:
        if not (t0 - 1e-9 <= cp.timestamp <= t1 + 1e-9):
            raise MclError(f"checkpoint {cp.id} at t={cp.timestamp} outside "
                           f"trajectory span [{t0}, {t1}]")
        est = traj.interp(cp.timestamp)
        gt = cp.ground_truth_pose
        values.append(math.hypot(est.x - gt.x, est.y - gt.y))
    return DeviationStats.from_deviations(values)


def _overlap_times(traj: Trajectory, reference: Trajectory) -> np.ndarray:
    r0, r1 = reference.span
    mask = (traj.times >= r0 - 1e-9) & (traj.times <= r1 + 1e-9)
    return traj.times[mask]


def ape(traj: Trajectory, ground_truth: Trajectory) -> DeviationStats:
    """Absolute pose error: positional error at every estimate timestamp that
    falls inside the ground-truth span."""
    ts = _overlap_times(traj, ground_truth)
    if ts.size == 0:
        raise MclError("trajectories have no temporal overlap")
    est = traj.positions_at(ts)
    ref = ground_truth.positions_at(ts)
    diff = est - ref
    return DeviationStats.from_deviations(np.hypot(diff[:, 0], diff[:, 1]))


def _relative_motion(track: Trajectory, t0: float, t1: float) -> tuple[float, float, float]:
    a = track.interp(t0)
    b = track.interp(t1)
    c, s = math.cos(a.theta), math.sin(a.theta)
    dx = b.x - a.x
    dy = b.y - a.y
    return (c * dx + s * dy, -s * dx + c * dy, normalize_angle(b.theta - a.theta))


def rpe(traj: Trajectory, ground_truth: Trajectory, delta: float) -> DeviationStats:
    """Relative pose error over windows of length delta seconds: the norm of
    the difference between estimated and true relative motion, expressed in
    the window's start frame."""
    if delta <= 0:
        raise MclError("delta must be > 0")
    ts = _overlap_times(traj, ground_truth)
    if ts.size == 0:
        raise MclError("trajectories have no temporal overlap")
    end = min(traj.span[1], ground_truth.span[1])
    starts = ts[ts + delta <= end + 1e-9]
    if starts.size == 0:
        raise MclError(f"no window of {delta} s fits the overlap")
    values = []
    for t0 in starts:
        ex, ey, _ = _relative_motion(traj, t0, t0 + delta)
        rx, ry, _ = _relative_motion(ground_truth, t0, t0 + delta)
        values.append(math.hypot(ex - rx, ey - ry))
    return DeviationStats.from_deviations(values)


def detect_divergence(traj: Trajectory, ground_truth: Trajectory,
                      threshold: float = 1.0, hold: float = 5.0) -> float | None:
    """Earliest time at which positional error exceeds threshold continuously
    for at least `hold` seconds, or None."""
    ts = _overlap_times(traj, ground_truth)
    if ts.size == 0:
        raise MclError("trajectories have no temporal overlap")
    est = traj.positions_at(ts)
    ref = ground_truth.positions_at(ts)
    err = np.hypot(est[:, 0] - ref[:, 0], est[:, 1] - ref[:, 1])
    above = err > threshold
    i = 0
    n = above.shape[0]
    while i < n:
        if not above[i]:
            i += 1
            continue
        j = i
        while j + 1 < n and above[j + 1]:
            j += 1
        if ts[j] - ts[i] >= hold:
            return float(ts[i])
        i = j + 1
    return None
