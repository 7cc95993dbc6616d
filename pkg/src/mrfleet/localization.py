"""Monte Carlo localization over SE(2) on a known occupancy grid.

Particle filter with the standard odometry motion model (rot1/trans/rot2
decomposition, noise variances scaled by the commanded motion) and a
likelihood-field measurement model scoring scan endpoints by distance to the
nearest occupied cell. See Thrun, Burgard, Fox, "Probabilistic Robotics",
chapters 5 and 6, for the model families.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .geometry import Pose2D, wrap_angle, wrap_angles
from .lidar import LaserScan
from .worldmap import OccupancyGrid

DEFAULT_PARTICLE_COUNT = 500
DEFAULT_ALPHAS = (0.1, 0.1, 0.1, 0.1)


class AllWeightsZeroError(RuntimeError):
    """Every particle scored zero likelihood; the filter has diverged."""


@dataclass(frozen=True)
class OdometryDelta:
    """Odometry increment decomposed as rotate, translate, rotate."""

    rot1: float
    trans: float
    rot2: float

    def __post_init__(self):
        if self.trans < 0:
            raise ValueError(f"trans must be >= 0, got {self.trans}")

    @staticmethod
    def from_poses(prev: Pose2D, curr: Pose2D, trans_epsilon: float = 0.01) -> "OdometryDelta":
        """Decompose a pose increment; below trans_epsilon the bearing of the
        displacement is ill-conditioned (sensor jitter picks a random direction
        and the heading noise scales with it), so the whole turn goes to rot2."""
        dx = curr.x - prev.x
        dy = curr.y - prev.y
        trans = math.hypot(dx, dy)
        if trans < trans_epsilon:
            return OdometryDelta(0.0, trans, wrap_angle(curr.theta - prev.theta))
        rot1 = wrap_angle(math.atan2(dy, dx) - prev.theta)
        rot2 = wrap_angle(curr.theta - prev.theta - rot1)
        return OdometryDelta(rot1, trans, rot2)

    def is_zero(self, tol: float = 1e-12) -> bool:
        return abs(self.rot1) < tol and self.trans < tol and abs(self.rot2) < tol


@dataclass(frozen=True)
class ParticleSet:
    """Weighted pose hypotheses: poses (N, 3), weights (N,) summing to one."""

    poses: np.ndarray
    weights: np.ndarray
    generation: int = 0

    def __post_init__(self):
        poses = np.asarray(self.poses, dtype=float)
        weights = np.asarray(self.weights, dtype=float)
        if poses.ndim != 2 or poses.shape[1] != 3 or poses.shape[0] < 1:
            raise ValueError(f"poses must be (N, 3), got {poses.shape}")
        if weights.shape != (poses.shape[0],):
            raise ValueError("weights must match particle count")
        if np.any(weights < 0):
            raise ValueError("weights must be non-negative")
        total = weights.sum()
        if not math.isclose(total, 1.0, abs_tol=1e-9):
            raise ValueError(f"weights must sum to 1, got {total}")
        poses.setflags(write=False)
        weights.setflags(write=False)
        object.__setattr__(self, "poses", poses)
        object.__setattr__(self, "weights", weights)

    def __len__(self) -> int:
        return self.poses.shape[0]

    @staticmethod
    def from_poses(poses: np.ndarray, generation: int = 0) -> "ParticleSet":
        n = poses.shape[0]
        return ParticleSet(poses, np.full(n, 1.0 / n), generation)

    def effective_sample_size(self) -> float:
        return float(1.0 / np.sum(self.weights**2))


def init_gaussian(
    mean: Pose2D,
    sigma_xy: float,
    sigma_theta: float,
    n: int = DEFAULT_PARTICLE_COUNT,
    rng: np.random.Generator | None = None,
) -> ParticleSet:
    rng = rng or np.random.default_rng()
    poses = np.empty((n, 3))
    poses[:, 0] = rng.normal(mean.x, sigma_xy, n)
    poses[:, 1] = rng.normal(mean.y, sigma_xy, n)
    poses[:, 2] = wrap_angles(rng.normal(mean.theta, sigma_theta, n))
    return ParticleSet.from_poses(poses)


def init_uniform(
    grid: OccupancyGrid,
    n: int = DEFAULT_PARTICLE_COUNT,
    rng: np.random.Generator | None = None,
) -> ParticleSet:
    """Particles uniform over free cells with uniform headings."""
    rng = rng or np.random.default_rng()
    rows, cols = np.nonzero(grid.free_mask())
    if rows.size == 0:
        raise ValueError("grid has no free cells to initialize in")
    pick = rng.integers(0, rows.size, n)
    jitter = rng.uniform(0.0, 1.0, (n, 2))
    poses = np.empty((n, 3))
    poses[:, 0] = grid.origin.x + (cols[pick] + jitter[:, 0]) * grid.resolution
    poses[:, 1] = grid.origin.y + (rows[pick] + jitter[:, 1]) * grid.resolution
    poses[:, 2] = rng.uniform(-math.pi, math.pi, n)
    return ParticleSet.from_poses(poses)


def motion_update(
    particles: ParticleSet,
    delta: OdometryDelta,
    alphas: tuple[float, float, float, float] = DEFAULT_ALPHAS,
    rng: np.random.Generator | None = None,
) -> ParticleSet:
    """Advance every particle by the odometry delta with motion-scaled noise.

    Noise standard deviations follow the standard odometry model: the rotation
    samples use a1*rot^2 + a2*trans^2 and the translation sample uses
    a3*trans^2 + a4*(rot1^2 + rot2^2), so a zero delta adds zero perturbation.
    """
    a1, a2, a3, a4 = alphas
    if min(alphas) < 0:
        raise ValueError("noise coefficients must be >= 0")
    if delta.is_zero():
        # All noise variances scale with the commanded motion, so a zero
        # delta moves nothing; skip the arithmetic to keep poses bit-exact.
        return replace(particles, generation=particles.generation + 1)
    rng = rng or np.random.default_rng()
    n = len(particles)
    s_rot1 = math.sqrt(a1 * delta.rot1**2 + a2 * delta.trans**2)
    s_trans = math.sqrt(a3 * delta.trans**2 + a4 * (delta.rot1**2 + delta.rot2**2))
    s_rot2 = math.sqrt(a1 * delta.rot2**2 + a2 * delta.trans**2)
    rot1 = delta.rot1 - rng.normal(0.0, 1.0, n) * s_rot1
    trans = delta.trans - rng.normal(0.0, 1.0, n) * s_trans
    rot2 = delta.rot2 - rng.normal(0.0, 1.0, n) * s_rot2
    poses = particles.poses.copy()
    heading = poses[:, 2] + rot1
    poses[:, 0] += trans * np.cos(heading)
    poses[:, 1] += trans * np.sin(heading)
    poses[:, 2] = wrap_angles(heading + rot2)
    return ParticleSet(poses, particles.weights, particles.generation + 1)


@dataclass(frozen=True)
class LikelihoodFieldModel:
    """Mixing weights and width of the likelihood-field beam score."""

    sigma_hit: float = 0.1
    z_hit: float = 0.9
    z_rand: float = 0.1
    beam_stride: int = 10

    def __post_init__(self):
        if self.z_hit + self.z_rand <= 0:
            raise ValueError("z_hit + z_rand must be positive")
        if self.sigma_hit <= 0 or self.beam_stride < 1:
            raise ValueError("need sigma_hit > 0 and beam_stride >= 1")


def measurement_update(
    particles: ParticleSet,
    scan: LaserScan,
    grid: OccupancyGrid,
    model: LikelihoodFieldModel = LikelihoodFieldModel(),
) -> ParticleSet:
    """Reweight particles with the likelihood-field model and renormalize."""
    bearings = scan.bearings()[:: model.beam_stride]
    ranges = scan.ranges[:: model.beam_stride]
    finite = np.isfinite(ranges)
    if not finite.any():
        return replace(particles, generation=particles.generation + 1)
    bearings = bearings[finite]
    ranges = ranges[finite]

    dist_field = grid.distance_field()
    res = grid.resolution
    h, w = dist_field.shape
    px = particles.poses[:, 0:1]
    py = particles.poses[:, 1:2]
    pth = particles.poses[:, 2:3]
    ang = pth + bearings[None, :]
    ex = px + ranges[None, :] * np.cos(ang)
    ey = py + ranges[None, :] * np.sin(ang)
    col = np.floor((ex - grid.origin.x) / res).astype(np.int64)
    row = np.floor((ey - grid.origin.y) / res).astype(np.int64)
    inside = (row >= 0) & (row < h) & (col >= 0) & (col < w)
    dist = np.full(ex.shape, np.inf)
    dist[inside] = dist_field[row[inside], col[inside]]

    norm = 1.0 / (model.sigma_hit * math.sqrt(2.0 * math.pi))
    p_hit = norm * np.exp(-0.5 * (dist / model.sigma_hit) ** 2)
    p_hit[~np.isfinite(dist)] = 0.0
    p_beam = model.z_hit * p_hit + model.z_rand / scan.range_max
    with np.errstate(divide="ignore"):
        log_w = np.where(particles.weights > 0, np.log(particles.weights), -np.inf)
        log_w = log_w + np.sum(np.log(p_beam), axis=1)
    peak = log_w.max()
    if not np.isfinite(peak):
        raise AllWeightsZeroError("measurement update zeroed every particle weight")
    weights = np.exp(log_w - peak)
    total = weights.sum()
    if total <= 0 or not np.isfinite(total):
        raise AllWeightsZeroError("measurement update zeroed every particle weight")
    return ParticleSet(particles.poses, weights / total, particles.generation + 1)


def resample(
    particles: ParticleSet, rng: np.random.Generator | None = None
) -> ParticleSet:
    """Low-variance (systematic) resampling, run only when ESS drops below N/2."""
    n = len(particles)
    if particles.effective_sample_size() >= n / 2.0:
        return particles
    rng = rng or np.random.default_rng()
    u0 = rng.uniform(0.0, 1.0 / n)
    positions = u0 + np.arange(n) / n
    cumulative = np.cumsum(particles.weights)
    cumulative[-1] = 1.0
    idx = np.searchsorted(cumulative, positions, side="left")
    idx = np.clip(idx, 0, n - 1)
    poses = particles.poses[idx].copy()
    return ParticleSet(poses, np.full(n, 1.0 / n), particles.generation + 1)


def estimate_pose(particles: ParticleSet) -> tuple[Pose2D, np.ndarray]:
    """Weighted mean pose (circular mean heading) and 3x3 sample covariance."""
    w = particles.weights
    x = float(np.dot(w, particles.poses[:, 0]))
    y = float(np.dot(w, particles.poses[:, 1]))
    sin_sum = float(np.dot(w, np.sin(particles.poses[:, 2])))
    cos_sum = float(np.dot(w, np.cos(particles.poses[:, 2])))
    theta = math.atan2(sin_sum, cos_sum)
    mean = Pose2D(x, y, theta)
    dev = np.empty_like(particles.poses)
    dev[:, 0] = particles.poses[:, 0] - x
    dev[:, 1] = particles.poses[:, 1] - y
    dev[:, 2] = wrap_angles(particles.poses[:, 2] - theta)
    cov = (w[:, None] * dev).T @ dev
    return mean, cov


class MclFilter:
    """One filter instance per robot: motion, measurement, resample, estimate."""

    def __init__(
        self,
        grid: OccupancyGrid,
        n_particles: int = DEFAULT_PARTICLE_COUNT,
        alphas: tuple[float, float, float, float] = DEFAULT_ALPHAS,
        model: LikelihoodFieldModel = LikelihoodFieldModel(),
        rng: np.random.Generator | None = None,
    ):
        self.grid = grid
        self.n_particles = n_particles
        self.alphas = alphas
        self.model = model
        self.rng = rng or np.random.default_rng()
        self.particles: ParticleSet | None = None

    def initialize_at(self, pose: Pose2D, sigma_xy: float = 0.08, sigma_theta: float = 0.05):
        self.particles = init_gaussian(pose, sigma_xy, sigma_theta, self.n_particles, self.rng)

    def initialize_uniform(self):
        self.particles = init_uniform(self.grid, self.n_particles, self.rng)

    def update(self, delta: OdometryDelta, scan: LaserScan | None) -> Pose2D:
        if self.particles is None:
            raise RuntimeError("filter not initialized")
        self.particles = motion_update(self.particles, delta, self.alphas, self.rng)
        if scan is not None:
            self.particles = measurement_update(self.particles, scan, self.grid, self.model)
            self.particles = resample(self.particles, self.rng)
        return self.estimate()[0]

    def estimate(self) -> tuple[Pose2D, np.ndarray]:
        if self.particles is None:
            raise RuntimeError("filter not initialized")
        return estimate_pose(self.particles)
