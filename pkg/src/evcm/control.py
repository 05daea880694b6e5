"""Depth-binned yaw-rate controller and a headless 2-D navigation simulator.

Bins run left to right across the image and a positive yaw rate turns the
vehicle to the right.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .core import DepthMap, write_csv


@dataclass(frozen=True)
class ControllerParams:
    K: int = 8
    lambda_goal: float = 0.2
    lambda_avoid: float = 1.0
    alpha: float = 0.5
    sigma: float = 12.0

    def __post_init__(self):
        if self.K < 2:
            raise ValueError("need at least two bins")
        if self.lambda_goal < 0 or self.lambda_avoid < 0:
            raise ValueError("gains must be non-negative")
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")

    @property
    def center(self) -> float:
        return (self.K - 1) / 2

    def zero_gain(self) -> "ControllerParams":
        return replace(self, lambda_goal=0.0, lambda_avoid=0.0)

    @classmethod
    def from_dict(cls, cfg: dict) -> "ControllerParams":
        known = {f.name for f in fields(cls)}
        unknown = set(cfg) - known
        if unknown:
            raise ValueError(f"unknown controller keys: {sorted(unknown)}")
        return cls(**cfg)

    @classmethod
    def load(cls, path) -> "ControllerParams":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class DisparityBins:
    d: np.ndarray  # mean inverse depth per vertical slice, left to right
    empty: np.ndarray  # slices without a single valid pixel (their d is 0)

    def __post_init__(self):
        if np.any(~np.isfinite(self.d)) or np.any(self.d < 0):
            raise ValueError("inverse depths must be finite and non-negative")

    @property
    def warning(self) -> bool:
        return bool(self.empty.any())


def slice_bounds(width, K):
    """Column ranges of ``K`` equal slices; leftover columns join the last one."""
    if width < K:
        raise ValueError(f"image width {width} is smaller than K={K}")
    size = width // K
    starts = np.arange(K) * size
    stops = np.append(starts[1:], width)
    return list(zip(starts, stops))


def bin_depth(depth: DepthMap, K: int) -> DisparityBins:
    inverse = np.where(depth.mask, 1.0 / np.where(depth.mask, depth.d, 1.0), 0.0)
    d = np.zeros(K)
    empty = np.zeros(K, bool)
    for k, (lo, hi) in enumerate(slice_bounds(depth.shape[1], K)):
        n = depth.mask[:, lo:hi].sum()
        if n == 0:
            empty[k] = True
        else:
            d[k] = inverse[:, lo:hi].sum() / n
    return DisparityBins(d, empty)


def _as_vector(d) -> np.ndarray:
    return np.asarray(d.d if isinstance(d, DisparityBins) else d, dtype=np.float64)


def goal_rate(d, params: ControllerParams = ControllerParams()) -> float:
    d = _as_vector(d)
    # np.argmin returns the first minimum, i.e. the lowest index on ties
    return params.lambda_goal * (int(np.argmin(d)) - params.center)


def avoid_rate(d, params: ControllerParams = ControllerParams()) -> float:
    d = _as_vector(d)
    if len(d) != params.K:
        raise ValueError(f"{len(d)} bins for K={params.K}")
    k = np.arange(params.K)
    offset = params.center - k
    with np.errstate(divide="ignore", over="ignore"):
        # zero disparity is infinitely far and contributes nothing
        attenuation = np.where(d > 0, np.exp(-params.alpha / np.where(d > 0, d, 1.0)), 0.0)
    window = np.exp(-(k - params.center) ** 2 / (2 * params.sigma**2))
    terms = offset * attenuation * window
    # add mirrored pairs first so that symmetric inputs cancel exactly
    half = params.K // 2
    paired = terms[:half] + terms[::-1][:half]
    return params.lambda_avoid * float(np.sum(paired))


def yaw_rate(d, params: ControllerParams = ControllerParams()) -> float:
    """Commanded yaw rate in rad/s, positive to the right."""
    d = _as_vector(d)
    if len(d) != params.K:
        raise ValueError(f"{len(d)} bins for K={params.K}")
    return goal_rate(d, params) + avoid_rate(d, params)


# --- scenes -------------------------------------------------------------------------


@dataclass
class Scene:
    """Occupancy grid; ``occupied[row, col]`` with row 0 at the top (largest y)."""

    occupied: np.ndarray
    resolution: float = 0.1  # metres per cell
    start: tuple = (1.0, 1.0)  # metres
    heading: float = 0.0  # radians, counter-clockwise from +x

    def __post_init__(self):
        self.occupied = np.asarray(self.occupied, bool)
        if self.is_blocked(*self.start):
            raise ValueError(f"start {self.start} lies in an obstacle")
        # distance (m) from each cell centre to the closest obstacle cell centre
        if self.occupied.any():
            dist, idx = ndimage.distance_transform_edt(~self.occupied, return_indices=True)
        else:
            dist = np.full(self.occupied.shape, np.inf)
            idx = None
        self._clearance = dist * self.resolution
        self._nearest = idx

    @property
    def size(self):
        rows, cols = self.occupied.shape
        return cols * self.resolution, rows * self.resolution

    def cell(self, x, y):
        rows = self.occupied.shape[0]
        col = np.floor(np.asarray(x) / self.resolution).astype(int)
        row = rows - 1 - np.floor(np.asarray(y) / self.resolution).astype(int)
        return row, col

    def is_blocked(self, x, y):
        """Obstacle test; everything outside the map counts as blocked."""
        row, col = self.cell(x, y)
        shape = np.shape(row)
        row, col = np.atleast_1d(row), np.atleast_1d(col)
        rows, cols = self.occupied.shape
        inside = (row >= 0) & (row < rows) & (col >= 0) & (col < cols)
        hit = np.ones(row.shape, bool)
        hit[inside] = self.occupied[row[inside], col[inside]]
        return hit.reshape(shape) if shape else bool(hit[0])

    def nearest_obstacle(self, x, y):
        """``(distance_m, (ox, oy))`` to the closest obstacle cell centre."""
        if self._nearest is None:
            return np.inf, None
        row, col = self.cell(x, y)
        rows, cols = self.occupied.shape
        row, col = int(np.clip(row, 0, rows - 1)), int(np.clip(col, 0, cols - 1))
        orow, ocol = self._nearest[0][row, col], self._nearest[1][row, col]
        ox = (ocol + 0.5) * self.resolution
        oy = (rows - 1 - orow + 0.5) * self.resolution
        return float(np.hypot(x - ox, y - oy)), (ox, oy)

    @classmethod
    def from_pgm(cls, path, resolution=0.1, start=(1.0, 1.0), heading=0.0, threshold=128) -> "Scene":
        """Dark pixels (below ``threshold``) are obstacles."""
        image = np.asarray(Image.open(path).convert("L"))
        return cls(image < threshold, resolution, start, heading)

    def to_pgm(self, path) -> None:
        Image.fromarray(np.where(self.occupied, 0, 255).astype(np.uint8)).save(path, format="PPM")


def corridor_scene(seed=0, length=60.0, width=3.0, resolution=0.05, pillars=20,
                   pillar_size=0.6, start_x=1.0) -> Scene:
    """Straight walled corridor along +x cluttered with square pillars.

    The seed places the pillars (uniformly along and across the corridor,
    keeping the first 3 m clear) and jitters the start heading within
    +-0.3 rad.
    """
    rng = np.random.default_rng(seed)
    wall = 2
    rows = int(round(width / resolution)) + 2 * wall
    cols = int(round(length / resolution))
    occ = np.zeros((rows, cols), bool)
    occ[:wall, :] = occ[-wall:, :] = True
    occ[:, 0] = True
    size = max(1, int(round(pillar_size / resolution)))
    for _ in range(pillars):
        col = int(rng.uniform(start_x + 3.0, length - 2.0) / resolution)
        row = int(rng.integers(wall, rows - wall - size + 1))
        occ[row:row + size, col:col + size] = True
    y_mid = rows * resolution / 2
    start_row = rows // 2
    occ[start_row - size:start_row + size, :int((start_x + 3.0) / resolution)] &= False
    return Scene(occ, resolution, (start_x, y_mid), float(rng.uniform(-0.3, 0.3)))


# --- simulation ---------------------------------------------------------------------


@dataclass(frozen=True)
class Camera:
    width: int = 64
    fov: float = np.pi / 2
    max_range: float = 8.0

    def ray_angles(self) -> np.ndarray:
        """Angle of each column relative to the heading; column 0 looks furthest left."""
        return self.fov / 2 - (np.arange(self.width) + 0.5) * self.fov / self.width


def ray_cast(scene: Scene, x, y, heading, camera: Camera = Camera(), step=None) -> DepthMap:
    """One-row depth image (planar depth along the optical axis) from the pose."""
    step = step or scene.resolution / 4
    rel = camera.ray_angles()
    angles = heading + rel
    ranges = np.arange(step, camera.max_range + step, step)
    px = x + ranges[None, :] * np.cos(angles)[:, None]
    py = y + ranges[None, :] * np.sin(angles)[:, None]
    hit = scene.is_blocked(px, py)
    first = np.where(hit.any(axis=1), hit.argmax(axis=1), len(ranges) - 1)
    dist = ranges[first]
    depth = np.maximum(dist * np.cos(rel), 1e-3)
    return DepthMap(depth[None, :])


@dataclass
class NavResult:
    trajectory: np.ndarray  # rows of (t, x, y, psi, intervention)
    interventions: int
    distances: list  # distance flown before each intervention
    total_distance: float

    TRAJECTORY_COLUMNS = ("t", "x", "y", "psi", "intervention")

    @property
    def mean_distance_between(self) -> float:
        """Distance flown per intervention (the whole flight if there were none)."""
        return self.total_distance / max(self.interventions, 1)

    def to_csv(self, path) -> None:
        rows = [dict(zip(self.TRAJECTORY_COLUMNS, (r[0], r[1], r[2], r[3], int(r[4]))))
                for r in self.trajectory]
        write_csv(path, rows, self.TRAJECTORY_COLUMNS)


def navsim(scene: Scene, params: ControllerParams = ControllerParams(), speed=0.5, steps=1200,
           dt=0.1, camera: Camera = Camera(), threshold=0.3, depth_noise=0.0, noise_block=None,
           seed=0) -> NavResult:
    """Fly a constant-speed unicycle through ``scene`` under the yaw controller.

    Each step ray-casts a depth row, optionally corrupts it with scale noise,
    bins it and integrates the commanded yaw rate. The noise multiplies each
    run of ``noise_block`` columns (default: one bin wide) by its own factor
    drawn uniformly from ``[1 - depth_noise, 1 + depth_noise]``. Closer than ``threshold``
    to an obstacle counts as an intervention: the vehicle is placed
    ``2 * threshold`` from the nearest obstacle, facing away from it.
    The run stops early when the vehicle reaches the far edge of the map.
    """
    if not 0 <= depth_noise < 1:
        raise ValueError("depth_noise must be in [0, 1)")
    rng = np.random.default_rng(seed)
    block = noise_block or max(1, camera.width // params.K)
    n_blocks = -(-camera.width // block)
    x, y = scene.start
    psi = scene.heading
    size_x, _ = scene.size
    rows = [(0.0, x, y, psi, 0)]
    distances, since, total = [], 0.0, 0.0
    for i in range(1, steps + 1):
        depth = ray_cast(scene, x, y, psi, camera)
        if depth_noise:
            factors = rng.uniform(1 - depth_noise, 1 + depth_noise, n_blocks)
            depth = DepthMap(depth.d * np.repeat(factors, block)[None, :camera.width])
        rate = yaw_rate(bin_depth(depth, params.K), params)
        psi -= rate * dt  # right-positive yaw turns clockwise
        nx, ny = x + speed * dt * np.cos(psi), y + speed * dt * np.sin(psi)
        if not scene.is_blocked(nx, ny):
            x, y = nx, ny
            since += speed * dt
            total += speed * dt
        flag = 0
        clearance, obstacle = scene.nearest_obstacle(x, y)
        if clearance < threshold or scene.is_blocked(x, y):
            flag = 1
            distances.append(since)
            since = 0.0
            if obstacle is not None:
                away = np.array([x - obstacle[0], y - obstacle[1]])
                norm = np.linalg.norm(away)
                away = away / norm if norm > 0 else np.array([np.cos(psi + np.pi), np.sin(psi + np.pi)])
                sx, sy = obstacle[0] + 2 * threshold * away[0], obstacle[1] + 2 * threshold * away[1]
                if not scene.is_blocked(sx, sy):
                    x, y = sx, sy
                psi = float(np.arctan2(away[1], away[0]))
        rows.append((i * dt, x, y, psi, flag))
        if x >= size_x - 2 * threshold:
            break
    return NavResult(np.array(rows, dtype=np.float64), len(distances), distances, total)
