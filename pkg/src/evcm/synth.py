"""Synthetic event streams with exact depth and flow ground truth.

A scene is a set of fronto-parallel textured planes seen by a camera that
moves with one rigid step per bin. Texture is a cloud of point features; each
feature fires events at a fixed rate with alternating polarity wherever its
projection currently falls.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import CameraIntrinsics, DepthMap, EventSlice, FlowSequence, PoseStep
from .geometry import depth_pose_to_flows, pixel_rays, rodrigues


@dataclass(frozen=True)
class Plane:
    """Plane at constant ``depth`` in the first camera frame, textured over the
    pixel rectangle ``region = (x0, y0, x1, y1)`` (half-open) of that frame."""

    depth: float
    region: tuple
    density: float  # features per square pixel

    def __post_init__(self):
        x0, y0, x1, y1 = self.region
        if not self.depth > 0:
            raise ValueError("plane depth must be positive")
        if not self.density > 0:
            raise ValueError("feature density must be positive")
        if not (x1 > x0 and y1 > y0):
            raise ValueError(f"empty plane region {self.region}")


@dataclass
class SceneSpec:
    width: int
    height: int
    intrinsics: CameraIntrinsics
    planes: list
    poses: list  # one PoseStep per bin
    duration_us: int
    event_rate: float = 200.0  # events per second per feature
    seed: int = 0
    t_start_us: int = 0

    def __post_init__(self):
        if self.duration_us <= 0:
            raise ValueError("duration must be positive")
        if not self.poses:
            raise ValueError("need at least one bin")
        if self.duration_us % len(self.poses):
            raise ValueError("duration must split into equal integer-microsecond bins")
        if self.event_rate <= 0:
            raise ValueError("event rate must be positive")
        if not self.planes:
            raise ValueError("scene has no planes")
        self.intrinsics.check_sensor(self.width, self.height)

    @property
    def bins(self):
        return len(self.poses)

    @property
    def edges(self) -> np.ndarray:
        return np.linspace(self.t_start_us, self.t_start_us + self.duration_us, self.bins + 1)

    _KEYS = {"width", "height", "intrinsics", "planes", "poses", "pose", "bins",
             "duration_us", "event_rate", "seed", "t_start_us"}

    @classmethod
    def from_dict(cls, cfg: dict) -> "SceneSpec":
        """Build from JSON-style data.

        Motion is either ``poses`` (one ``[wx, wy, wz, tx, ty, tz]`` per bin) or
        a single ``pose`` repeated for ``bins`` bins.
        """
        unknown = set(cfg) - cls._KEYS
        if unknown:
            raise ValueError(f"unknown scene keys: {sorted(unknown)}")
        if ("poses" in cfg) == ("pose" in cfg):
            raise ValueError("give exactly one of 'poses' or 'pose'")
        if "poses" in cfg:
            poses = [PoseStep.from_vector(p) for p in cfg["poses"]]
        else:
            poses = [PoseStep.from_vector(cfg["pose"])] * int(cfg.get("bins", 1))
        planes = [Plane(float(p["depth"]), tuple(p["region"]), float(p["density"])) for p in cfg["planes"]]
        return cls(
            int(cfg["width"]), int(cfg["height"]), CameraIntrinsics(**cfg["intrinsics"]),
            planes, poses, int(cfg["duration_us"]), float(cfg.get("event_rate", 200.0)),
            int(cfg.get("seed", 0)), int(cfg.get("t_start_us", 0)),
        )

    def to_dict(self) -> dict:
        k = self.intrinsics
        return {
            "width": self.width, "height": self.height,
            "intrinsics": {"fx": k.fx, "fy": k.fy, "cx": k.cx, "cy": k.cy},
            "planes": [{"depth": p.depth, "region": list(p.region), "density": p.density} for p in self.planes],
            "poses": [p.as_vector().tolist() for p in self.poses],
            "duration_us": self.duration_us, "event_rate": self.event_rate,
            "seed": self.seed, "t_start_us": self.t_start_us,
        }

    @classmethod
    def load(cls, path) -> "SceneSpec":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))


def translation_scene(width=64, height=48, focal=60.0, velocity=(0.5, 0.0, 0.0), planes=None,
                      bins=5, bin_us=10_000, event_rate=200.0, density=0.15, seed=0) -> SceneSpec:
    """Pure camera translation (scene units per second) over given planes.

    Without ``planes`` a single plane at depth 1 covers the whole frame for
    the whole window: its region is grown by the distance the texture travels.
    """
    dt = bin_us * 1e-6
    if planes is None:
        vx, vy, vz = np.abs(np.asarray(velocity, float))
        span = bins * dt
        # lateral drift at depth 1 plus the radial spread of forward motion
        grow = focal * (vx + vy) * span + max(width, height) * vz * span / max(1.0 - vz * span, 0.1)
        m = int(np.ceil(grow)) + 1
        planes = [Plane(1.0, (-m, -m, width + m, height + m), density)]
    # points move opposite to the camera
    step = PoseStep(np.zeros(3), -np.asarray(velocity, float) * dt)
    k = CameraIntrinsics(focal, focal, (width - 1) / 2, (height - 1) / 2)
    return SceneSpec(width, height, k, planes, [step] * bins, bins * bin_us, event_rate, seed)


def _cumulative(poses):
    """Transforms from the first frame to the start of every bin (B + 1 of them)."""
    out = [(np.eye(3), np.zeros(3))]
    for p in poses:
        rot, t = out[-1]
        step = rodrigues(p.omega)
        out.append((step @ rot, step @ t + np.asarray(p.t, float)))
    return out


def render_depth(spec: SceneSpec, rot, t) -> DepthMap:
    """Ray-cast the planes from a camera at ``X_cam = rot X_first + t``."""
    k = spec.intrinsics
    rays = pixel_rays(spec.height, spec.width, k)
    # ray s * r in this frame is s * a + b in the first frame
    a = rays @ rot  # rot.T @ r per pixel
    b = -rot.T @ t
    best = np.full((spec.height, spec.width), np.inf)
    for plane in spec.planes:
        with np.errstate(divide="ignore", invalid="ignore"):
            s = (plane.depth - b[2]) / a[..., 2]
        hit = s[..., None] * a + b
        px = k.fx * hit[..., 0] / plane.depth + k.cx
        py = k.fy * hit[..., 1] / plane.depth + k.cy
        x0, y0, x1, y1 = plane.region
        tol = 1e-9  # border rays project a rounding error away from the region edge
        ok = (np.isfinite(s) & (s > 0) & (px >= x0 - tol) & (px < x1 - tol)
              & (py >= y0 - tol) & (py < y1 - tol))
        best = np.where(ok & (s < best), s, best)
    mask = np.isfinite(best)
    return DepthMap(np.where(mask, best, 1.0), mask)


def ground_truth_flows(spec: SceneSpec) -> FlowSequence:
    """Per-bin flow from the depth seen at the start of each bin."""
    edges = spec.edges
    chain = _cumulative(spec.poses)
    u = np.zeros((spec.bins, spec.height, spec.width, 2))
    for i, pose in enumerate(spec.poses):
        depth = render_depth(spec, *chain[i])
        u[i] = depth_pose_to_flows(depth, [pose], spec.intrinsics, edges[i:i + 2]).u[0]
    return FlowSequence(u, edges)


def _rotate_partial(omega, alpha, pts):
    """Rotate each row of ``pts`` by ``alpha_i * omega`` (axis-angle)."""
    omega = np.asarray(omega, dtype=np.float64)
    theta = float(np.linalg.norm(omega))
    if theta == 0.0:
        return pts.copy()
    axis = omega / theta
    phi = (alpha * theta)[:, None]
    return (pts * np.cos(phi) + np.cross(axis, pts) * np.sin(phi)
            + np.outer(pts @ axis, axis) * (1 - np.cos(phi)))


def generate(spec: SceneSpec):
    """Events plus ground truth: ``(EventSlice, DepthMap at t_start, FlowSequence)``."""
    rng = np.random.default_rng(spec.seed)
    k = spec.intrinsics
    chain = _cumulative(spec.poses)
    bin_us = spec.duration_us // spec.bins

    feats = []
    for plane in spec.planes:
        x0, y0, x1, y1 = plane.region
        n = int(round(plane.density * (x1 - x0) * (y1 - y0)))
        u = rng.uniform(x0, x1, n)
        v = rng.uniform(y0, y1, n)
        feats.append(plane.depth * np.stack([(u - k.cx) / k.fx, (v - k.cy) / k.fy, np.ones(n)], axis=1))
    points = np.concatenate(feats) if feats else np.zeros((0, 3))
    n_feat = len(points)

    # jittered emission times, one row per feature
    n_slots = int(np.ceil(spec.duration_us * 1e-6 * spec.event_rate)) + 1
    offset = (np.arange(n_slots)[None, :] + rng.random((n_feat, n_slots))) / spec.event_rate
    t_us = np.floor(offset * 1e6).astype(np.int64)
    first_pol = rng.choice([-1, 1], n_feat)
    live = t_us < spec.duration_us

    b = np.minimum(t_us // bin_us, spec.bins - 1)
    frac = (t_us - b * bin_us) / bin_us
    px = np.full(t_us.shape, -1.0)
    py = np.full(t_us.shape, -1.0)
    for i, pose in enumerate(spec.poses):
        rot0, t0 = chain[i]
        start = points @ rot0.T + t0  # feature positions at the bin's start
        sel = live & (b == i)
        fi, si = np.nonzero(sel)
        alpha = frac[fi, si]
        q = _rotate_partial(pose.omega, alpha, start[fi]) + alpha[:, None] * np.asarray(pose.t, float)
        ok = q[:, 2] > 0
        z = np.where(ok, q[:, 2], 1.0)
        px[fi, si] = np.where(ok, k.fx * q[:, 0] / z + k.cx, -1.0)
        py[fi, si] = np.where(ok, k.fy * q[:, 1] / z + k.cy, -1.0)

    col = np.rint(px)
    row = np.rint(py)
    in_frame = (col >= 0) & (col <= spec.width - 1) & (row >= 0) & (row <= spec.height - 1)
    # once a feature leaves the frame it stays silent
    keep = live & (np.cumsum(~in_frame & live, axis=1) == 0)
    pol = np.where(np.arange(n_slots)[None, :] % 2 == 0, first_pol[:, None], -first_pol[:, None])

    t_all = t_us[keep] + spec.t_start_us
    order = np.argsort(t_all, kind="stable")
    events = EventSlice(
        t_all[order], col[keep][order].astype(np.int64), row[keep][order].astype(np.int64),
        pol[keep][order], spec.width, spec.height,
        spec.t_start_us, spec.t_start_us + spec.duration_us,
    )
    return events, render_depth(spec, *chain[0]), ground_truth_flows(spec)
