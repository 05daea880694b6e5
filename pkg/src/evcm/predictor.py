"""Direct parametric depth + ego-motion predictor.

A low-resolution grid of unconstrained depth parameters (softplus, then
bilinear upsampling to sensor resolution) and six pose parameters per bin.
"""

from __future__ import annotations

import csv
from functools import lru_cache
from pathlib import Path

import numpy as np

from .core import CameraIntrinsics, DepthMap, PoseStep, read_pfm, write_pfm
from .geometry import flow_gradients_to_depth_pose

MIN_DEPTH = 1e-12
POSE_COLUMNS = ("wx", "wy", "wz", "tx", "ty", "tz")


def softplus(p):
    return np.logaddexp(0.0, p)


def softplus_grad(p):
    # logistic sigmoid, written to avoid overflow for large |p|
    return np.exp(-np.logaddexp(0.0, -p))


@lru_cache(maxsize=64)
def upsample_matrix(n_out, n_in) -> np.ndarray:
    """Linear interpolation along one axis, pixel-centre aligned.

    Output sample ``i`` sits at input coordinate ``(i + 0.5) * n_in / n_out - 0.5``,
    clamped to the valid range.
    """
    m = np.zeros((n_out, n_in))
    src = np.clip((np.arange(n_out) + 0.5) * n_in / n_out - 0.5, 0, n_in - 1)
    lo = np.minimum(np.floor(src).astype(int), max(n_in - 2, 0))
    frac = src - lo
    rows = np.arange(n_out)
    m[rows, lo] += 1 - frac
    if n_in > 1:
        m[rows, lo + 1] += frac
    m.setflags(write=False)
    return m


class DirectPredictor:
    """Optimizable stand-in for a depth + pose network.

    Args:
        depth_params: ``(h, w)`` unconstrained grid; depth is softplus of it.
        pose_params: ``(B, 6)`` rows of ``[omega, t]``.
        height, width: output resolution.
        rotation: when False the rotation parameters are held at zero.
    """

    def __init__(self, depth_params, pose_params, height, width, rotation=True):
        self.depth_params = np.array(depth_params, dtype=np.float64)
        self.pose_params = np.array(pose_params, dtype=np.float64).reshape(-1, 6)
        if self.depth_params.ndim != 2:
            raise ValueError("depth_params must be a 2-D grid")
        if not (np.all(np.isfinite(self.depth_params)) and np.all(np.isfinite(self.pose_params))):
            raise ValueError("predictor parameters must be finite")
        self.height, self.width = int(height), int(width)
        self.rotation = bool(rotation)
        if not self.rotation:
            self.pose_params[:, :3] = 0.0

    @classmethod
    def create(cls, height, width, bins, factor=8, depth_init=0.0, rotation=True):
        h = max(1, round(height / factor))
        w = max(1, round(width / factor))
        return cls(np.full((h, w), float(depth_init)), np.zeros((bins, 6)), height, width, rotation)

    @property
    def bins(self):
        return len(self.pose_params)

    @property
    def n_params(self):
        return self.depth_params.size + self.pose_params.size

    def copy(self) -> "DirectPredictor":
        return DirectPredictor(self.depth_params, self.pose_params, self.height, self.width, self.rotation)

    def _up(self):
        h, w = self.depth_params.shape
        return upsample_matrix(self.height, h), upsample_matrix(self.width, w)

    def depth_array(self) -> np.ndarray:
        up_y, up_x = self._up()
        return np.maximum(up_y @ softplus(self.depth_params) @ up_x.T, MIN_DEPTH)

    def decode(self):
        """Full-resolution depth map and the per-bin poses."""
        poses = [PoseStep.from_vector(v) for v in self.pose_params]
        return DepthMap(self.depth_array()), poses

    def depth_to_params_grad(self, d_depth) -> np.ndarray:
        """Pull a full-resolution depth gradient back to ``depth_params``."""
        up_y, up_x = self._up()
        return (up_y.T @ d_depth @ up_x) * softplus_grad(self.depth_params)

    def accumulate_gradients(self, flow_grad, k: CameraIntrinsics, edges,
                             depth_grad=None, pose_grad=None):
        """Chain ``dL/du`` and any direct depth / pose gradients to the parameters.

        ``flow_grad`` is ``(B, H, W, 2)``; ``depth_grad`` is at full resolution.
        Returns ``(d_depth_params, d_pose_params)``.
        """
        depth, poses = self.decode()
        if flow_grad is None:
            d_depth = np.zeros((self.height, self.width))
            d_pose = np.zeros_like(self.pose_params)
        else:
            d_depth, d_pose = flow_gradients_to_depth_pose(flow_grad, depth.d, poses, k, edges)
        if depth_grad is not None:
            d_depth = d_depth + depth_grad
        if pose_grad is not None:
            d_pose = d_pose + pose_grad
        if not self.rotation:
            d_pose = d_pose.copy()
            d_pose[:, :3] = 0.0
        return self.depth_to_params_grad(d_depth), d_pose

    def save(self, prefix) -> None:
        """Checkpoint: ``<prefix>_depth.pfm`` plus ``<prefix>_poses.csv``.

        The PFM stores float32, so a round trip rounds the depth parameters.
        """
        write_pfm(f"{prefix}_depth.pfm", self.depth_params)
        with open(f"{prefix}_poses.csv", "w", newline="") as f:
            out = csv.writer(f)
            out.writerow(["bin", *POSE_COLUMNS, "height", "width", "rotation"])
            for i, row in enumerate(self.pose_params):
                out.writerow([i, *(repr(float(v)) for v in row), self.height, self.width, int(self.rotation)])

    @classmethod
    def load(cls, prefix) -> "DirectPredictor":
        params = read_pfm(f"{prefix}_depth.pfm").astype(np.float64)
        with open(Path(f"{prefix}_poses.csv"), newline="") as f:
            rows = list(csv.DictReader(f))
        if not rows:
            raise ValueError("pose checkpoint has no bins")
        poses = [[float(r[c]) for c in POSE_COLUMNS] for r in rows]
        first = rows[0]
        return cls(params, poses, int(first["height"]), int(first["width"]), bool(int(first["rotation"])))
