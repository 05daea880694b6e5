"""Rigid-motion geometry: Rodrigues rotations, reprojection, depth + pose to
optical flow, and the geometry-consistency loss between two depth maps.

Pose convention: a :class:`PoseStep` maps points from the earlier camera frame
to the later one, ``X' = R(omega) X + t``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import CameraIntrinsics, DepthMap, FlowSequence, PoseStep, check_same_shape

SMALL_ANGLE = 1e-8
BORDER_TOLERANCE = 1e-9  # px


def skew(v) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def rodrigues(omega) -> np.ndarray:
    """Rotation matrix for an axis-angle vector (radians)."""
    omega = np.asarray(omega, dtype=np.float64)
    theta = float(np.linalg.norm(omega))
    wx = skew(omega)
    if theta < SMALL_ANGLE:
        return np.eye(3) + wx + 0.5 * wx @ wx
    return (
        np.eye(3)
        + (np.sin(theta) / theta) * wx
        + ((1.0 - np.cos(theta)) / theta**2) * wx @ wx
    )


def rodrigues_jacobian(omega) -> np.ndarray:
    """``dR/domega_j`` stacked as ``(3, 3, 3)`` with j first."""
    omega = np.asarray(omega, dtype=np.float64)
    theta2 = float(omega @ omega)
    eye = np.eye(3)
    if theta2 < SMALL_ANGLE**2:
        wx = skew(omega)
        return np.stack([skew(e) + 0.5 * (skew(e) @ wx + wx @ skew(e)) for e in eye])
    rot = rodrigues(omega)
    wx = skew(omega)
    out = []
    for j in range(3):
        v = np.cross(omega, (eye - rot)[:, j])
        out.append((omega[j] * wx + skew(v)) / theta2 @ rot)
    return np.stack(out)


def invert_pose(pose: PoseStep) -> PoseStep:
    rot = rodrigues(pose.omega)
    return PoseStep(-np.asarray(pose.omega, float), -rot.T @ np.asarray(pose.t, float))


def pixel_rays(height, width, k: CameraIntrinsics) -> np.ndarray:
    """``K^-1 [x, y, 1]`` for every pixel, shaped ``(H, W, 3)``."""
    ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
    return np.stack([(xs - k.cx) / k.fx, (ys - k.cy) / k.fy, np.ones_like(xs)], axis=-1)


def reproject(x, y, depth, pose: PoseStep, k: CameraIntrinsics):
    """Move pixels with known depth through a rigid motion.

    Works on scalars or arrays. Returns ``(x', y', z', valid)`` where ``valid``
    is False for points that end up at or behind the camera plane.
    """
    x, y, depth = np.broadcast_arrays(*(np.asarray(a, dtype=np.float64) for a in (x, y, depth)))
    ray = np.stack([(x - k.cx) / k.fx, (y - k.cy) / k.fy, np.ones_like(x)], axis=-1)
    q = (depth[..., None] * ray) @ rodrigues(pose.omega).T + np.asarray(pose.t, float)
    z = q[..., 2]
    valid = z > 0
    safe = np.where(valid, z, 1.0)
    return k.fx * q[..., 0] / safe + k.cx, k.fy * q[..., 1] / safe + k.cy, z, valid


@dataclass
class Reprojection:
    """Dense reprojection of a depth grid plus what the chain rule needs."""

    x: np.ndarray  # (H, W) target column
    y: np.ndarray
    z: np.ndarray
    valid: np.ndarray
    points: np.ndarray  # (H, W, 3) back-projected source points
    moved: np.ndarray  # (H, W, 3) transformed points
    rot: np.ndarray
    rays: np.ndarray

    def projection_jacobian(self, k: CameraIntrinsics):
        """``d(x', y')/dQ`` as two ``(H, W, 3)`` arrays."""
        z = np.where(self.valid, self.z, 1.0)
        qx, qy = self.moved[..., 0], self.moved[..., 1]
        zero = np.zeros_like(z)
        dx = np.stack([k.fx / z, zero, -k.fx * qx / z**2], axis=-1)
        dy = np.stack([zero, k.fy / z, -k.fy * qy / z**2], axis=-1)
        return dx, dy

    def point_jacobians(self, pose: PoseStep):
        """``dQ/dD`` (H, W, 3) and ``dQ/d[omega, t]`` (H, W, 3, 6)."""
        d_depth = self.rays @ self.rot.T
        d_rot = np.einsum("jab,hwb->hwaj", rodrigues_jacobian(pose.omega), self.points)
        d_t = np.broadcast_to(np.eye(3), self.points.shape + (3,))
        return d_depth, np.concatenate([d_rot, d_t], axis=-1)


def reproject_grid(depth, pose: PoseStep, k: CameraIntrinsics) -> Reprojection:
    depth = np.asarray(depth, dtype=np.float64)
    rays = pixel_rays(*depth.shape, k)
    rot = rodrigues(pose.omega)
    points = depth[..., None] * rays
    moved = points @ rot.T + np.asarray(pose.t, float)
    z = moved[..., 2]
    valid = z > 0
    safe = np.where(valid, z, 1.0)
    return Reprojection(
        k.fx * moved[..., 0] / safe + k.cx, k.fy * moved[..., 1] / safe + k.cy,
        z, valid, points, moved, rot, rays,
    )


def depth_pose_to_flows(depth: DepthMap, poses, k: CameraIntrinsics, edges, return_mask=False):
    """Per-bin flow (px/s) induced by a static depth map and one pose per bin.

    Pixels whose reprojection is invalid (behind the camera, or invalid depth)
    get zero flow; ``return_mask=True`` also returns the ``(B, H, W)`` validity.
    """
    edges = np.asarray(edges, dtype=np.float64)
    if len(poses) != len(edges) - 1:
        raise ValueError(f"{len(poses)} poses for {len(edges) - 1} bins")
    h, w = depth.shape
    dt = np.diff(edges) * 1e-6
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    u = np.zeros((len(poses), h, w, 2))
    mask = np.zeros((len(poses), h, w), bool)
    for i, pose in enumerate(poses):
        rp = reproject_grid(depth.d, pose, k)
        ok = rp.valid & depth.mask
        u[i, ..., 0] = np.where(ok, (rp.x - xs) / dt[i], 0.0)
        u[i, ..., 1] = np.where(ok, (rp.y - ys) / dt[i], 0.0)
        mask[i] = ok
    flows = FlowSequence(u, edges)
    return (flows, mask) if return_mask else flows


def flow_gradients_to_depth_pose(flow_grad, depth, poses, k: CameraIntrinsics, edges):
    """Chain ``dL/du`` (B, H, W, 2) back to the depth grid and each pose.

    Returns ``(d_depth (H, W), d_poses (B, 6))`` with pose gradients ordered
    ``[omega, t]``.
    """
    depth = np.asarray(depth, dtype=np.float64)
    dt = np.diff(np.asarray(edges, dtype=np.float64)) * 1e-6
    d_depth = np.zeros(depth.shape)
    d_poses = np.zeros((len(poses), 6))
    for i, pose in enumerate(poses):
        rp = reproject_grid(depth, pose, k)
        jx, jy = rp.projection_jacobian(k)
        g = np.where(rp.valid[..., None], flow_grad[i], 0.0) / dt[i]
        # dL/dQ for every pixel
        dq = g[..., :1] * jx + g[..., 1:] * jy
        q_depth, q_pose = rp.point_jacobians(pose)
        d_depth += np.einsum("hwa,hwa->hw", dq, q_depth)
        d_poses[i] = np.einsum("hwa,hwaj->j", dq, q_pose)
    return d_depth, d_poses


# --- geometry consistency -----------------------------------------------------


@dataclass
class GeoLossTerms:
    """Per-pixel pieces of the consistency loss, indexed by source pixel.

    ``projected`` is the depth of the forward-projected source point,
    ``interpolated`` the target depth map sampled at the projected location,
    ``valid`` marks the source pixels that won their target pixel and are
    visible in both maps.
    """

    projected: np.ndarray
    interpolated: np.ndarray
    valid: np.ndarray

    @property
    def empty(self) -> bool:
        return not self.valid.any()


@dataclass
class GeoLoss:
    value: float
    terms: GeoLossTerms
    d_d0: np.ndarray | None = None
    d_d1: np.ndarray | None = None
    d_pose: np.ndarray | None = None


def _bilinear_stencil(x, y, h, w):
    x0 = np.clip(np.floor(x), 0, w - 2).astype(int)
    y0 = np.clip(np.floor(y), 0, h - 2).astype(int)
    fx, fy = x - x0, y - y0
    cells = [(y0, x0), (y0, x0 + 1), (y0 + 1, x0), (y0 + 1, x0 + 1)]
    weights = [(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy]
    dwdx = [-(1 - fy), 1 - fy, -fy, fy]
    dwdy = [-(1 - fx), -fx, 1 - fx, fx]
    return cells, weights, dwdx, dwdy


def geometry_consistency_loss(d0: DepthMap, d1: DepthMap, pose: PoseStep, k: CameraIntrinsics,
                              need_grad=False) -> GeoLoss:
    """Mean of ``|P - I| / (P + I)`` over pixels visible in both views.

    ``P`` is ``d0`` forward-projected by ``pose`` (nearest target pixel, the
    closest surface wins when several land on one pixel) and ``I`` is ``d1``
    bilinearly sampled at the continuous projected location. Returns 0 with an
    empty ``terms.valid`` when nothing is visible. With ``need_grad`` the
    gradients w.r.t. both depth grids and the pose vector ``[omega, t]`` are
    filled in, holding the winner assignment fixed.
    """
    check_same_shape(d0, d1)
    h, w = d0.shape
    rp = reproject_grid(d0.d, pose, k)
    # border pixels mapped onto themselves can land a rounding error outside
    tol = BORDER_TOLERANCE
    inside = (rp.x >= -tol) & (rp.x <= w - 1 + tol) & (rp.y >= -tol) & (rp.y <= h - 1 + tol)
    cand = d0.mask & rp.valid & inside
    rp.x = np.clip(rp.x, 0, w - 1)
    rp.y = np.clip(rp.y, 0, h - 1)
    # snap rounding noise onto the grid so a pixel mapped onto itself samples only itself
    for c in (rp.x, rp.y):
        snap = np.abs(c - np.rint(c)) < tol
        c[snap] = np.rint(c[snap])
    cells, weights, dwdx, dwdy = _bilinear_stencil(
        np.where(cand, rp.x, 0.0), np.where(cand, rp.y, 0.0), h, w)
    for cy, cx in cells:
        cand &= d1.mask[cy, cx]

    # z-buffer: nearest target pixel, smallest projected depth wins
    src = np.flatnonzero(cand)
    target = np.rint(rp.y.ravel()[src]).astype(int) * w + np.rint(rp.x.ravel()[src]).astype(int)
    order = np.lexsort((rp.z.ravel()[src], target))
    first = np.ones(len(order), bool)
    first[1:] = target[order][1:] != target[order][:-1]
    valid = np.zeros(h * w, bool)
    valid[src[order[first]]] = True
    valid = valid.reshape(h, w)

    interp = sum(wt * d1.d[cy, cx] for (cy, cx), wt in zip(cells, weights))
    proj = np.where(valid, rp.z, 0.0)
    interp = np.where(valid, interp, 0.0)
    terms = GeoLossTerms(proj, interp, valid)
    n = int(valid.sum())
    if n == 0:
        out = GeoLoss(0.0, terms)
        if need_grad:
            out.d_d0, out.d_d1, out.d_pose = np.zeros((h, w)), np.zeros((h, w)), np.zeros(6)
        return out
    total = np.where(valid, proj + interp, 1.0)
    diff = proj - interp
    value = float(np.sum(np.where(valid, np.abs(diff) / total, 0.0)) / n)
    out = GeoLoss(value, terms)
    if not need_grad:
        return out

    sign = np.sign(diff)
    g_proj = np.where(valid, sign * 2 * interp / total**2, 0.0) / n
    g_interp = np.where(valid, -sign * 2 * proj / total**2, 0.0) / n

    d_d1 = np.zeros((h, w))
    for (cy, cx), wt in zip(cells, weights):
        np.add.at(d_d1, (cy[valid], cx[valid]), (g_interp * wt)[valid])
    # interpolated depth moves with the projected location
    didx = sum(dx * d1.d[cy, cx] for (cy, cx), dx in zip(cells, dwdx))
    didy = sum(dy * d1.d[cy, cx] for (cy, cx), dy in zip(cells, dwdy))
    jx, jy = rp.projection_jacobian(k)
    dq = (g_interp * didx)[..., None] * jx + (g_interp * didy)[..., None] * jy
    dq[..., 2] += g_proj  # projected depth is Q_z
    q_depth, q_pose = rp.point_jacobians(pose)
    out.d_d0 = np.where(valid, np.einsum("hwa,hwa->hw", dq, q_depth), 0.0)
    out.d_d1 = d_d1
    out.d_pose = np.einsum("hwa,hwaj->j", np.where(valid[..., None], dq, 0.0), q_pose)
    return out


def total_loss(l_cm, l_geo, weight=0.05) -> float:
    """Contrast loss plus weighted geometry-consistency loss."""
    return l_cm + weight * l_geo
