"""Finite-difference oracle for the flow gradient.

The reference forward here is written independently of the warp backends: it
evaluates the loss for a whole batch of perturbed flow sequences at once, so a
central difference on every flow cell costs two batched passes instead of two
passes per cell.
"""

from __future__ import annotations

import numpy as np

from .core import EventSlice, FlowSequence
from .warp import WarpWindow, loss_and_grad
from .warp.window import EPS


def _sample(u_batch, b, x, y):
    """Sample flow bin ``b`` (n,) of every batch member at (P, n) positions."""
    P, _, h, w, _ = u_batch.shape
    x = np.clip(x, 0, w - 1)
    y = np.clip(y, 0, h - 1)
    x0 = np.minimum(np.floor(x), w - 2).clip(0).astype(int)
    y0 = np.minimum(np.floor(y), h - 2).clip(0).astype(int)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    ax, ay = (x - x0)[..., None], (y - y0)[..., None]
    pb = np.arange(P)[:, None]
    bb = np.broadcast_to(b, x.shape)
    return (
        u_batch[pb, bb, y0, x0] * (1 - ax) * (1 - ay)
        + u_batch[pb, bb, y0, x1] * ax * (1 - ay)
        + u_batch[pb, bb, y1, x0] * (1 - ax) * ay
        + u_batch[pb, bb, y1, x1] * ax * ay
    )


def reference_positions(slice_: EventSlice, edges, u_batch):
    """Warped coordinates (P, n, B+1) of every event at every bin edge."""
    P, nb, h, w, _ = u_batch.shape
    edges = np.asarray(edges, dtype=np.float64)
    t = slice_.t.astype(np.float64)
    n = len(t)
    k_bin = np.clip(np.searchsorted(edges, t, side="right") - 1, 0, nb - 1)
    px = np.empty((P, n, nb + 1))
    py = np.empty((P, n, nb + 1))
    for ref in range(nb + 1):
        # walk every event from its own timestamp to this reference, bin by bin
        xs = np.broadcast_to(slice_.x.astype(np.float64), (P, n)).copy()
        ys = np.broadcast_to(slice_.y.astype(np.float64), (P, n)).copy()
        forward = ref > k_bin
        for s in range(nb):
            b = np.where(forward, k_bin + s, k_bin - s)
            live = np.where(forward, b < ref, b >= ref)
            if not live.any():
                break
            b = np.clip(b, 0, nb - 1)
            if s == 0:
                dt_us = np.where(forward, edges[b + 1] - t, edges[b] - t)
            else:
                dt_us = np.where(forward, edges[b + 1] - edges[b], edges[b] - edges[b + 1])
            dt = np.where(live, dt_us * 1e-6, 0.0)
            uv = _sample(u_batch, b, xs, ys)
            xs = xs + dt * uv[..., 0]
            ys = ys + dt * uv[..., 1]
        px[:, :, ref] = xs
        py[:, :, ref] = ys
    return px, py


def reference_losses(slice_: EventSlice, edges, u_batch) -> np.ndarray:
    """Contrast loss for every flow sequence in ``u_batch`` (P, B, H, W, 2)."""
    P, nb, h, w, _ = u_batch.shape
    edges = np.asarray(edges, dtype=np.float64)
    t = slice_.t.astype(np.float64)
    if len(t) == 0:
        return np.zeros(P)
    px, py = reference_positions(slice_, edges, u_batch)
    inside = ((px >= 0) & (px <= w - 1) & (py >= 0) & (py <= h - 1)).all(axis=2)  # (P, n)
    tbar = np.abs(t[:, None] - edges[None, :]) / (edges[-1] - edges[0])
    pol = (slice_.p < 0).astype(int)
    losses = np.zeros(P)
    size = P * 2 * h * w
    for ref in range(nb + 1):
        xr = np.clip(px[:, :, ref], 0, w - 1)
        yr = np.clip(py[:, :, ref], 0, h - 1)
        xa = np.minimum(np.floor(xr), w - 2).clip(0).astype(int)
        ya = np.minimum(np.floor(yr), h - 2).clip(0).astype(int)
        fx, fy = xr - xa, yr - ya
        cnt = np.zeros(size)
        acc = np.zeros(size)
        for dx, dy, wt in ((0, 0, (1 - fx) * (1 - fy)), (1, 0, fx * (1 - fy)),
                           (0, 1, (1 - fx) * fy), (1, 1, fx * fy)):
            cells = (ya + dy) * w + (xa + dx)
            wt = np.where(inside, wt, 0.0)
            flat = ((np.arange(P)[:, None] * 2 + pol[None, :]) * (h * w) + cells).ravel()
            cnt += np.bincount(flat, wt.ravel(), minlength=size)
            acc += np.bincount(flat, (wt * tbar[None, :, ref]).ravel(), minlength=size)
        cnt = cnt.reshape(P, 2, h * w)
        acc = acc.reshape(P, 2, h * w)
        avg = acc / (cnt + EPS)
        active = (cnt.sum(axis=1) > 0).sum(axis=1)
        losses += (avg ** 2).sum(axis=(1, 2)) / (active + EPS)
    survived = inside.any(axis=1)
    return np.where(survived, losses / (nb + 1), 0.0)


# fourth-order central stencil: offsets and weights (divide by step)
_STENCIL = ((2.0, -1.0 / 12), (1.0, 8.0 / 12), (-1.0, -8.0 / 12), (-2.0, 1.0 / 12))


def fd_flow_gradient(window: WarpWindow, step=1e-2, batch=256) -> np.ndarray:
    """Central finite differences (fourth order) of the loss w.r.t. every flow cell."""
    u = window.flows.u
    cells = list(np.ndindex(u.shape))
    grad = np.zeros(u.size)
    k = len(_STENCIL)
    for lo in range(0, len(cells), batch):
        chunk = cells[lo:lo + batch]
        ub = np.repeat(u[None], k * len(chunk), axis=0)
        for j, c in enumerate(chunk):
            for i, (off, _) in enumerate(_STENCIL):
                ub[(k * j + i,) + c] += off * step
        losses = reference_losses(window.slice, window.flows.edges, ub).reshape(len(chunk), k)
        weights = np.array([wt for _, wt in _STENCIL])
        grad[lo:lo + len(chunk)] = losses @ weights / step
    return grad.reshape(u.shape)


def relative_error(analytic, reference) -> float:
    """Max absolute deviation normalized by the largest reference magnitude."""
    scale = float(np.max(np.abs(reference))) if np.size(reference) else 0.0
    diff = float(np.max(np.abs(np.asarray(analytic) - np.asarray(reference)))) if np.size(reference) else 0.0
    if scale == 0.0:
        return diff
    return diff / scale


def grid_clearance(window: WarpWindow) -> float:
    """Smallest distance of any warped coordinate to an integer grid line."""
    if len(window.slice) == 0:
        return np.inf
    px, py = reference_positions(window.slice, window.flows.edges, window.flows.u[None])
    both = np.concatenate([px.ravel(), py.ravel()])
    return float(np.min(np.abs(both - np.round(both))))


def random_window(rng, height=8, width=8, bins=3, n_events=20, flow_std=20.0,
                  bin_us=10_000, margin=2, clearance=1e-3) -> WarpWindow:
    """Small random instance with events away from the border.

    Draws are rejected until every warped coordinate stays ``clearance`` px
    away from integer grid lines (which include the image border). Bilinear
    splatting and sampling have kinks there, and a splat weight near ``EPS``
    makes the loss vary on a scale no finite difference can resolve.
    """
    t_end = bins * bin_us
    while True:
        # timestamps off bin edges, where events would land on integer pixels
        t = np.sort(rng.integers(0, bins, n_events) * bin_us + rng.integers(1, bin_us, n_events))
        x = rng.integers(margin, width - margin, n_events)
        y = rng.integers(margin, height - margin, n_events)
        p = rng.choice([-1, 1], n_events)
        s = EventSlice(t, x, y, p, width, height, 0, t_end)
        u = rng.normal(0.0, flow_std, (bins, height, width, 2))
        window = WarpWindow(s, FlowSequence.uniform(u, 0, t_end))
        if grid_clearance(window) >= clearance:
            return window


def safe_step(window: WarpWindow, floor=1e-2, cap=1.0) -> float:
    """Largest FD step (px/s) whose stencil keeps every warped point off the grid lines.

    The outermost stencil point moves an event by at most about
    ``2 * step * span`` px, so a quarter of the grid clearance is kept as
    margin. Larger steps beat roundoff when the gradient itself is tiny.
    """
    span_s = (window.flows.edges[-1] - window.flows.edges[0]) * 1e-6
    return float(np.clip(grid_clearance(window) / (8.0 * span_s), floor, cap))


def check_flow_gradient(window: WarpWindow, backend="parallel", step=None) -> float:
    _, analytic, _ = loss_and_grad(window, backend)
    return relative_error(analytic, fd_flow_gradient(window, safe_step(window) if step is None else step))


def random_instance(rng, max_side=16, max_events=50, max_bins=3):
    """Flow instance with random size inside the given bounds."""
    height = int(rng.integers(6, max_side + 1))
    width = int(rng.integers(6, max_side + 1))
    bins = int(rng.integers(1, max_bins + 1))
    n = int(rng.integers(1, max_events + 1))
    return random_window(rng, height, width, bins, n)


def random_predictor_instance(rng, height=12, width=12, bins=2, factor=4, n_events=40,
                              bin_us=10_000, clearance=1e-3):
    """``(predictor, slice, intrinsics)`` whose decoded flows keep events off grid lines."""
    from .core import CameraIntrinsics
    from .geometry import depth_pose_to_flows
    from .predictor import DirectPredictor

    k = CameraIntrinsics(10.0, 10.0, (width - 1) / 2, (height - 1) / 2)
    t_end = bins * bin_us
    edges = np.linspace(0, t_end, bins + 1)
    while True:
        pred = DirectPredictor.create(height, width, bins, factor)
        pred.depth_params[:] = rng.normal(1.0, 0.2, pred.depth_params.shape)
        pred.pose_params[:, :3] = rng.normal(0.0, 0.01, (bins, 3))
        pred.pose_params[:, 3:] = rng.normal(0.0, 0.02, (bins, 3))
        t = np.sort(rng.integers(0, bins, n_events) * bin_us + rng.integers(1, bin_us, n_events))
        s = EventSlice(t, rng.integers(2, width - 2, n_events), rng.integers(2, height - 2, n_events),
                       rng.choice([-1, 1], n_events), width, height, 0, t_end)
        depth, poses = pred.decode()
        flows = depth_pose_to_flows(depth, poses, k, edges)
        if grid_clearance(WarpWindow(s, flows)) >= clearance:
            return pred, s, k


def check_predictor_gradient(pred, slice_, k, lambda_geo=0.05, backend="parallel", step=1e-6) -> float:
    """Analytic vs central-difference gradient of the total loss over every parameter."""
    from .optimize import predictor_fd_gradient, predictor_objective

    obj = predictor_objective(pred, slice_, k, lambda_geo, backend)
    analytic = np.concatenate([obj.d_depth_params.ravel(), obj.d_pose_params.ravel()])
    fd = predictor_fd_gradient(pred, slice_, k, lambda_geo, backend, step)
    return relative_error(analytic, np.array([fd[i] for i in range(analytic.size)]))
