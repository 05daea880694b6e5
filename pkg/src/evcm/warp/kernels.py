"""Bilinear sampling/splatting primitives.

Two flavours of each: scalar versions operating on one event (used by the
per-event baseline and as readable references), and vectorized versions over
arrays of positions.

Stencil convention: for a position ``x`` in ``[0, W-1]`` the left cell is
``min(floor(x), W-2)``, so ``x == W-1`` lands on the right cell with weight 1.
"""

from __future__ import annotations

import math

import numpy as np

from ..core import FlowSequence


def _left_cell(x, size):
    i = math.floor(x)
    if i > size - 2:
        i = size - 2
    if i < 0:
        i = 0
    return i


def sample_flow(u, x, y):
    """Bilinearly sample one ``(H, W, 2)`` flow field at ``(x, y)``.

    Positions outside the grid are clamped to the border.
    Returns ``(ux, uy)``.
    """
    h, w = u.shape[0], u.shape[1]
    xc = min(max(x, 0.0), w - 1.0)
    yc = min(max(y, 0.0), h - 1.0)
    x0 = _left_cell(xc, w)
    y0 = _left_cell(yc, h)
    x1 = min(x0 + 1, w - 1)
    y1 = min(y0 + 1, h - 1)
    fx, fy = xc - x0, yc - y0
    w00, w10, w01, w11 = (1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy
    a, b, c, d = u[y0, x0], u[y0, x1], u[y1, x0], u[y1, x1]
    return (
        float(w00 * a[0] + w10 * b[0] + w01 * c[0] + w11 * d[0]),
        float(w00 * a[1] + w10 * b[1] + w01 * c[1] + w11 * d[1]),
    )


def warp_event(pos, t_from, t_to, flows: FlowSequence):
    """Push a sub-pixel position from ``t_from`` to ``t_to`` (seconds).

    The position is advanced one bin at a time, sampling the bin's flow at the
    current position; backward warps take negative time steps.
    """
    x, y = float(pos[0]), float(pos[1])
    edges = flows.edges * 1e-6
    nb = flows.bins
    t = float(t_from)
    if t_to >= t:
        i = min(max(int(np.searchsorted(edges, t, side="right")) - 1, 0), nb - 1)
        while t < t_to:
            t_next = min(edges[i + 1], t_to) if i < nb - 1 else t_to
            ux, uy = sample_flow(flows.u[i], x, y)
            x, y = x + (t_next - t) * ux, y + (t_next - t) * uy
            t, i = t_next, i + 1
    else:
        i = min(max(int(np.searchsorted(edges, t, side="left")) - 1, 0), nb - 1)
        while t > t_to:
            t_next = max(edges[i], t_to) if i > 0 else t_to
            ux, uy = sample_flow(flows.u[i], x, y)
            x, y = x + (t_next - t) * ux, y + (t_next - t) * uy
            t, i = t_next, i - 1
    return (x, y)


def splat_bilinear(pos, weight, value, count, acc):
    """Scatter one event into ``count`` and ``acc`` (both ``(H, W)``, in place).

    ``pos`` must lie inside ``[0, W-1] x [0, H-1]``.
    """
    h, w = count.shape
    x, y = float(pos[0]), float(pos[1])
    if not (0.0 <= x <= w - 1 and 0.0 <= y <= h - 1):
        raise ValueError(f"splat position {pos} outside the {w}x{h} image")
    x0, y0 = _left_cell(x, w), _left_cell(y, h)
    x1, y1 = min(x0 + 1, w - 1), min(y0 + 1, h - 1)
    fx, fy = x - x0, y - y0
    for (cx, cy, wb) in (
        (x0, y0, (1 - fx) * (1 - fy)),
        (x1, y0, fx * (1 - fy)),
        (x0, y1, (1 - fx) * fy),
        (x1, y1, fx * fy),
    ):
        count[cy, cx] += weight * wb
        acc[cy, cx] += weight * wb * value


# --- vectorized ---------------------------------------------------------------


class Stencil:
    """Bilinear stencil for an array of positions ``(N, 2)``.

    ``idx`` holds the four flat pixel indices (N, 4) in the order
    (x0,y0), (x1,y0), (x0,y1), (x1,y1); ``w`` the matching weights; ``dwdx``,
    ``dwdy`` their derivatives w.r.t. the position. Positions are clamped into
    the grid first; ``clamped_x``/``clamped_y`` mark where that happened.
    """

    __slots__ = ("idx", "w", "dwdx", "dwdy", "clamped_x", "clamped_y")

    def __init__(self, pos, height, width, derivatives=False):
        x = pos[:, 0]
        y = pos[:, 1]
        xc = np.clip(x, 0.0, width - 1.0)
        yc = np.clip(y, 0.0, height - 1.0)
        x0 = np.clip(np.floor(xc), 0, max(width - 2, 0)).astype(np.int64)
        y0 = np.clip(np.floor(yc), 0, max(height - 2, 0)).astype(np.int64)
        x1 = np.minimum(x0 + 1, width - 1)
        y1 = np.minimum(y0 + 1, height - 1)
        fx = xc - x0
        fy = yc - y0
        gx, gy = 1.0 - fx, 1.0 - fy
        r0, r1 = y0 * width, y1 * width
        self.idx = np.stack([r0 + x0, r0 + x1, r1 + x0, r1 + x1], axis=1)
        self.w = np.stack([gx * gy, fx * gy, gx * fy, fx * fy], axis=1)
        if derivatives:
            self.clamped_x = (x < 0.0) | (x > width - 1.0)
            self.clamped_y = (y < 0.0) | (y > height - 1.0)
            self.dwdx = np.stack([-gy, gy, -fy, fy], axis=1)
            self.dwdy = np.stack([-gx, -fx, gx, fx], axis=1)
            if width == 1:
                self.dwdx[:] = 0.0
            if height == 1:
                self.dwdy[:] = 0.0
            self.dwdx[self.clamped_x] = 0.0
            self.dwdy[self.clamped_y] = 0.0


def sample_vec(u_flat, st: Stencil):
    """Sample a flattened ``(H*W, 2)`` field with a precomputed stencil -> (N, 2)."""
    vals = u_flat[st.idx]  # (N, 4, 2)
    return np.einsum("nk,nkc->nc", st.w, vals)


def sample_jacobian(u_flat, st: Stencil):
    """d(sampled flow)/d(position): returns (dudx, dudy), each (N, 2)."""
    vals = u_flat[st.idx]
    return np.einsum("nk,nkc->nc", st.dwdx, vals), np.einsum("nk,nkc->nc", st.dwdy, vals)


def in_image(pos, height, width):
    """True where positions (..., 2) lie in ``[0, W-1] x [0, H-1]``."""
    x, y = pos[..., 0], pos[..., 1]
    return (x >= 0.0) & (x <= width - 1.0) & (y >= 0.0) & (y <= height - 1.0)
