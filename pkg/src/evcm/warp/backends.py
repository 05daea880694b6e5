"""Interchangeable execution strategies for the warp/splat/backward kernels.

* ``naive``: one event at a time in a Python loop (the for-loop baseline).
* ``padded``: events grouped per bin and zero-padded to a common length, so a
  fixed fraction of every bin is dummy work; every slot is warped to every
  reference time, including events already outside the image.
* ``parallel``: events split into contiguous chunks processed by a worker pool;
  events stop being warped as soon as they leave the image and only surviving
  events are splatted. Per-chunk buffers are merged in chunk order, which
  makes results bit-identical from run to run.

All three compute the same loss and gradient up to summation order.
"""

from __future__ import annotations

import math
import os
import threading
from concurrent.futures import ThreadPoolExecutor, as_completed
from functools import partial

import numpy as np

from .instrument import NULL_RECORDER
from .kernels import Stencil, _left_cell, in_image, sample_flow, sample_jacobian, sample_vec
from .loss import contrast_loss, loss_seeds
from .window import EventTrajectory, IweStack, WarpWindow

# --- vectorized building blocks -----------------------------------------------


def warp_vec(pos0, bins, step_fwd, step_bwd, durations, u, early_stop):
    """Warp N events to all B+1 reference times.

    Returns ``pos`` (N, B+1, 2). With ``early_stop`` an event is no longer
    advanced once any of its positions left the image; the skipped entries
    stay NaN.
    """
    nb, height, width, _ = u.shape
    u_flat = u.reshape(nb, height * width, 2)
    n = len(pos0)
    pos = np.full((n, nb + 1, 2), np.nan)
    alive = np.ones(n, dtype=bool)
    for i in range(nb):
        own = bins == i
        take = own | (bins < i)
        if early_stop:
            take &= alive
        sel = np.flatnonzero(take)
        if not len(sel):
            continue
        own_s = own[sel]
        src = np.where(own_s[:, None], pos0[sel], pos[sel, i])
        h = np.where(own_s, step_fwd[sel], durations[i])
        new = src + h[:, None] * sample_vec(u_flat[i], Stencil(src, height, width))
        pos[sel, i + 1] = new
        if early_stop:
            alive[sel] &= in_image(new, height, width)
    for i in range(nb - 1, -1, -1):
        own = bins == i
        take = own | (bins > i)
        if early_stop:
            take &= alive
        sel = np.flatnonzero(take)
        if not len(sel):
            continue
        own_s = own[sel]
        src = np.where(own_s[:, None], pos0[sel], pos[sel, i + 1])
        h = np.where(own_s, step_bwd[sel], -durations[i])
        new = src + h[:, None] * sample_vec(u_flat[i], Stencil(src, height, width))
        pos[sel, i] = new
        if early_stop:
            alive[sel] &= in_image(new, height, width)
    return pos


def splat_vec(pos, pol, tbar, weight, stack: IweStack):
    """Accumulate events (positions ``(N, B+1, 2)``) into ``stack`` in place.

    ``weight`` is an optional per-event multiplier (None means all ones).
    """
    refs, _, height, width = stack.counts.shape
    npx = height * width
    cflat = stack.counts.reshape(refs, 2 * npx)
    tflat = stack.tsums.reshape(refs, 2 * npx)
    off = pol[:, None] * npx
    for r in range(refs):
        st = Stencil(pos[:, r], height, width)
        idx = (st.idx + off).ravel()
        w = st.w if weight is None else st.w * weight[:, None]
        cflat[r] += np.bincount(idx, weights=w.ravel(), minlength=2 * npx)
        tflat[r] += np.bincount(idx, weights=(w * tbar[:, r, None]).ravel(), minlength=2 * npx)


def position_grads(pos, pol, tbar, d_counts, d_tsums, weight=None):
    """dL/d(position) at every reference time -> (N, B+1, 2)."""
    refs, _, height, width = d_counts.shape
    npx = height * width
    dc = d_counts.reshape(refs, 2 * npx)
    dt = d_tsums.reshape(refs, 2 * npx)
    off = pol[:, None] * npx
    gpos = np.zeros(pos.shape)
    for r in range(refs):
        st = Stencil(pos[:, r], height, width, derivatives=True)
        idx = st.idx + off
        seed = dc[r][idx] + tbar[:, r, None] * dt[r][idx]
        if weight is not None:
            seed *= weight[:, None]
        gpos[:, r, 0] = np.einsum("nk,nk->n", st.dwdx, seed)
        gpos[:, r, 1] = np.einsum("nk,nk->n", st.dwdy, seed)
    return gpos


def _scatter_flow_grad(grad_i, st, h, adj):
    """grad_i (H*W*2,) += h * w_corner * adjoint, per channel."""
    contrib = (h[:, None] * st.w)[:, :, None] * adj[:, None, :]  # (n, 4, 2)
    idx = (st.idx[:, :, None] * 2 + np.array([0, 1])).ravel()
    grad_i += np.bincount(idx, weights=contrib.ravel(), minlength=grad_i.size)


def _propagate(adj, st, u_flat_i, h):
    dudx, dudy = sample_jacobian(u_flat_i, st)
    ax, ay = adj[:, 0].copy(), adj[:, 1].copy()
    adj[:, 0] += h * (dudx[:, 0] * ax + dudx[:, 1] * ay)
    adj[:, 1] += h * (dudy[:, 0] * ax + dudy[:, 1] * ay)


def backprop_vec(pos0, pos, bins, step_fwd, step_bwd, durations, u, gpos, out=None):
    """Chain position gradients back through the iterative warp.

    Returns the flow gradient ``(B, H, W, 2)``; with ``out`` (same shape) the
    gradient is added into it and ``out`` is returned.
    """
    nb, height, width, _ = u.shape
    u_flat = u.reshape(nb, height * width, 2)
    grad = np.zeros((nb, height * width * 2)) if out is None else out.reshape(nb, height * width * 2)
    n = len(pos0)
    adj = np.zeros((n, 2))
    for i in range(nb - 1, -1, -1):  # forward leg, reversed
        sel = np.flatnonzero(bins <= i)
        if not len(sel):
            continue
        adj[sel] += gpos[sel, i + 1]
        own_s = bins[sel] == i
        src = np.where(own_s[:, None], pos0[sel], pos[sel, i])
        h = np.where(own_s, step_fwd[sel], durations[i])
        st = Stencil(src, height, width, derivatives=True)
        a = adj[sel]
        _scatter_flow_grad(grad[i], st, h, a)
        _propagate(a, st, u_flat[i], h)
        adj[sel] = a
    adj[:] = 0.0
    for i in range(nb):  # backward leg, reversed
        sel = np.flatnonzero(bins >= i)
        if not len(sel):
            continue
        adj[sel] += gpos[sel, i]
        own_s = bins[sel] == i
        src = np.where(own_s[:, None], pos0[sel], pos[sel, i + 1])
        h = np.where(own_s, step_bwd[sel], -durations[i])
        st = Stencil(src, height, width, derivatives=True)
        a = adj[sel]
        _scatter_flow_grad(grad[i], st, h, a)
        _propagate(a, st, u_flat[i], h)
        adj[sel] = a
    return grad.reshape(nb, height, width, 2) if out is None else out


# --- backends -----------------------------------------------------------------


class Backend:
    name = "base"

    def warp(self, window: WarpWindow) -> EventTrajectory:
        raise NotImplementedError

    def splat(self, window: WarpWindow, traj: EventTrajectory) -> IweStack:
        raise NotImplementedError

    def backward(self, window: WarpWindow, traj: EventTrajectory, stack: IweStack) -> np.ndarray:
        raise NotImplementedError

    def __repr__(self):
        return f"{type(self).__name__}()"


class NaiveBackend(Backend):
    """Per-event Python loop: every event is warped, splatted and
    differentiated on its own, allocating its own small intermediates."""

    name = "naive"

    def warp(self, window):
        u = window.flows.u
        height, width = window.shape
        nb = window.bins
        dur = window.durations.tolist()
        n = window.n_events
        pos = np.empty((n, nb + 1, 2))
        inside = np.empty(n, dtype=bool)
        for k in range(n):
            b = int(window.bin[k])
            x0, y0 = window.pos0[k]
            traj = [None] * (nb + 1)
            ux, uy = sample_flow(u[b], x0, y0)
            h = window.step_fwd[k]
            x, y = x0 + h * ux, y0 + h * uy
            traj[b + 1] = (x, y)
            for i in range(b + 1, nb):
                ux, uy = sample_flow(u[i], x, y)
                x, y = x + dur[i] * ux, y + dur[i] * uy
                traj[i + 1] = (x, y)
            ux, uy = sample_flow(u[b], x0, y0)
            h = window.step_bwd[k]
            x, y = x0 + h * ux, y0 + h * uy
            traj[b] = (x, y)
            for i in range(b - 1, -1, -1):
                ux, uy = sample_flow(u[i], x, y)
                x, y = x - dur[i] * ux, y - dur[i] * uy
                traj[i] = (x, y)
            ok = True
            for (x, y) in traj:
                if not (0.0 <= x <= width - 1 and 0.0 <= y <= height - 1):
                    ok = False
            pos[k] = traj
            inside[k] = ok
        return EventTrajectory(pos, inside)

    def splat(self, window, traj):
        height, width = window.shape
        refs = window.bins + 1
        stack = IweStack.zeros(refs, height, width)
        for k in range(window.n_events):
            if not traj.in_bounds[k]:
                continue
            p = int(window.pol[k])
            for r in range(refs):
                x, y = traj.pos[k, r]
                x0, y0 = _left_cell(x, width), _left_cell(y, height)
                x1, y1 = min(x0 + 1, width - 1), min(y0 + 1, height - 1)
                fx, fy = x - x0, y - y0
                tb = window.tbar[k, r]
                cnt, acc = stack.counts[r, p], stack.tsums[r, p]
                for cx, cy, wb in (
                    (x0, y0, (1 - fx) * (1 - fy)),
                    (x1, y0, fx * (1 - fy)),
                    (x0, y1, (1 - fx) * fy),
                    (x1, y1, fx * fy),
                ):
                    cnt[cy, cx] += wb
                    acc[cy, cx] += wb * tb
            stack.n_surviving += 1
        return stack

    def backward(self, window, traj, stack):
        height, width = window.shape
        nb = window.bins
        u = window.flows.u
        dur = window.durations.tolist()
        d_counts, d_tsums = loss_seeds(stack)
        grad = np.zeros(u.shape)
        for k in range(window.n_events):
            if not traj.in_bounds[k]:
                continue
            p = int(window.pol[k])
            b = int(window.bin[k])
            gpos = []
            for r in range(nb + 1):
                x, y = traj.pos[k, r]
                x0, y0 = _left_cell(x, width), _left_cell(y, height)
                x1, y1 = min(x0 + 1, width - 1), min(y0 + 1, height - 1)
                fx, fy = x - x0, y - y0
                tb = window.tbar[k, r]
                dc, dt = d_counts[r, p], d_tsums[r, p]
                s00 = dc[y0, x0] + tb * dt[y0, x0]
                s10 = dc[y0, x1] + tb * dt[y0, x1]
                s01 = dc[y1, x0] + tb * dt[y1, x0]
                s11 = dc[y1, x1] + tb * dt[y1, x1]
                gx = -(1 - fy) * s00 + (1 - fy) * s10 - fy * s01 + fy * s11
                gy = -(1 - fx) * s00 - fx * s10 + (1 - fx) * s01 + fx * s11
                gpos.append((gx, gy))
            x0, y0 = window.pos0[k]
            # forward leg: stages b .. nb-1, reversed
            ax = ay = 0.0
            for i in range(nb - 1, b - 1, -1):
                ax, ay = ax + gpos[i + 1][0], ay + gpos[i + 1][1]
                if i == b:
                    sx, sy, h = x0, y0, window.step_fwd[k]
                else:
                    sx, sy = traj.pos[k, i]
                    h = dur[i]
                ax, ay = _naive_step_adjoint(u[i], grad[i], sx, sy, h, ax, ay, i != b)
            # backward leg: stages b .. 0, reversed
            ax = ay = 0.0
            for i in range(0, b + 1):
                ax, ay = ax + gpos[i][0], ay + gpos[i][1]
                if i == b:
                    sx, sy, h = x0, y0, window.step_bwd[k]
                else:
                    sx, sy = traj.pos[k, i + 1]
                    h = -dur[i]
                ax, ay = _naive_step_adjoint(u[i], grad[i], sx, sy, h, ax, ay, i != b)
        return grad


def _naive_step_adjoint(u, g, x, y, h, ax, ay, propagate):
    """Scatter one warp step's flow gradient; return the adjoint of its input."""
    height, width = u.shape[0], u.shape[1]
    x0, y0 = _left_cell(x, width), _left_cell(y, height)
    x1, y1 = min(x0 + 1, width - 1), min(y0 + 1, height - 1)
    fx, fy = x - x0, y - y0
    corners = ((y0, x0, (1 - fx) * (1 - fy)), (y0, x1, fx * (1 - fy)),
               (y1, x0, (1 - fx) * fy), (y1, x1, fx * fy))
    for cy, cx, wb in corners:
        g[cy, cx, 0] += h * wb * ax
        g[cy, cx, 1] += h * wb * ay
    if not propagate:
        return ax, ay
    a, b, c, d = u[y0, x0], u[y0, x1], u[y1, x0], u[y1, x1]
    dudx = [(1 - fy) * (b[j] - a[j]) + fy * (d[j] - c[j]) for j in (0, 1)]
    dudy = [(1 - fx) * (c[j] - a[j]) + fx * (d[j] - b[j]) for j in (0, 1)]
    if width == 1:
        dudx = [0.0, 0.0]
    if height == 1:
        dudy = [0.0, 0.0]
    return (
        ax + h * (dudx[0] * ax + dudx[1] * ay),
        ay + h * (dudy[0] * ax + dudy[1] * ay),
    )


class PaddedTrajectory(EventTrajectory):
    """Trajectory that also keeps the padded slot layout for later phases."""

    def __init__(self, pos, in_bounds, slots, slot_pos, slot_valid):
        super().__init__(pos, in_bounds)
        self.slots = slots  # dict of per-slot arrays
        self.slot_pos = slot_pos
        self.slot_valid = slot_valid  # real event and inside the image


class PaddedBackend(Backend):
    """Bins zero-padded to a common length; all slots processed every phase.

    ``padding_fraction`` of each padded bin is dummy slots on top of the
    longest bin.
    """

    name = "padded"

    def __init__(self, padding_fraction=0.10):
        if not 0.0 <= padding_fraction < 1.0:
            raise ValueError("padding_fraction must be in [0, 1)")
        self.padding_fraction = padding_fraction

    def padded_length(self, window):
        longest = int(np.bincount(window.bin, minlength=window.bins).max()) if window.n_events else 0
        return math.ceil(longest / (1.0 - self.padding_fraction))

    def warp(self, window):
        nb = window.bins
        length = self.padded_length(window)
        n_slots = nb * length
        order = np.argsort(window.bin, kind="stable")
        counts = np.bincount(window.bin, minlength=nb)
        starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
        rank = np.arange(window.n_events) - np.repeat(starts, counts)
        slot_of = np.empty(window.n_events, dtype=np.int64)
        slot_of[order] = window.bin[order] * length + rank
        event_of = np.full(n_slots, -1, dtype=np.int64)
        event_of[slot_of] = np.arange(window.n_events)
        real = event_of >= 0
        ev = np.where(real, event_of, 0)
        slot_bin = np.repeat(np.arange(nb), length)
        slots = {
            "event": event_of,
            "bin": slot_bin,
            "pos0": np.where(real[:, None], window.pos0[ev], 0.0),
            "step_fwd": np.where(real, window.step_fwd[ev], window.durations[slot_bin]),
            "step_bwd": np.where(real, window.step_bwd[ev], 0.0),
            "pol": np.where(real, window.pol[ev], 0),
            "tbar": np.where(real[:, None], window.tbar[ev], 0.0),
        }
        slot_pos = warp_vec(
            slots["pos0"], slot_bin, slots["step_fwd"], slots["step_bwd"],
            window.durations, window.flows.u, early_stop=False,
        )
        height, width = window.shape
        slot_valid = real & in_image(slot_pos, height, width).all(axis=1)
        pos = slot_pos[slot_of]
        inside = slot_valid[slot_of]
        return PaddedTrajectory(pos, inside, slots, slot_pos, slot_valid)

    def splat(self, window, traj):
        if not isinstance(traj, PaddedTrajectory):
            traj = self.warp(window)
        height, width = window.shape
        stack = IweStack.zeros(window.bins + 1, height, width)
        weight = traj.slot_valid.astype(np.float64)
        splat_vec(traj.slot_pos, traj.slots["pol"], traj.slots["tbar"], weight, stack)
        stack.n_surviving = int(traj.slot_valid.sum())
        return stack

    def backward(self, window, traj, stack):
        if not isinstance(traj, PaddedTrajectory):
            traj = self.warp(window)
        d_counts, d_tsums = loss_seeds(stack)
        weight = traj.slot_valid.astype(np.float64)
        s = traj.slots
        gpos = position_grads(traj.slot_pos, s["pol"], s["tbar"], d_counts, d_tsums, weight)
        return backprop_vec(
            s["pos0"], traj.slot_pos, s["bin"], s["step_fwd"], s["step_bwd"],
            window.durations, window.flows.u, gpos,
        )


class ParallelBackend(Backend):
    """Worker pool over contiguous event chunks, no padding, early exit.

    Args:
        workers: pool size (defaults to the CPU count).
        deterministic: merge per-lane buffers in lane order (bit-stable).
            With False, lane buffers are summed in completion order.
        min_chunk: events per chunk below which work is not split across
            workers.
        max_chunk: events per chunk above which work is split anyway, which
            bounds the temporary memory of every phase.

    Chunks are dealt round-robin to ``min(workers, chunks)`` lanes; each lane
    accumulates its chunks in order into its own buffer (the first lane
    directly into the result), so the reduction order is fixed.
    """

    name = "parallel"

    def __init__(self, workers=None, deterministic=True, min_chunk=4096, max_chunk=16384):
        self.workers = max(1, workers or os.cpu_count() or 1)
        self.deterministic = deterministic
        self.min_chunk = min_chunk
        self.max_chunk = max(max_chunk, 1)
        self._pool = None
        self._lock = threading.Lock()

    def __del__(self):
        if self._pool is not None:
            self._pool.shutdown(wait=False)

    def _chunks(self, n, grid_px):
        if not n:
            return []
        per = max(self.min_chunk, grid_px)
        k = int(max(-(-n // self.max_chunk), min(self.workers, max(1, n // per))))
        bounds = np.linspace(0, n, k + 1).astype(int)
        return [slice(a, b) for a, b in zip(bounds[:-1], bounds[1:]) if b > a]

    def _lanes(self, chunks):
        lanes = min(self.workers, len(chunks))
        return [chunks[i::lanes] for i in range(lanes)]

    def _pool_map(self, fn, items):
        if len(items) <= 1:
            return [fn(item) for item in items]
        if self._pool is None:
            self._pool = ThreadPoolExecutor(max_workers=self.workers)
        futures = [self._pool.submit(fn, item) for item in items]
        if self.deterministic:
            return [f.result() for f in futures]
        return [f.result() for f in as_completed(futures)]

    def _reduce(self, work, chunks, result, fresh, merge):
        """Run ``work(chunk, buffer)`` over all chunks and fold lanes into ``result``."""
        lanes = self._lanes(chunks)

        def run_lane(i):
            buf = result if i == 0 else fresh()
            for c in lanes[i]:
                work(c, buf)
            return buf

        for buf in self._pool_map(run_lane, list(range(len(lanes)))):
            if buf is not result:
                with self._lock:
                    merge(result, buf)
        return result

    def warp(self, window):
        n = window.n_events
        height, width = window.shape
        pos = np.empty((n, window.bins + 1, 2))

        def work(c):
            pos[c] = warp_vec(
                window.pos0[c], window.bin[c], window.step_fwd[c], window.step_bwd[c],
                window.durations, window.flows.u, early_stop=True,
            )

        self._pool_map(work, self._chunks(n, height * width))
        inside = in_image(pos, height, width).all(axis=1)
        return EventTrajectory(pos, inside)

    def splat(self, window, traj):
        height, width = window.shape
        refs = window.bins + 1
        live = np.flatnonzero(traj.in_bounds)
        work = partial(_splat_chunk, live=live, traj=traj, window=window)
        stack = self._reduce(work, self._chunks(len(live), height * width),
                             IweStack.zeros(refs, height, width),
                             partial(IweStack.zeros, refs, height, width), _merge_stacks)
        stack.n_surviving = len(live)
        return stack

    def backward(self, window, traj, stack):
        # per-chunk work lives in module functions: closures would allocate
        # their cells before the loss seeds and raise this phase's peak
        d_counts, d_tsums = loss_seeds(stack)
        live = np.flatnonzero(traj.in_bounds)
        work = partial(_backward_chunk, live=live, traj=traj, window=window,
                       d_counts=d_counts, d_tsums=d_tsums)
        shape = window.flows.u.shape
        return self._reduce(work, self._chunks(len(live), window.shape[0] * window.shape[1]),
                            np.zeros(shape), partial(np.zeros, shape), _add_into)


def _splat_chunk(c, part, live, traj, window):
    ev = live[c]
    splat_vec(traj.pos[ev], window.pol[ev], window.tbar[ev], None, part)


def _merge_stacks(into, part):
    into.counts += part.counts
    into.tsums += part.tsums


def _add_into(into, part):
    into += part


def _backward_chunk(c, grad, live, traj, window, d_counts, d_tsums):
    ev = live[c]
    gpos = position_grads(traj.pos[ev], window.pol[ev], window.tbar[ev], d_counts, d_tsums)
    backprop_vec(
        window.pos0[ev], traj.pos[ev], window.bin[ev], window.step_fwd[ev],
        window.step_bwd[ev], window.durations, window.flows.u, gpos, out=grad,
    )


BACKENDS = {"naive": NaiveBackend, "padded": PaddedBackend, "parallel": ParallelBackend}


def get_backend(backend="parallel", **kwargs) -> Backend:
    if isinstance(backend, Backend):
        return backend
    try:
        return BACKENDS[backend](**kwargs)
    except KeyError:
        raise ValueError(f"unknown backend {backend!r}; choose from {sorted(BACKENDS)}") from None


# --- entry points -------------------------------------------------------------


def build_iwe_stack(window: WarpWindow, backend="parallel", recorder=NULL_RECORDER):
    """Warp every event to all reference times and splat the survivors.

    Returns ``(stack, trajectory)``.
    """
    be = get_backend(backend)
    with recorder.phase("warp"):
        traj = be.warp(window)
    with recorder.phase("splat"):
        stack = be.splat(window, traj)
    return stack, traj


def contrast_loss_backward(window: WarpWindow, backend="parallel", traj=None, stack=None,
                           recorder=NULL_RECORDER) -> np.ndarray:
    """Analytic dL_CM/du for every flow cell, shaped ``(B, H, W, 2)``."""
    be = get_backend(backend)
    if traj is None or stack is None:
        stack, traj = build_iwe_stack(window, be, recorder)
    with recorder.phase("backward"):
        return be.backward(window, traj, stack)


def loss_and_grad(window: WarpWindow, backend="parallel", need_grad=True, recorder=NULL_RECORDER):
    """One forward (and optionally backward) pass: ``(loss, grad_or_None, stack)``."""
    be = get_backend(backend)
    stack, traj = build_iwe_stack(window, be, recorder)
    with recorder.phase("loss"):
        loss = contrast_loss(stack)
    grad = None
    if need_grad:
        with recorder.phase("backward"):
            grad = be.backward(window, traj, stack)
    return loss, grad, stack
