"""Containers passed between the warp, splat, loss and backward phases."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..core import EventSlice, FlowSequence, ShapeMismatchError

EPS = 1e-9


class WarpWindow:
    """An event slice paired with the B-bin flow sequence that warps it.

    The reference times are the B + 1 bin edges. Per-event quantities the
    kernels need (bin index, partial steps, normalized timestamp offsets) are
    precomputed once here.
    """

    def __init__(self, slice_: EventSlice, flows: FlowSequence):
        if flows.shape != slice_.shape:
            raise ShapeMismatchError(f"flow grid {flows.shape} vs sensor {slice_.shape}")
        if flows.edges[0] != slice_.t_start or flows.edges[-1] != slice_.t_end:
            raise ValueError(
                f"slice window [{slice_.t_start}, {slice_.t_end}) does not match bin edges "
                f"[{flows.edges[0]}, {flows.edges[-1]})"
            )
        self.slice = slice_
        self.flows = flows
        edges = flows.edges
        t = slice_.t.astype(np.float64)
        nb = flows.bins
        self.bin = np.clip(np.searchsorted(edges, t, side="right") - 1, 0, nb - 1)
        # signed partial steps (seconds) to the bin's right / left edge
        self.step_fwd = (edges[self.bin + 1] - t) * 1e-6
        self.step_bwd = (edges[self.bin] - t) * 1e-6
        self.durations = flows.durations
        self.tbar = np.abs(t[:, None] - edges[None, :]) / (edges[-1] - edges[0])  # (N, B+1)
        self.pos0 = np.stack([slice_.x, slice_.y], axis=1).astype(np.float64)
        self.pol = (slice_.p < 0).astype(np.int64)  # 0: positive, 1: negative

    @property
    def reference_times(self) -> np.ndarray:
        return self.flows.edges

    @property
    def n_events(self):
        return len(self.slice)

    @property
    def bins(self):
        return self.flows.bins

    @property
    def shape(self):
        return self.slice.shape

    def with_flows(self, flows: FlowSequence) -> "WarpWindow":
        return WarpWindow(self.slice, flows)


@dataclass
class EventTrajectory:
    """Warped positions at every reference time.

    ``pos`` is ``(N, B+1, 2)``; entries past the point where an event left the
    image may be NaN when a backend stops warping it. ``in_bounds[k]`` is True
    iff event k stays inside the image at every reference time.
    """

    pos: np.ndarray
    in_bounds: np.ndarray

    @property
    def n_surviving(self):
        return int(self.in_bounds.sum())


@dataclass
class IweStack:
    """Per-reference, per-polarity accumulators, each ``(B+1, 2, H, W)``.

    Polarity axis: 0 = positive, 1 = negative.
    """

    counts: np.ndarray
    tsums: np.ndarray
    n_surviving: int = 0

    @classmethod
    def zeros(cls, refs, height, width):
        return cls(np.zeros((refs, 2, height, width)), np.zeros((refs, 2, height, width)), 0)

    @property
    def n_active(self) -> np.ndarray:
        return np.count_nonzero(self.counts.sum(axis=1) > 0, axis=(1, 2))

    @property
    def empty(self) -> bool:
        """Warning flag: no event survived masking."""
        return self.n_surviving == 0

    def merge_(self, other: "IweStack") -> "IweStack":
        self.counts += other.counts
        self.tsums += other.tsums
        self.n_surviving += other.n_surviving
        return self
