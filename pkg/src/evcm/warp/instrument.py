"""Per-phase wall-time and allocation tracking."""

from __future__ import annotations

import time
import tracemalloc
from collections import defaultdict
from contextlib import contextmanager

PHASES = ("warp", "splat", "loss", "backward")


class PhaseRecorder:
    """Collects wall time (seconds) per phase and, optionally, the peak number of
    bytes allocated on top of what was live when the phase started.

    Memory tracking uses ``tracemalloc``, which numpy reports its buffers to;
    it slows Python-level code down, so time and memory are normally measured
    in separate runs.
    """

    def __init__(self, track_memory=False):
        self.track_memory = track_memory
        self.times = defaultdict(list)
        self.peaks = defaultdict(int)

    @contextmanager
    def phase(self, name):
        if self.track_memory:
            if not tracemalloc.is_tracing():
                raise RuntimeError("track_memory needs tracemalloc.start() first")
            base = tracemalloc.get_traced_memory()[0]
            tracemalloc.reset_peak()
        t0 = time.perf_counter()
        try:
            yield
        finally:
            self.times[name].append(time.perf_counter() - t0)
            if self.track_memory:
                peak = tracemalloc.get_traced_memory()[1] - base
                self.peaks[name] = max(self.peaks[name], peak)


class _NullRecorder:
    @contextmanager
    def phase(self, name):
        yield


NULL_RECORDER = _NullRecorder()


@contextmanager
def traced_peak():
    """Measure the peak extra allocation of a block; yields a dict filled on exit."""
    out = {}
    started = not tracemalloc.is_tracing()
    if started:
        tracemalloc.start()
    base = tracemalloc.get_traced_memory()[0]
    tracemalloc.reset_peak()
    try:
        yield out
    finally:
        out["peak_bytes"] = tracemalloc.get_traced_memory()[1] - base
        if started:
            tracemalloc.stop()
