"""Runtime and peak-allocation benchmark of the warp backends, per phase."""

from __future__ import annotations

import tracemalloc
from dataclasses import dataclass, field

import numpy as np

from .core import EventSlice, FlowSequence, write_csv
from .warp import PHASES, PhaseRecorder, WarpWindow, get_backend, loss_and_grad

BENCH_COLUMNS = ("backend", "phase", "n_events", "time_us", "peak_bytes", "loss")


class BackendDisagreementError(RuntimeError):
    pass


def bench_window(n_events, height=64, width=64, bins=1, bin_us=10_000, flow_std=20.0, seed=0) -> WarpWindow:
    """Uniformly scattered events under an i.i.d. Gaussian flow field."""
    rng = np.random.default_rng(seed)
    t_end = bins * bin_us
    t = np.sort(rng.integers(0, t_end, n_events))
    events = EventSlice(t, rng.integers(0, width, n_events), rng.integers(0, height, n_events),
                        rng.choice([-1, 1], n_events), width, height, 0, t_end)
    u = rng.normal(0.0, flow_std, (bins, height, width, 2))
    return WarpWindow(events, FlowSequence(u, np.linspace(0, t_end, bins + 1)))


@dataclass
class BenchReport:
    rows: list = field(default_factory=list)
    padding_fraction: float = 0.10

    def select(self, backend=None, n_events=None, phase=None):
        return [r for r in self.rows
                if (backend is None or r["backend"] == backend)
                and (n_events is None or r["n_events"] == n_events)
                and (phase is None or r["phase"] == phase)]

    @property
    def counts(self):
        return sorted({r["n_events"] for r in self.rows})

    def total_time_us(self, backend, n_events) -> float:
        return float(sum(r["time_us"] for r in self.select(backend, n_events)))

    def peak_bytes(self, backend, n_events) -> int:
        """Largest per-phase peak extra allocation."""
        return int(max(r["peak_bytes"] for r in self.select(backend, n_events)))

    def speedup(self, n_events, fast="parallel", slow="naive") -> float:
        return self.total_time_us(slow, n_events) / self.total_time_us(fast, n_events)

    def to_csv(self, path) -> None:
        write_csv(path, self.rows, BENCH_COLUMNS)


def _timed_runs(window, backend, reps, budget_s):
    """Median per-phase times (s) after one warm-up; stops early past ``budget_s``."""
    loss_and_grad(window, backend)
    recorder = PhaseRecorder()
    spent = 0.0
    for _ in range(reps):
        before = sum(sum(v) for v in recorder.times.values())
        loss, _, _ = loss_and_grad(window, backend, recorder=recorder)
        spent += sum(sum(v) for v in recorder.times.values()) - before
        if spent > budget_s:
            break
    return {p: float(np.median(recorder.times[p])) for p in PHASES}, loss


def _peak_run(window, backend):
    recorder = PhaseRecorder(track_memory=True)
    started = not tracemalloc.is_tracing()
    if started:
        tracemalloc.start()
    try:
        loss_and_grad(window, backend, recorder=recorder)
    finally:
        if started:
            tracemalloc.stop()
    return {p: int(recorder.peaks[p]) for p in PHASES}


def run_bench(event_counts=(1_000, 10_000), padding_fraction=0.10, repetitions=20,
              backends=("naive", "padded", "parallel"), budget_s=10.0, seed=0,
              rtol=1e-10, workers=None) -> BenchReport:
    """Time and measure every backend on one synthetic window per event count.

    Timing and allocation tracking happen in separate runs because tracing
    slows Python code down. Each backend gets at least one timed repetition
    and stops adding repetitions once they take ``budget_s`` in total.
    Raises ``BackendDisagreementError`` if the losses differ by more than
    ``rtol`` relative. ``workers`` sizes the parallel backend's pool.
    """
    if not 0 <= padding_fraction < 1:
        raise ValueError("padding_fraction must be in [0, 1)")
    if any(int(n) < 1 for n in event_counts):
        raise ValueError("event counts must be >= 1")
    if repetitions < 1:
        raise ValueError("need at least one repetition")
    report = BenchReport(padding_fraction=padding_fraction)
    for n in event_counts:
        window = bench_window(int(n), seed=seed)
        losses = {}
        for name in backends:
            options = {"padded": {"padding_fraction": padding_fraction}, "parallel": {"workers": workers}}
            be = get_backend(name, **options.get(name, {}))
            times, loss = _timed_runs(window, be, repetitions, budget_s)
            peaks = _peak_run(window, be)
            losses[name] = loss
            for p in PHASES:
                report.rows.append({"backend": name, "phase": p, "n_events": int(n),
                                    "time_us": times[p] * 1e6, "peak_bytes": peaks[p], "loss": loss})
        ref = next(iter(losses.values()))
        for name, loss in losses.items():
            if abs(loss - ref) > rtol * max(abs(ref), 1e-300):
                raise BackendDisagreementError(f"{n} events: {name} loss {loss!r} vs {ref!r}")
    return report
