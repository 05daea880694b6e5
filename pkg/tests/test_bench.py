import csv

import numpy as np
import pytest

import evcm.bench as bench
from evcm.bench import BENCH_COLUMNS, BackendDisagreementError, bench_window, run_bench
from evcm.warp import PHASES


def test_single_event_report(tmp_path):
    report = run_bench([1], repetitions=2)
    assert len(report.rows) == 3 * len(PHASES)
    losses = {r["backend"]: r["loss"] for r in report.rows}
    assert set(losses) == {"naive", "padded", "parallel"}
    ref = losses["naive"]
    assert all(abs(v - ref) <= 1e-12 * abs(ref) for v in losses.values())
    assert all(r["time_us"] > 0 for r in report.rows)
    assert all(r["peak_bytes"] >= 0 for r in report.rows)
    report.to_csv(tmp_path / "b.csv")
    with open(tmp_path / "b.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert tuple(rows[0]) == BENCH_COLUMNS == ("backend", "phase", "n_events", "time_us", "peak_bytes", "loss")
    assert len(rows) == 12


def test_report_queries():
    report = run_bench([50, 200], repetitions=1)
    assert report.counts == [50, 200]
    assert report.padding_fraction == 0.10
    assert report.speedup(200) == pytest.approx(
        report.total_time_us("naive", 200) / report.total_time_us("parallel", 200))
    assert report.peak_bytes("padded", 50) == max(r["peak_bytes"] for r in report.select("padded", 50))


def test_padded_allocates_at_least_parallel():
    report = run_bench([2000], repetitions=1, backends=("padded", "parallel"))
    assert report.peak_bytes("parallel", 2000) <= report.peak_bytes("padded", 2000)


def test_bench_window_reproducible():
    a, b = bench_window(100, seed=4), bench_window(100, seed=4)
    assert np.array_equal(a.slice.t, b.slice.t) and np.array_equal(a.flows.u, b.flows.u)
    assert len(a.slice) == 100 and a.flows.u.shape == (1, 64, 64, 2)


def test_disagreement_detected(monkeypatch):
    real = bench._timed_runs

    def skewed(window, backend, reps, budget_s):
        times, loss = real(window, backend, reps, budget_s)
        return times, loss * (1.0 + 1e-6) if backend.name == "padded" else loss

    monkeypatch.setattr(bench, "_timed_runs", skewed)
    with pytest.raises(BackendDisagreementError):
        run_bench([10], repetitions=1)


@pytest.mark.parametrize("kwargs", [
    {"event_counts": [0]}, {"padding_fraction": 1.0}, {"padding_fraction": -0.1}, {"repetitions": 0},
])
def test_invalid_arguments(kwargs):
    args = {"event_counts": [10]} | kwargs
    with pytest.raises(ValueError):
        run_bench(**args)
