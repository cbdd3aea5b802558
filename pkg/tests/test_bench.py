import time

import numpy as np
import pytest

from piwm.bench import BenchConfig, BenchReport, percentile, run_bench


def test_percentile_nearest_rank_cases():
    assert percentile(list(range(1, 101)), 95) == 95
    assert percentile([7.0], 50) == 7.0
    assert percentile([5, 1, 3], 50) == 3
    with pytest.raises(ValueError):
        percentile([], 95)
    with pytest.raises(ValueError):
        percentile([1.0], 0)


def test_percentile_matches_sort_oracle_fuzz():
    import math
    rng = np.random.default_rng(0)
    for _ in range(1000):
        n = int(rng.integers(1, 50))
        vals = rng.normal(size=n).tolist()
        p = float(rng.uniform(0.1, 100.0))
        expect = sorted(vals)[math.ceil(p / 100 * n) - 1]
        assert percentile(vals, p) == expect


def sleep_stub_factory(ms=10.0):
    # busy-wait: container sleep() granularity is tens of ms, a spin loop
    # holds the span to microseconds
    frame = np.zeros((32, 64, 3), np.float32)

    def factory():
        def stepper(action):
            t0 = time.perf_counter()
            while (time.perf_counter() - t0) * 1e3 < ms:
                pass
            return frame
        return stepper

    return factory


def test_stub_latency_recovered_within_tolerance():
    cfg = BenchConfig(trials=2, frames_per_trial=30, warmup_discard=5)
    report = run_bench(sleep_stub_factory(10.0), cfg)
    assert report.p95_latency_ms == pytest.approx(10.0, abs=1.0)
    assert report.p95_fps == pytest.approx(100.0, rel=0.12)


def test_retained_sample_arithmetic():
    cfg = BenchConfig(trials=1, frames_per_trial=6, warmup_discard=5)
    report = run_bench(sleep_stub_factory(1.0), cfg)
    assert report.retained_samples == 1
    cfg = BenchConfig(trials=3, frames_per_trial=12, warmup_discard=5)
    report = run_bench(sleep_stub_factory(0.5), cfg)
    assert report.retained_samples == 3 * (12 - 5)


def test_fps_latency_product_and_schema():
    cfg = BenchConfig(trials=1, frames_per_trial=8, warmup_discard=2)
    report = run_bench(sleep_stub_factory(2.0), cfg)
    d = report.to_dict()
    for key in ("p95_fps", "p95_latency_ms", "peak_rss_mib", "retained_samples",
                "per_trial_p95_ms", "per_trial_peak_rss_mib", "config", "host"):
        assert key in d
    assert d["config"]["trials"] == 1
    assert d["config"]["sampler"]["n_steps"] == 3
    assert report.peak_rss_mib > 0
    # per-frame fps * latency == 1000 by construction
    assert report.p95_fps * percentile(
        [1000.0 / report.p95_fps], 100) == pytest.approx(1000.0)


def test_bench_config_validation():
    with pytest.raises(ValueError):
        BenchConfig(frames_per_trial=5, warmup_discard=5)
    with pytest.raises(ValueError):
        BenchConfig(trials=0)


def test_bench_report_written(tmp_path):
    cfg = BenchConfig(trials=1, frames_per_trial=7, warmup_discard=5)
    run_bench(sleep_stub_factory(0.5), cfg, out_path=tmp_path / "bench.json")
    import json
    d = json.loads((tmp_path / "bench.json").read_text())
    assert d["retained_samples"] == 2
