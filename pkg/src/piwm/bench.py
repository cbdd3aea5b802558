"""Inference latency/throughput/memory harness.

Per-frame spans wrap frame generation only (mask construction included, image
encoding excluded); the first ``warmup_discard`` frames of every trial are
dropped; p95 statistics are nearest-rank percentiles over all retained frames
of all trials. Timing uses the monotonic wall clock and memory is the peak
process resident set, so reports are portable across hosts (and labeled so).
"""

from __future__ import annotations

import json
import math
import platform
import resource
import time
from dataclasses import dataclass, field, asdict
from pathlib import Path

from . import mask as M
from .sample import RolloutState, SamplerConfig, step_rollout
from .sim import Action, SimConfig, render_bev, spawn, step


@dataclass(frozen=True)
class BenchConfig:
    trials: int = 10
    frames_per_trial: int = 200       # desk default; the full protocol uses 1000
    warmup_discard: int = 5
    seed: int = 0
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    mask_mode: str = "soft"
    action_period: int = 7            # fixed action script: cycles all actions

    def __post_init__(self):
        if self.frames_per_trial <= self.warmup_discard:
            raise ValueError("frames_per_trial must exceed warmup_discard")
        if self.trials < 1:
            raise ValueError("trials must be >= 1")


@dataclass
class BenchReport:
    p95_fps: float
    p95_latency_ms: float
    peak_rss_mib: float
    retained_samples: int
    per_trial_p95_ms: list[float]
    per_trial_peak_rss_mib: list[float]
    config: dict
    host: dict

    def to_dict(self) -> dict:
        return asdict(self)


def percentile(values, p: float) -> float:
    """Nearest-rank percentile: sorted[ceil(p/100 * n) - 1]."""
    if len(values) == 0:
        raise ValueError("empty input")
    if not 0 < p <= 100:
        raise ValueError("p must be in (0, 100]")
    ordered = sorted(values)
    rank = math.ceil(p / 100.0 * len(ordered))
    return float(ordered[rank - 1])


def action_script(cfg: BenchConfig, n: int) -> list[int]:
    """Deterministic action sequence shared by every trial."""
    acts = [int(Action.IDLE), int(Action.FASTER), int(Action.IDLE),
            int(Action.LANE_LEFT), int(Action.IDLE), int(Action.LANE_RIGHT),
            int(Action.SLOWER)]
    period = max(1, min(cfg.action_period, len(acts)))
    return [acts[i % period] for i in range(n)]


def make_model_stepper(model, cfg: BenchConfig):
    """Teacher-start a rollout from the benchmark seed; returns step(action)->frame."""
    history_len = model.config.history_len
    sim_cfg = SimConfig()
    world = spawn(sim_cfg, cfg.seed)
    frames = [render_bev(world)]
    for _ in range(history_len - 1):
        world = step(world, Action.IDLE)
        frames.append(render_bev(world))
    state = RolloutState(context=frames,
                         past_actions=[int(Action.IDLE)] * (history_len - 1),
                         seed=cfg.seed)
    mask_params = None if cfg.mask_mode == "none" else M.MaskParams(mode=cfg.mask_mode)

    def stepper(action: int):
        return step_rollout(state, action, model, mask_params, cfg.sampler)

    return stepper


def _peak_rss_mib() -> float:
    return resource.getrusage(resource.RUSAGE_SELF).ru_maxrss / 1024.0


def run_bench(model_or_stepper_factory, cfg: BenchConfig,
              out_path: str | Path | None = None) -> BenchReport:
    """model_or_stepper_factory: a Denoiser, or a zero-arg factory returning a
    fresh step(action)->frame callable per trial (stub injection point)."""
    if callable(model_or_stepper_factory) and not hasattr(model_or_stepper_factory,
                                                          "forward_batch"):
        factory = model_or_stepper_factory
    else:
        model = model_or_stepper_factory
        factory = lambda: make_model_stepper(model, cfg)  # noqa: E731

    script = action_script(cfg, cfg.frames_per_trial)
    latencies_ms: list[float] = []
    per_trial_p95: list[float] = []
    per_trial_rss: list[float] = []
    for _ in range(cfg.trials):
        stepper = factory()
        trial: list[float] = []
        for k, a in enumerate(script):
            t0 = time.perf_counter_ns()
            stepper(a)
            span_ms = (time.perf_counter_ns() - t0) / 1e6
            if k >= cfg.warmup_discard:
                trial.append(span_ms)
        latencies_ms.extend(trial)
        per_trial_p95.append(percentile(trial, 95))
        per_trial_rss.append(_peak_rss_mib())

    fps_series = [1000.0 / ms for ms in latencies_ms]
    report = BenchReport(
        p95_fps=percentile(fps_series, 95),
        p95_latency_ms=percentile(latencies_ms, 95),
        peak_rss_mib=max(per_trial_rss),
        retained_samples=len(latencies_ms),
        per_trial_p95_ms=per_trial_p95,
        per_trial_peak_rss_mib=per_trial_rss,
        config={"trials": cfg.trials, "frames_per_trial": cfg.frames_per_trial,
                "warmup_discard": cfg.warmup_discard, "seed": cfg.seed,
                "mask_mode": cfg.mask_mode,
                "sampler": asdict(cfg.sampler),
                "timer": "monotonic wall clock",
                "memory": "peak process RSS (portable stand-in)"},
        host={"platform": platform.platform(), "python": platform.python_version(),
              "machine": platform.machine()})
    if out_path is not None:
        Path(out_path).write_text(json.dumps(report.to_dict(), indent=2))
    return report
