"""Toy end-to-end reproduction: pretrain on the source split, adapt, track, evaluate."""
from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np

from .adapt import AdaptConfig, PretrainConfig, adapt_run, pretrain_source, sfod_baseline
from .metrics import METRIC_ORDER, MetricsReport, evaluate
from .model import DetectConfig, ModelWeights
from .synthbench import Benchmark, BenchmarkConfig, make_benchmark
from .tracker import TrackerConfig, track_sequence

VARIANTS = ("source", "dc", "ema_dc", "darth", "sfod")


def variant_config(name: str, base: AdaptConfig) -> AdaptConfig:
    """Ablation switches for a named DARTH variant."""
    if name == "darth":
        return base
    if name == "ema_dc":
        return replace(base, use_pcl=False)
    if name == "dc":
        return replace(base, use_pcl=False, use_ema=False)
    raise ValueError(f"{name!r} is not an adaptation variant")


def evaluate_weights(
    weights: ModelWeights,
    bench: Benchmark,
    split: str = "target",
    tracker: TrackerConfig = TrackerConfig(),
    detect: DetectConfig = DetectConfig(),
) -> MetricsReport:
    data = getattr(bench, split)
    gt = {lv.video.name: lv.gt for lv in data}
    pred = {lv.video.name: track_sequence(weights, lv.video, tracker, detect) for lv in data}
    return evaluate(gt, pred)


@dataclass
class SeedResult:
    seed: int
    reports: dict[str, MetricsReport]
    seconds: dict[str, float] = field(default_factory=dict)
    source: Optional[ModelWeights] = None

    def table(self) -> dict[str, dict[str, float]]:
        return {k: {m: 100.0 * r.average[m] for m in METRIC_ORDER} for k, r in self.reports.items()}


def run_seed(
    seed: int,
    variants: Sequence[str] = ("source", "ema_dc", "darth", "sfod"),
    bench_cfg: Optional[BenchmarkConfig] = None,
    pretrain_cfg: Optional[PretrainConfig] = None,
    adapt_cfg: Optional[AdaptConfig] = None,
    tracker: TrackerConfig = TrackerConfig(),
    sfod_conf: float = 0.7,
    log: Optional[Callable[[str], None]] = None,
) -> SeedResult:
    """One seed of the toy benchmark; the seed drives data, pretraining and adaptation."""
    bench_cfg = replace(bench_cfg or BenchmarkConfig(), seed=seed)
    pretrain_cfg = replace(pretrain_cfg or PretrainConfig(), seed=seed)
    adapt_cfg = replace(adapt_cfg or AdaptConfig(), seed=seed)
    bench = make_benchmark(bench_cfg)
    clock = time.perf_counter()
    source = pretrain_source(bench.source, pretrain_cfg)
    seconds = {"pretrain": time.perf_counter() - clock}
    reports = {}
    for name in variants:
        clock = time.perf_counter()
        if name == "source":
            w = source
        elif name == "sfod":
            w = sfod_baseline(source, bench.target_videos(), sfod_conf, adapt_cfg)
        else:
            w = adapt_run(source, bench.target_videos(), variant_config(name, adapt_cfg))
        reports[name] = evaluate_weights(w, bench, "target", tracker, adapt_cfg.detect)
        seconds[name] = time.perf_counter() - clock
        if log is not None:
            avg = reports[name].average
            log(f"seed {seed} {name:7s} " + " ".join(f"{m}={100 * avg[m]:.1f}" for m in METRIC_ORDER))
    return SeedResult(seed, reports, seconds, source)


def mean_table(results: Sequence[SeedResult]) -> dict[str, dict[str, float]]:
    """Per-variant mean of the class-averaged metrics (percent), NaN-aware."""
    names = results[0].reports.keys()
    return {
        n: {m: float(np.nanmean([100.0 * r.reports[n].average[m] for r in results])) for m in METRIC_ORDER}
        for n in names
    }
