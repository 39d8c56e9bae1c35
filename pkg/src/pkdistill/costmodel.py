"""Deployment costs: central bandwidth load and per-spot latency on the edge device."""
from __future__ import annotations

import statistics
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .data.rectify import load_image, rectify_crop
from .nn.checkpoint import Checkpoint
from .nn.network import Network

REFERENCE_SECONDS_PER_SPOT = 0.01   # Raspberry Pi 5 figure; annotation only
WARMUP = 2


@dataclass(frozen=True)
class BandwidthScenario:
    n_cameras: int
    interval_seconds: float
    avg_image_bytes: int
    resolution: str = ""

    def __post_init__(self):
        for name in ("n_cameras", "interval_seconds", "avg_image_bytes"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")


def bandwidth_estimate(s: BandwidthScenario) -> float:
    """Decimal gigabytes per hour sent to a central server."""
    return s.n_cameras * (3600 / s.interval_seconds) * s.avg_image_bytes / 1e9


def bytes_for_rate(gb_per_hour: float, n_cameras: int, interval_seconds: float) -> float:
    """Inverse of :func:`bandwidth_estimate` in the image size."""
    return gb_per_hour * 1e9 / (n_cameras * 3600 / interval_seconds)


# 35 GB/h for 1,000 cameras every 30 s implies 35e9 / 120,000 frames = 291,667 B per frame.
REFERENCE_SCENARIOS = {
    "1280x720": BandwidthScenario(1000, 30, round(bytes_for_rate(35.0, 1000, 30)), "1280x720"),
    "1920x1080": BandwidthScenario(1000, 30, 2 * round(bytes_for_rate(35.0, 1000, 30)), "1920x1080"),
}


def summary_line(s: BandwidthScenario) -> str:
    return (f"{s.n_cameras} cams @ {s.interval_seconds:g}s × {s.avg_image_bytes / 1000:.0f}KB "
            f"≈ {bandwidth_estimate(s):.1f} GB/h")


@dataclass
class LatencyReport:
    n_spots: int
    repeats: int
    warmup: int
    total: dict[str, float]                  # seconds per full pass: mean, p50, p95
    stages: dict[str, float]                 # mean seconds per pass: load, crop, classify
    per_spot: dict[str, float] | None        # None when there are no spots
    spots_per_refresh: int | None             # spots classified within a 1 s budget
    reference_seconds_per_spot: float = REFERENCE_SECONDS_PER_SPOT
    notes: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def _percentile(values, q) -> float:
    return float(np.percentile(np.asarray(values), q))


def latency_probe(checkpoint: Checkpoint, image_path, quads, repeats: int = 10, warmup: int = WARMUP,
                  size: int = 32) -> LatencyReport:
    """Wall-clock load → crop-all → classify-all, sequentially, after ``warmup`` untimed passes."""
    if repeats < 10:
        raise ValueError(f"repeats must be >= 10, got {repeats}")
    net = Network(checkpoint.arch, checkpoint.params)
    quads = list(quads)
    load_image(image_path)   # surface unreadable images before timing

    def one_pass():
        t0 = time.perf_counter()
        img = load_image(image_path)
        t1 = time.perf_counter()
        crops = np.stack([rectify_crop(img, q, size) for q in quads]) if quads else None
        t2 = time.perf_counter()
        if crops is not None:
            net.predict_proba(crops, batch_size=max(1, len(quads)))
        t3 = time.perf_counter()
        return t1 - t0, t2 - t1, t3 - t2

    for _ in range(warmup):
        one_pass()
    runs = [one_pass() for _ in range(repeats)]
    totals = [sum(r) for r in runs]
    total = {"mean": statistics.fmean(totals), "p50": _percentile(totals, 50), "p95": _percentile(totals, 95)}
    stages = {name: statistics.fmean(r[i] for r in runs) for i, name in enumerate(("load", "crop", "classify"))}
    notes = [f"{warmup} warm-up passes excluded",
             f"reference {REFERENCE_SECONDS_PER_SPOT} s/spot is a non-binding annotation"]
    if not quads:
        notes.append("no spots: per-spot time undefined; total is image load only")
        return LatencyReport(0, repeats, warmup, total, stages, None, None, notes=notes)
    n = len(quads)
    per_spot = {k: v / n for k, v in total.items()}
    return LatencyReport(n, repeats, warmup, total, stages, per_spot, int(1.0 // per_spot["mean"]), notes=notes)
