"""Record-level partitions of a manifest."""
from __future__ import annotations

import math
from collections import defaultdict
from typing import NamedTuple

from .manifest import DatasetManifest


class Split(NamedTuple):
    train: DatasetManifest
    val: DatasetManifest
    warnings: list[str]


def train_day_count(n_days: int, fraction: float) -> int:
    """ceil(fraction * n_days), immune to float noise such as 0.7 * 30 = 21.000000000000004."""
    return math.ceil(round(fraction * n_days, 9))


def partition_chronological(manifest: DatasetManifest, train_fraction: float = 0.7) -> Split:
    """Per (lot, angle) stream, the first ceil(fraction * D) days train and the rest validate."""
    if not 0 < train_fraction < 1:
        raise ValueError(f"train_fraction must be in (0, 1), got {train_fraction}")
    days = defaultdict(set)
    for r in manifest.records:
        days[r.stream].add(r.day_index)
    cut, warnings = {}, []
    for stream, ds in sorted(days.items()):
        d = max(ds) + 1
        cut[stream] = train_day_count(d, train_fraction)
        if cut[stream] >= d:
            warnings.append(f"stream {stream[0]}/{stream[1]} has {d} day(s); validation split is empty")
    train = [r for r in manifest.records if r.day_index < cut[r.stream]]
    val = [r for r in manifest.records if r.day_index >= cut[r.stream]]
    return Split(manifest.subset(train), manifest.subset(val), warnings)


def leave_one_angle_out(manifest: DatasetManifest, angle_id: str) -> Split:
    """Train on every other angle, validate on ``angle_id``."""
    if len(manifest.angles) < 2:
        raise ValueError("cannot leave one out: manifest has a single camera angle")
    if angle_id not in manifest.angles:
        raise ValueError(f"unknown angle {angle_id!r}; manifest angles are {manifest.angles}")
    train = [r for r in manifest.records if r.angle_id != angle_id]
    val = [r for r in manifest.records if r.angle_id == angle_id]
    return Split(manifest.subset(train), manifest.subset(val), [])


def take_days(manifest: DatasetManifest, mode: str, n: int) -> DatasetManifest:
    """``first_n`` keeps day_index < n, ``after_n`` keeps day_index >= n (per stream)."""
    if n < 0:
        raise ValueError(f"n must be >= 0, got {n}")
    if mode == "first_n":
        keep = [r for r in manifest.records if r.day_index < n]
    elif mode == "after_n":
        keep = [r for r in manifest.records if r.day_index >= n]
    else:
        raise ValueError(f"mode must be 'first_n' or 'after_n', got {mode!r}")
    return manifest.subset(keep)


def by_angle(manifest: DatasetManifest, angle_id: str) -> DatasetManifest:
    return manifest.subset(r for r in manifest.records if r.angle_id == angle_id)
