"""Dataset manifests: one JSON object per image, spots as four-corner quads."""
from __future__ import annotations

import datetime as dt
import hashlib
import json
from collections import defaultdict
from dataclasses import dataclass, field, replace
from pathlib import Path

from ..labels import CODES, NAMES


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class SpotAnnotation:
    spot_id: str
    quad: tuple[tuple[float, float], ...]
    label: int

    def __post_init__(self):
        if len(self.quad) != 4:
            raise ManifestError(f"spot {self.spot_id}: quad needs 4 points, got {len(self.quad)}")
        if quad_area(self.quad) <= 0:
            raise ManifestError(f"spot {self.spot_id}: degenerate quad {self.quad}")


@dataclass(frozen=True)
class ImageRecord:
    image_path: str
    lot_id: str
    angle_id: str
    day_index: int
    capture_time: int
    spots: tuple[SpotAnnotation, ...]
    date: str = ""

    @property
    def stream(self) -> tuple[str, str]:
        return (self.lot_id, self.angle_id)


@dataclass
class DatasetManifest:
    name: str
    records: list[ImageRecord]
    angles: list[str]
    root: Path | None = None
    warnings: list[str] = field(default_factory=list)

    def __post_init__(self):
        if not self.angles:
            raise ManifestError("manifest has no camera angles")
        known = set(self.angles)
        for r in self.records:
            if r.angle_id not in known:
                raise ManifestError(f"record {r.image_path} has unlisted angle {r.angle_id!r}")

    def subset(self, records) -> "DatasetManifest":
        """Same angles and root, a different record list."""
        return replace(self, records=list(records), warnings=[])

    def days(self, angle_id: str | None = None) -> list[int]:
        return sorted({r.day_index for r in self.records if angle_id is None or r.angle_id == angle_id})

    @property
    def n_spots(self) -> int:
        return sum(len(r.spots) for r in self.records)

    def digest(self) -> str:
        h = hashlib.sha256(self.name.encode())
        for line in to_lines(self):
            h.update(line.encode())
        return h.hexdigest()[:16]


def quad_area(quad) -> float:
    """Shoelace area; positive for clockwise corners in image coordinates (y down)."""
    s = 0.0
    for (x0, y0), (x1, y1) in zip(quad, quad[1:] + quad[:1]):
        s += x0 * y1 - x1 * y0
    return abs(s) / 2


def _seconds(hms: str) -> int:
    h, m, s = (int(v) for v in hms.split(":"))
    return h * 3600 + m * 60 + s


def _hms(seconds: int) -> str:
    return f"{seconds // 3600:02d}:{seconds % 3600 // 60:02d}:{seconds % 60:02d}"


def _parse_line(obj: dict):
    spots = []
    for s in obj["spots"]:
        label = s.get("label", "unknown")
        if label not in CODES:
            raise ManifestError(f"unknown label {label!r}")
        quad = tuple((float(x), float(y)) for x, y in s["quad"])
        spots.append(SpotAnnotation(str(s["id"]), quad, CODES[label]))
    date = dt.date.fromisoformat(obj["date"])
    return obj, date, _seconds(obj.get("time", "00:00:00")), tuple(spots)


def parse_manifest(path) -> DatasetManifest:
    """Read a JSON-lines manifest and assign dense per-stream day indices.

    Calendar gaps inside a (lot, angle) stream are closed up; each such stream
    adds one entry to ``manifest.warnings``.
    """
    path = Path(path)
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rows.append(_parse_line(json.loads(line)))
            except (ValueError, KeyError, TypeError) as exc:
                raise ManifestError(f"{path}:{lineno}: malformed record: {exc}") from None
    if not rows:
        raise ManifestError(f"{path}: no records")

    dates = defaultdict(set)
    for obj, date, _, _ in rows:
        dates[(obj["lot"], obj["angle"])].add(date)
    index, warnings = {}, []
    for stream, ds in sorted(dates.items()):
        ordered = sorted(ds)
        if (ordered[-1] - ordered[0]).days + 1 != len(ordered):
            warnings.append(f"stream {stream[0]}/{stream[1]}: {len(ordered)} capture days over a "
                            f"{(ordered[-1] - ordered[0]).days + 1}-day span; indices made dense")
        for i, d in enumerate(ordered):
            index[(stream, d)] = i

    rows.sort(key=lambda r: (r[1], r[2]))
    records, angles = [], []
    for obj, date, secs, spots in rows:
        stream = (obj["lot"], obj["angle"])
        records.append(ImageRecord(obj["image"], obj["lot"], obj["angle"], index[(stream, date)],
                                   secs, spots, date.isoformat()))
        if obj["angle"] not in angles:
            angles.append(obj["angle"])
    name = path.parent.name or path.stem
    return DatasetManifest(name, records, sorted(angles), path.parent, warnings)


def record_to_dict(r: ImageRecord) -> dict:
    return {
        "image": r.image_path,
        "lot": r.lot_id,
        "angle": r.angle_id,
        "date": r.date,
        "time": _hms(r.capture_time),
        "spots": [
            {"id": s.spot_id, "quad": [[round(x, 3), round(y, 3)] for x, y in s.quad], "label": NAMES[s.label]}
            for s in r.spots
        ],
    }


def to_lines(manifest: DatasetManifest) -> list[str]:
    return [json.dumps(record_to_dict(r), separators=(",", ":")) for r in manifest.records]


def write_manifest(manifest: DatasetManifest, path) -> Path:
    path = Path(path)
    path.write_text("".join(line + "\n" for line in to_lines(manifest)), encoding="utf-8")
    return path
