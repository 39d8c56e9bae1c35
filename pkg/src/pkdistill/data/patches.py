"""Materialize every annotated spot of a manifest as a patch array."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .manifest import DatasetManifest
from .rectify import Patch, load_image, rectify_crop


@dataclass
class PatchSet:
    """Column-oriented patches; ``x`` is (N, 3, S, S) float32."""

    x: np.ndarray
    y: np.ndarray        # int64 class codes, -1 when unknown
    day: np.ndarray      # int64
    angle: np.ndarray    # str
    image: np.ndarray    # str
    spot: np.ndarray     # str

    def __len__(self) -> int:
        return len(self.y)

    def take(self, mask_or_idx) -> "PatchSet":
        return PatchSet(*(a[mask_or_idx] for a in (self.x, self.y, self.day, self.angle, self.image, self.spot)))

    def patch(self, i: int) -> Patch:
        return Patch(self.x[i], (str(self.image[i]), str(self.spot[i])), int(self.y[i]))

    def keys(self) -> list[tuple[str, str]]:
        return list(zip(self.image.tolist(), self.spot.tolist()))

    @property
    def labeled(self) -> bool:
        return bool(len(self.y)) and bool(np.all(self.y >= 0))

    @classmethod
    def empty(cls, size: int = 32) -> "PatchSet":
        return cls(np.zeros((0, 3, size, size), np.float32), np.zeros(0, np.int64), np.zeros(0, np.int64),
                   np.zeros(0, str), np.zeros(0, str), np.zeros(0, str))

    @classmethod
    def concat(cls, sets) -> "PatchSet":
        sets = list(sets)
        return cls(*(np.concatenate([getattr(s, f) for s in sets]) for f in ("x", "y", "day", "angle", "image", "spot")))


_CACHE: dict[tuple, PatchSet] = {}


def extract_patches(manifest: DatasetManifest, size: int = 32) -> PatchSet:
    """Rectify every spot of every record, in manifest order.

    Results are memoized per (root, manifest digest, size) for the process;
    patches are read-only, so sharing them is safe.
    """
    key = (str(manifest.root), manifest.digest(), size)
    if key in _CACHE:
        return _CACHE[key]
    root = Path(manifest.root) if manifest.root is not None else Path(".")
    n = manifest.n_spots
    x = np.empty((n, 3, size, size), np.float32)
    y = np.empty(n, np.int64)
    day = np.empty(n, np.int64)
    angle, image, spot = [], [], []
    i = 0
    for rec in manifest.records:
        if not rec.spots:
            continue
        img = load_image(root / rec.image_path)
        for s in rec.spots:
            x[i] = rectify_crop(img, s.quad, size)
            y[i] = s.label
            day[i] = rec.day_index
            angle.append(rec.angle_id)
            image.append(rec.image_path)
            spot.append(s.spot_id)
            i += 1
    ps = PatchSet(x, y, day, np.array(angle, dtype=str), np.array(image, dtype=str), np.array(spot, dtype=str))
    ps.x.setflags(write=False)
    _CACHE[key] = ps
    return ps
