"""Perspective rectification of annotated spots into fixed-size patches."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from PIL import Image

from .manifest import quad_area


class DegenerateQuad(ValueError):
    pass


@dataclass(frozen=True)
class Patch:
    pixels: np.ndarray          # (3, S, S) float32 in [0, 1]
    source: tuple[str, str]     # (image_path, spot_id)
    true_label: int


def load_image(path) -> np.ndarray:
    """RGB image as an (H, W, 3) float32 array in [0, 1]."""
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0


def homography(src, dst) -> np.ndarray:
    """3x3 matrix mapping the four ``src`` points onto ``dst``."""
    a, b = [], []
    for (x, y), (u, v) in zip(src, dst):
        a.append([x, y, 1, 0, 0, 0, -u * x, -u * y])
        a.append([0, 0, 0, x, y, 1, -v * x, -v * y])
        b.extend([u, v])
    try:
        h = np.linalg.solve(np.array(a, dtype=np.float64), np.array(b, dtype=np.float64))
    except np.linalg.LinAlgError:
        raise DegenerateQuad(f"no homography for quad {dst}") from None
    return np.append(h, 1.0).reshape(3, 3)


def _check_quad(quad) -> None:
    q = [tuple(map(float, p)) for p in quad]
    if len(q) != 4:
        raise DegenerateQuad(f"quad needs 4 corners, got {len(q)}")
    if quad_area(q) < 1e-6:
        raise DegenerateQuad(f"quad has zero area: {q}")
    for i in range(4):
        (x0, y0), (x1, y1), (x2, y2) = q[i], q[(i + 1) % 4], q[(i + 2) % 4]
        if abs((x1 - x0) * (y2 - y0) - (y1 - y0) * (x2 - x0)) < 1e-9:
            raise DegenerateQuad(f"quad has collinear corners: {q}")


def rectify_crop(image: np.ndarray, quad, out_size: int = 32) -> np.ndarray:
    """Warp ``quad`` onto an ``out_size`` square with bilinear sampling.

    Corner 0 lands top-left, then clockwise. Coordinates are continuous with
    pixel ``(x, y)`` centred at ``(x + 0.5, y + 0.5)``; samples outside the
    image are clamped to the border. Returns ``(3, S, S)`` float32 in [0, 1].
    """
    _check_quad(quad)
    img = np.asarray(image)
    if img.dtype == np.uint8:
        img = img.astype(np.float32) / 255.0
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"image must be (H, W, 3), got {img.shape}")
    s = out_size
    square = [(0, 0), (s, 0), (s, s), (0, s)]
    h = homography(square, quad)
    c = np.arange(s) + 0.5
    u, v = np.meshgrid(c, c)
    pts = h @ np.stack([u.ravel(), v.ravel(), np.ones(s * s)])
    x = pts[0] / pts[2] - 0.5
    y = pts[1] / pts[2] - 0.5
    height, width = img.shape[:2]
    x = np.clip(x, 0, width - 1)
    y = np.clip(y, 0, height - 1)
    x0 = np.minimum(np.floor(x).astype(np.int64), width - 2) if width > 1 else np.zeros(x.shape, np.int64)
    y0 = np.minimum(np.floor(y).astype(np.int64), height - 2) if height > 1 else np.zeros(y.shape, np.int64)
    x1 = np.minimum(x0 + 1, width - 1)
    y1 = np.minimum(y0 + 1, height - 1)
    fx = (x - x0)[:, None]
    fy = (y - y0)[:, None]
    top = img[y0, x0] * (1 - fx) + img[y0, x1] * fx
    bot = img[y1, x0] * (1 - fx) + img[y1, x1] * fx
    out = top * (1 - fy) + bot * fy
    out = np.clip(out, 0.0, 1.0).astype(np.float32)
    return np.ascontiguousarray(out.reshape(s, s, 3).transpose(2, 0, 1))
