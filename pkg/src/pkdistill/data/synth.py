"""Synthetic parking-lot image streams with a controllable visual style.

Each camera angle sees a fixed grid of spots through its own affine view
(rotation, shear, scale). Empty spots show textured asphalt and lane lines;
occupied spots add a shaded, rounded vehicle body with windows and a cast
shadow. Domain style (vehicle hue, asphalt tone, contrast, noise,
occluders, day-to-day illumination) is what separates one synthetic "lot"
from another.
"""
from __future__ import annotations

import colorsys
import datetime as dt
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image

from ..labels import EMPTY, NAMES, OCCUPIED
from .manifest import DatasetManifest, ImageRecord, SpotAnnotation, parse_manifest, record_to_dict

SPOT_W = 22.0
SPOT_H = 36.0
MARGIN = 8.0
START_DATE = dt.date(2017, 1, 2)


@dataclass(frozen=True)
class SynthStyle:
    base_hue: float = 0.0
    contrast: float = 1.0
    noise: float = 0.02
    occlusion_prob: float = 0.05
    illum_drift: float = 0.1
    asphalt: tuple[float, float, float] = (0.42, 0.42, 0.43)
    hue_focus: float = 0.7       # share of coloured vehicles near base_hue; the rest draw any hue
    cadence_minutes: int = 5
    overhang: float = 0.0        # chance of an off-centre car, or a neighbour intruding on an empty spot
    hue_focus_end: float | None = None   # palette drift: hue_focus on the last day, linear in between
    illum_trend: float = 0.0     # illumination change from first to last day (seasonal drift)


@dataclass(frozen=True)
class SynthSpec:
    domain_name: str
    n_days: int
    n_angles: int
    images_per_day: int
    spots_per_image: int
    style: SynthStyle = field(default_factory=SynthStyle)
    occupancy_rate: float = 0.5
    seed: int = 0

    def __post_init__(self):
        for name in ("n_days", "n_angles", "images_per_day", "spots_per_image"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if not 0 <= self.occupancy_rate <= 1:
            raise ValueError(f"occupancy_rate must be in [0, 1], got {self.occupancy_rate}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        d = dict(d)
        style = dict(d.pop("style", {}))
        if "asphalt" in style:
            style["asphalt"] = tuple(style["asphalt"])
        return cls(style=SynthStyle(**style), **d)

    def digest(self) -> str:
        text = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()[:16]


# --------------------------------------------------------------------------
# geometry

@dataclass(frozen=True)
class View:
    """Affine lot-plane -> image mapping of one camera angle."""

    matrix: np.ndarray
    offset: np.ndarray
    size: tuple[int, int]        # (width, height)
    rows: int
    cols: int

    def to_image(self, pts: np.ndarray) -> np.ndarray:
        return pts @ self.matrix.T + self.offset

    def to_lot(self, pts: np.ndarray) -> np.ndarray:
        return (pts - self.offset) @ np.linalg.inv(self.matrix).T


def make_view(spots: int, rng: np.random.Generator) -> View:
    rows = 1 if spots <= 4 else 2
    cols = math.ceil(spots / rows)
    theta = math.radians(rng.uniform(-14, 14))
    shear = rng.uniform(-0.15, 0.15)
    scale = rng.uniform(0.92, 1.08)
    rot = np.array([[math.cos(theta), -math.sin(theta)], [math.sin(theta), math.cos(theta)]])
    m = scale * rot @ np.array([[1.0, shear], [0.0, 1.0]])
    corners = np.array([[0, 0], [cols * SPOT_W, 0], [cols * SPOT_W, rows * SPOT_H], [0, rows * SPOT_H]])
    img = corners @ m.T
    lo, hi = img.min(axis=0), img.max(axis=0)
    offset = MARGIN - lo
    w, h = (int(math.ceil(v)) for v in hi - lo + 2 * MARGIN)
    return View(m, offset, (w, h), rows, cols)


def spot_cells(view: View, n: int) -> list[tuple[int, int]]:
    return [(i // view.cols, i % view.cols) for i in range(n)]


def spot_quad(view: View, row: int, col: int) -> tuple[tuple[float, float], ...]:
    x0, y0 = col * SPOT_W, row * SPOT_H
    lot = np.array([[x0, y0], [x0 + SPOT_W, y0], [x0 + SPOT_W, y0 + SPOT_H], [x0, y0 + SPOT_H]])
    return tuple((round(float(x), 3), round(float(y), 3)) for x, y in view.to_image(lot))


# --------------------------------------------------------------------------
# rendering

def _smooth_field(rng, shape, cells=6):
    """Low-frequency noise in [-1, 1] by bilinear upsampling of a coarse grid."""
    h, w = shape
    g = rng.uniform(-1, 1, size=(cells + 1, cells + 1))
    ys = np.linspace(0, cells, h)
    xs = np.linspace(0, cells, w)
    y0 = np.minimum(ys.astype(int), cells - 1)
    x0 = np.minimum(xs.astype(int), cells - 1)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    a = g[y0][:, x0]
    b = g[y0][:, x0 + 1]
    c = g[y0 + 1][:, x0]
    d = g[y0 + 1][:, x0 + 1]
    return (a * (1 - fx) + b * fx) * (1 - fy) + (c * (1 - fx) + d * fx) * fy


def _rounded_box(px, py, cx, cy, hx, hy, r):
    """Signed distance to a rounded rectangle (negative inside)."""
    qx = np.abs(px - cx) - (hx - r)
    qy = np.abs(py - cy) - (hy - r)
    outside = np.hypot(np.maximum(qx, 0), np.maximum(qy, 0))
    inside = np.minimum(np.maximum(qx, qy), 0)
    return outside + inside - r


def vehicle_color(style: SynthStyle, rng) -> np.ndarray:
    if rng.random() < 0.7:
        if rng.random() < style.hue_focus:
            hue = (style.base_hue + rng.normal(0, 0.05)) % 1.0
        else:
            hue = rng.random()
        rgb = colorsys.hsv_to_rgb(hue, rng.uniform(0.5, 0.9), rng.uniform(0.45, 0.9))
    else:
        v = rng.choice([rng.uniform(0.08, 0.2), rng.uniform(0.55, 0.7), rng.uniform(0.85, 0.95)])
        rgb = (v, v, v)
    return np.array(rgb)


def render_image(view: View, labels, style: SynthStyle, illum: float, rng) -> np.ndarray:
    """Render one frame; ``labels`` gives the class of spot i in grid order."""
    w, h = view.size
    yy, xx = np.mgrid[0:h, 0:w] + 0.5
    lot = view.to_lot(np.stack([xx.ravel(), yy.ravel()], axis=1))
    lx = lot[:, 0].reshape(h, w)
    ly = lot[:, 1].reshape(h, w)

    asphalt = np.asarray(style.asphalt, dtype=np.float64)
    tex = 0.05 * _smooth_field(rng, (h, w), 6) + 0.02 * _smooth_field(rng, (h, w), 20)
    img = asphalt[None, None, :] * (1 + tex[..., None])

    col = np.floor(lx / SPOT_W).astype(int)
    row = np.floor(ly / SPOT_H).astype(int)
    inside_lot = (col >= 0) & (col < view.cols) & (row >= 0) & (row < view.rows)
    u = lx - col * SPOT_W
    v = ly - row * SPOT_H

    # lane lines on the spot boundaries
    line = inside_lot & ((np.minimum(u, SPOT_W - u) < 0.9) | ((row == 0) & (v < 0.9)) |
                         ((row == view.rows - 1) & (SPOT_H - v < 0.9)))
    paint = np.array([0.86, 0.86, 0.80])
    img[line] = 0.35 * img[line] + 0.65 * paint

    spot_idx = np.where(inside_lot, row * view.cols + col, -1)
    n = len(labels)
    for i in range(n):
        mask = spot_idx == i
        if not mask.any():
            continue
        pu, pv = u[mask], v[mask]
        px = img[mask]
        intrude = rng.random() < style.overhang
        if labels[i] == OCCUPIED or intrude:
            side = 1 if rng.random() < 0.5 else -1
            cx = SPOT_W / 2 + rng.uniform(-1.5, 1.5)
            if intrude:
                # occupied: parked across the line; empty: the neighbour's car spills in
                cx += side * (rng.uniform(3.0, 7.0) if labels[i] == OCCUPIED else rng.uniform(10.0, 14.5))
            cy = SPOT_H / 2 + rng.uniform(-2.5, 2.5)
            hx = rng.uniform(7.2, 8.6)
            hy = rng.uniform(13.0, 15.5)
            shadow = _rounded_box(pu, pv, cx + 1.8, cy + 1.8, hx + 0.6, hy + 0.6, 3.5) < 0
            px[shadow] *= 0.55
            body = _rounded_box(pu, pv, cx, cy, hx, hy, 3.5)
            car = body < 0
            color = vehicle_color(style, rng)
            radial = np.clip(1 - 0.25 * (np.abs(pu - cx) / hx) ** 2 - 0.1 * (np.abs(pv - cy) / hy), 0.5, 1)
            shade = color[None, :] * radial[:, None]
            front = 1 if rng.random() < 0.5 else -1
            t = front * (pv - cy) / hy                      # -1 rear .. 1 front
            windshield = car & (t > 0.28) & (t < 0.52) & (np.abs(pu - cx) < hx - 1.2)
            rear = car & (t < -0.5) & (t > -0.7) & (np.abs(pu - cx) < hx - 1.6)
            roof = car & (t >= -0.5) & (t <= 0.28) & (np.abs(pu - cx) < hx - 2.0)
            shade[roof] = np.clip(shade[roof] * 1.12 + 0.03, 0, 1)
            shade[windshield | rear] = 0.12 + 0.1 * shade[windshield | rear]
            edge = car & (body > -0.8)
            shade[edge] *= 0.7
            px[car] = shade[car]
        if rng.random() < style.occlusion_prob:
            ox, oy = rng.uniform(0, SPOT_W), rng.uniform(0, SPOT_H)
            rx, ry = rng.uniform(5, 11), rng.uniform(6, 14)
            blob = ((pu - ox) / rx) ** 2 + ((pv - oy) / ry) ** 2 < 1
            px[blob] *= 0.5
        img[mask] = px

    img *= illum
    m = img.mean()
    img = m + style.contrast * (img - m)
    img += rng.normal(0, style.noise, size=img.shape)
    return np.clip(img, 0, 1)


# --------------------------------------------------------------------------
# dataset

def _stream(spec: SynthSpec, *keys: int) -> np.random.Generator:
    """Independent generator per (domain, seed, purpose, ...) so domains never share draws."""
    domain = int.from_bytes(hashlib.sha256(spec.domain_name.encode()).digest()[:4], "little")
    return np.random.default_rng([domain, spec.seed, *keys])


def day_style(spec: SynthSpec, day: int) -> SynthStyle:
    st = spec.style
    if st.hue_focus_end is None or spec.n_days < 2:
        return st
    t = day / (spec.n_days - 1)
    return replace(st, hue_focus=st.hue_focus + t * (st.hue_focus_end - st.hue_focus))


def day_illumination(spec: SynthSpec, day: int) -> float:
    rng = _stream(spec, 7, day)
    t = day / (spec.n_days - 1) if spec.n_days > 1 else 0.5
    trend = 1.0 + spec.style.illum_trend * (t - 0.5)
    return trend * (1.0 + spec.style.illum_drift * rng.uniform(-1, 1))


def synth_generate(spec: SynthSpec, output_dir) -> DatasetManifest:
    """Render all images, write ``manifest.jsonl`` and ``synth.json`` under ``output_dir``.

    Every image draws from its own seeded stream, so output is byte-identical
    for a fixed spec.
    """
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    probe = out / ".write-probe"
    probe.write_bytes(b"")
    probe.unlink()

    views = [make_view(spec.spots_per_image, _stream(spec, 1, a)) for a in range(spec.n_angles)]
    lines = []
    cadence = spec.style.cadence_minutes * 60
    for day in range(spec.n_days):
        date = (START_DATE + dt.timedelta(days=day)).isoformat()
        base_illum = day_illumination(spec, day)
        style = day_style(spec, day)
        for a, view in enumerate(views):
            angle = f"{spec.domain_name}-cam{a + 1}"
            cells = spot_cells(view, spec.spots_per_image)
            for k in range(spec.images_per_day):
                rng = _stream(spec, 2, day, a, k)
                labels = [OCCUPIED if rng.random() < spec.occupancy_rate else EMPTY for _ in cells]
                frac = (k + 0.5) / spec.images_per_day
                illum = base_illum * (0.92 + 0.12 * math.sin(math.pi * frac))
                pixels = render_image(view, labels, style, illum, rng)
                rel = f"images/{angle}/d{day:03d}_{k:03d}.png"
                path = out / rel
                path.parent.mkdir(parents=True, exist_ok=True)
                Image.fromarray(np.round(pixels * 255).astype(np.uint8)).save(path, optimize=False)
                seconds = 8 * 3600 + k * cadence
                spots = [SpotAnnotation(f"s{i + 1:02d}", spot_quad(view, r, c), lab)
                         for i, ((r, c), lab) in enumerate(zip(cells, labels))]
                rec = ImageRecord(rel, spec.domain_name, angle, day, seconds % 86400, tuple(spots), date)
                lines.append(json.dumps(record_to_dict(rec), separators=(",", ":")))
    (out / "manifest.jsonl").write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    (out / "synth.json").write_text(json.dumps({"digest": spec.digest(), "spec": spec.to_dict()},
                                               sort_keys=True, indent=1) + "\n", encoding="utf-8")
    return parse_manifest(out / "manifest.jsonl")


def domain_style(name: str) -> SynthStyle:
    """Two reference styles.

    A is a bright, high-contrast lot whose lighting varies at random from
    day to day. B is a noisy, low-contrast lot that brightens steadily over
    its recording period, so models that only see its early days miss the
    bright conditions that dominate part of A.
    """
    if name == "A":
        return SynthStyle(base_hue=0.0, contrast=1.0, noise=0.04, occlusion_prob=0.15, illum_drift=0.4,
                          asphalt=(0.45, 0.45, 0.46), hue_focus=0.5, cadence_minutes=5, overhang=0.3)
    if name == "B":
        return SynthStyle(base_hue=0.6, contrast=0.6, noise=0.09, occlusion_prob=0.25, illum_drift=0.05,
                          asphalt=(0.45, 0.44, 0.42), hue_focus=0.5, cadence_minutes=30, overhang=0.25,
                          illum_trend=0.8)
    raise ValueError(f"unknown reference domain {name!r}")


def benchmark_spec(name: str) -> SynthSpec:
    """Desk-scale benchmark: A is high volume (two wide views, 4 frames a day), B low volume."""
    if name == "A":
        return SynthSpec("A", n_days=20, n_angles=2, images_per_day=4, spots_per_image=8,
                         style=domain_style("A"), seed=0)
    if name == "B":
        return SynthSpec("B", n_days=20, n_angles=3, images_per_day=1, spots_per_image=6,
                         style=domain_style("B"), seed=1)
    raise ValueError(f"unknown reference domain {name!r}")
