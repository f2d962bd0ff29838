"""Seeded synthetic H&E-style specimens at four magnifications.

Each specimen is a continuous scene on the unit square: stroma, gland rings
around white lumens and hematoxylin-dense nuclei. A magnification view is the
centred window of side ``crop`` rendered at ``base_size`` pixels, so 40x
shows a 10x smaller window than 4x with correspondingly finer detail.

Grade I: round regular glands, small uniform nuclei.
Grade II: distorted glands, stratified irregular nuclei, smaller lumens.
Grade III: solid sheets of large, dark, pleomorphic nuclei; lumens mostly gone.
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .imaging import (MAGNIFICATIONS, REFERENCE_PROFILE, Grade, PatchRecord, dhash64,
                      laplacian_focus, od_to_rgb, resize_float, tissue_mask, write_png)

log = logging.getLogger(__name__)

CROP_FACTORS = {"4x": 1.0, "10x": 0.4, "20x": 0.2, "40x": 0.1}


@dataclass(frozen=True)
class GradeParams:
    gland_radius: float      # outer gland radius, scene units
    lumen_ratio: float       # lumen radius / gland radius
    shape_noise: float       # relative amplitude of boundary harmonics
    nucleus_radius: float
    nucleus_sd: float        # relative pleomorphism
    nucleus_amp: float       # hematoxylin density of nuclei
    texture: float           # chromatin granularity
    layers: int              # nuclear rows along the gland wall
    position_jitter: float   # relative to nucleus spacing
    sheet: bool              # solid tumour sheet instead of glands
    spacing: float = 2.3     # centre-to-centre nucleus distance along the wall, in radii


GRADE_PARAMS = {
    # I and II differ mostly in nuclear detail (size, pleomorphism, stratification) on top of a
    # modest change in gland shape; III loses glands entirely.
    Grade.I: GradeParams(0.105, 0.62, 0.03, 0.0036, 0.08, 0.85, 0.10, 1, 0.08, False),
    Grade.II: GradeParams(0.095, 0.42, 0.22, 0.0048, 0.20, 1.05, 0.30, 2, 0.45, False),
    Grade.III: GradeParams(0.0, 0.0, 0.0, 0.0062, 0.35, 1.30, 0.55, 0, 0.5, True),
}


@dataclass
class SynthSpec:
    n_per_class: int = 50
    base_size: int = 640
    magnifications: tuple = MAGNIFICATIONS
    seed: int = 0
    class_ratio: tuple = (1.0, 1.0, 1.0)
    stain_jitter: float = 0.05
    intensity_range: tuple = (0.8, 1.25)
    noise_od: float = 0.015
    psf_px: float = 1.5      # optical blur (Gaussian sigma) in pixels of a 640-px view

    def validate(self) -> None:
        if self.n_per_class < 1:
            raise ValueError("n_per_class must be >= 1")
        if self.base_size < 32:
            raise ValueError("base_size must be >= 32")
        bad = [m for m in self.magnifications if m not in MAGNIFICATIONS]
        if bad:
            raise ValueError(f"unknown magnifications {bad}")
        if len(self.class_ratio) != 3 or min(self.class_ratio) <= 0:
            raise ValueError("class_ratio needs three positive entries")

    def counts(self) -> list[int]:
        return [max(1, int(round(self.n_per_class * r))) for r in self.class_ratio]


# ---------------------------------------------------------------------------
# hashed value noise, consistent across views of one specimen


def _hash01(ix: np.ndarray, iy: np.ndarray, salt: int) -> np.ndarray:
    h = (ix.astype(np.uint64) * np.uint64(0x9E3779B97F4A7C15)
         ^ iy.astype(np.uint64) * np.uint64(0xC2B2AE3D27D4EB4F)
         ^ np.uint64(int(salt) & 0xFFFFFFFFFFFFFFFF))
    h ^= h >> np.uint64(31)
    h *= np.uint64(0xBF58476D1CE4E5B9)
    h ^= h >> np.uint64(29)
    return (h >> np.uint64(11)).astype(np.float64) / float(1 << 53)


def value_noise(x: np.ndarray, y: np.ndarray, cell: float, salt: int) -> np.ndarray:
    """Smooth noise in [0, 1) with lattice spacing ``cell`` (scene units)."""
    gx, gy = x / cell, y / cell
    x0, y0 = np.floor(gx), np.floor(gy)
    fx, fy = gx - x0, gy - y0
    fx, fy = fx * fx * (3 - 2 * fx), fy * fy * (3 - 2 * fy)
    x0 = x0.astype(np.int64) + (1 << 40)
    y0 = y0.astype(np.int64) + (1 << 40)
    v00, v10 = _hash01(x0, y0, salt), _hash01(x0 + 1, y0, salt)
    v01, v11 = _hash01(x0, y0 + 1, salt), _hash01(x0 + 1, y0 + 1, salt)
    return (v00 * (1 - fx) + v10 * fx) * (1 - fy) + (v01 * (1 - fx) + v11 * fx) * fy


# ---------------------------------------------------------------------------
# scene construction


@dataclass
class Gland:
    cx: float
    cy: float
    radius: float
    lumen_ratio: float
    harmonics: np.ndarray  # (k, 3): order, amplitude, phase


@dataclass
class Scene:
    grade: Grade
    glands: list
    blobs: np.ndarray          # (n, 3): x, y, sigma of sheet metaballs
    nuclei: np.ndarray         # (n, 7): x, y, rx, ry, angle, amp, texture
    salt: int
    stain: np.ndarray          # (2, 3) H and E OD vectors
    intensity: float
    stroma_level: float


def _gland_radius_at(g: Gland, theta: np.ndarray) -> np.ndarray:
    r = np.ones_like(theta)
    for order, amp, phase in g.harmonics:
        r = r + amp * np.cos(order * theta + phase)
    return g.radius * r


def _make_glands(p: GradeParams, rng: np.random.Generator) -> list[Gland]:
    spacing = 2.35 * p.gland_radius
    # a gland wall crosses the scene centre so every zoom level contains epithelium
    r_mid = p.gland_radius * (1 + p.lumen_ratio) / 2
    theta = rng.uniform(0, 2 * np.pi)
    ox, oy = 0.5 - r_mid * np.cos(theta), 0.5 - r_mid * np.sin(theta)
    glands = []
    n = int(np.ceil(0.6 / spacing)) + 1
    for i in range(-n, n + 1):
        for j in range(-n, n + 1):
            cx = ox + i * spacing + (0 if (i, j) == (0, 0) else rng.normal(0, 0.08 * spacing))
            cy = oy + j * spacing + (0 if (i, j) == (0, 0) else rng.normal(0, 0.08 * spacing))
            if not (-0.15 < cx < 1.15 and -0.15 < cy < 1.15):
                continue
            k = 4
            harm = np.column_stack([np.arange(2, 2 + k),
                                    rng.normal(0, p.shape_noise / np.sqrt(k), k),
                                    rng.uniform(0, 2 * np.pi, k)])
            if (i, j) == (0, 0):
                harm[:, 1] *= 0.5
            radius = p.gland_radius * rng.uniform(0.9, 1.1)
            glands.append(Gland(cx, cy, radius, p.lumen_ratio * rng.uniform(0.9, 1.1), harm))
    return glands


def _nucleus(rng, x, y, p: GradeParams, elong: float = 1.0):
    r = p.nucleus_radius * max(0.4, 1 + p.nucleus_sd * rng.standard_normal())
    aspect = max(0.5, 1 + (p.nucleus_sd + 0.05) * rng.standard_normal() * 0.6)
    amp = p.nucleus_amp * max(0.5, 1 + 0.5 * p.nucleus_sd * rng.standard_normal())
    return (x, y, r * aspect * elong, r / aspect, rng.uniform(0, np.pi), amp, p.texture)


def _gland_nuclei(g: Gland, p: GradeParams, rng) -> list:
    out = []
    spacing = p.spacing * p.nucleus_radius
    wall = g.radius * (1 - g.lumen_ratio)
    for layer in range(p.layers):
        depth = 0.75 - 0.3 * layer
        r_ring = g.radius * g.lumen_ratio + wall * depth
        n = max(6, int(2 * np.pi * r_ring / spacing))
        th = np.linspace(0, 2 * np.pi, n, endpoint=False) + rng.uniform(0, 2 * np.pi)
        th = th + rng.normal(0, p.position_jitter * spacing / r_ring, n)
        rr = _gland_radius_at(g, th) / g.radius
        for t, scale in zip(th, rr):
            if layer > 0 and rng.random() < 0.35:
                continue
            rad = r_ring * scale + rng.normal(0, p.position_jitter * p.nucleus_radius)
            out.append(_nucleus(rng, g.cx + rad * np.cos(t), g.cy + rad * np.sin(t), p))
    return out


def _sheet(p: GradeParams, rng):
    k = int(rng.integers(3, 6))
    blobs = [(0.5 + rng.normal(0, 0.03), 0.5 + rng.normal(0, 0.03), rng.uniform(0.16, 0.22))]
    for _ in range(k):
        blobs.append((rng.uniform(0.1, 0.9), rng.uniform(0.1, 0.9), rng.uniform(0.08, 0.16)))
    blobs = np.array(blobs)
    spacing = 2.2 * p.nucleus_radius
    nuclei = []
    xs = np.arange(-0.05, 1.05, spacing)
    for row, y in enumerate(np.arange(-0.05, 1.05, spacing * 0.87)):
        off = 0.5 * spacing * (row % 2)
        px = xs + off + rng.normal(0, p.position_jitter * spacing, xs.size)
        py = y + rng.normal(0, p.position_jitter * spacing, xs.size)
        inside = _metaball(px, py, blobs) > 1.0
        keep = inside & (rng.random(xs.size) < 0.92)
        for x_, y_ in zip(px[keep], py[keep]):
            nuclei.append(_nucleus(rng, x_, y_, p))
    # a few residual abortive lumens
    glands = []
    for _ in range(int(rng.integers(0, 3))):
        glands.append(Gland(rng.uniform(0.1, 0.9), rng.uniform(0.1, 0.9), rng.uniform(0.02, 0.04), 0.5,
                            np.zeros((0, 3))))
    return blobs, nuclei, glands


def _metaball(x, y, blobs) -> np.ndarray:
    field = np.zeros(np.broadcast(x, y).shape)
    for bx, by, s in blobs:
        field += np.exp(-((x - bx) ** 2 + (y - by) ** 2) / (2 * s * s)) * 1.6
    return field


def _stroma_nuclei(rng, n: int) -> list:
    fib = GradeParams(0, 0, 0, 0.0028, 0.1, 0.7, 0.0, 0, 0, False)
    return [_nucleus(rng, rng.uniform(-0.02, 1.02), rng.uniform(-0.02, 1.02), fib, elong=2.5) for _ in range(n)]


def build_scene(grade: Grade, rng: np.random.Generator, spec: SynthSpec) -> Scene:
    p = GRADE_PARAMS[grade]
    if p.sheet:
        blobs, nuclei, glands = _sheet(p, rng)
    else:
        glands = _make_glands(p, rng)
        nuclei = [n for g in glands for n in _gland_nuclei(g, p, rng)]
        blobs = np.zeros((0, 3))
    nuclei += _stroma_nuclei(rng, int(rng.integers(250, 400)))
    ref = REFERENCE_PROFILE.stain_matrix
    stain = ref + rng.normal(0, spec.stain_jitter, ref.shape)
    stain = np.abs(stain) / np.linalg.norm(stain, axis=1, keepdims=True)
    return Scene(grade, glands, blobs, np.array(nuclei, dtype=np.float64),
                 int(rng.integers(0, 2 ** 62)), stain,
                 float(rng.uniform(*spec.intensity_range)), float(rng.uniform(0.30, 0.42)))


# ---------------------------------------------------------------------------
# rendering


def render_view(scene: Scene, crop: float, size: int, noise_rng: np.random.Generator,
                noise_od: float = 0.015, psf_px: float = 0.0) -> np.ndarray:
    x0 = 0.5 - crop / 2
    px = crop / size
    coords = (x0 + (np.arange(size) + 0.5) * px).astype(np.float32)
    X, Y = np.meshgrid(coords, coords)

    stroma = _smooth_field(scene.salt, x0, crop, size)
    E = (scene.stroma_level * (0.75 + 0.5 * stroma)).astype(np.float32)
    H = np.full_like(E, 0.05)

    if scene.blobs.size:
        inside = _metaball(X, Y, scene.blobs) > 1.0
        E = np.where(inside, 0.42, E)
        H = np.where(inside, 0.22, H)

    for g in scene.glands:
        reach = g.radius * 1.6
        if g.cx + reach < x0 or g.cx - reach > x0 + crop or g.cy + reach < x0 or g.cy - reach > x0 + crop:
            continue
        sl = _window(g.cx, g.cy, reach, x0, px, size)
        if sl is None:
            continue
        xs, ys = X[sl], Y[sl]
        d = np.hypot(xs - g.cx, ys - g.cy)
        th = np.arctan2(ys - g.cy, xs - g.cx)
        R = _gland_radius_at(g, th)
        edge = max(px, 0.002)
        wall = np.clip((R - d) / edge + 0.5, 0, 1)
        lumen = np.clip((g.lumen_ratio * R - d) / edge + 0.5, 0, 1)
        E[sl] = E[sl] * (1 - wall) + 0.55 * wall
        H[sl] = H[sl] * (1 - wall) + 0.12 * wall
        E[sl] = E[sl] * (1 - lumen) + 0.02 * lumen
        H[sl] = H[sl] * (1 - lumen) + 0.01 * lumen

    _stamp_nuclei(scene, H, E, X, Y, x0, crop, px, size)
    if psf_px > 0:
        sigma = psf_px * size / 640.0
        H, E = gaussian_blur(H, sigma), gaussian_blur(E, sigma)

    stain = (scene.intensity * scene.stain).astype(np.float32)
    od = H[..., None] * stain[0] + E[..., None] * stain[1]
    od += np.float32(0.01) + noise_rng.standard_normal(od.shape, dtype=np.float32) * np.float32(noise_od)
    return od_to_rgb(np.maximum(od, 0.0))


def gaussian_blur(field: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian filter with edge replication."""
    r = max(1, int(np.ceil(3 * sigma)))
    k = np.exp(-0.5 * (np.arange(-r, r + 1) / sigma) ** 2)
    k = (k / k.sum()).astype(field.dtype)
    out = np.pad(field, ((r, r), (0, 0)), mode="edge")
    out = sum(k[i] * out[i:i + field.shape[0]] for i in range(k.size))
    out = np.pad(out, ((0, 0), (r, r)), mode="edge")
    return sum(k[i] * out[:, i:i + field.shape[1]] for i in range(k.size))


def _smooth_field(salt: int, x0: float, crop: float, size: int) -> np.ndarray:
    # low-frequency stroma texture; evaluated on a coarse grid and upsampled
    n = max(8, size // 4)
    c = x0 + (np.arange(n) + 0.5) * (crop / n)
    Xs, Ys = np.meshgrid(c, c)
    f = value_noise(Xs, Ys, 0.05, salt) * 0.6 + value_noise(Xs, Ys, 0.012, salt + 1) * 0.4
    return resize_float(f, size, size)


def _window(cx, cy, reach, x0, px, size):
    i0 = int(np.floor((cy - reach - x0) / px))
    i1 = int(np.ceil((cy + reach - x0) / px)) + 1
    j0 = int(np.floor((cx - reach - x0) / px))
    j1 = int(np.ceil((cx + reach - x0) / px)) + 1
    i0, j0 = max(i0, 0), max(j0, 0)
    i1, j1 = min(i1, size), min(j1, size)
    if i0 >= i1 or j0 >= j1:
        return None
    return (slice(i0, i1), slice(j0, j1))


def _stamp_nuclei(scene: Scene, H, E, X, Y, x0, crop, px, size):
    nuc = scene.nuclei
    if nuc.size == 0:
        return
    reach = np.maximum(nuc[:, 2], nuc[:, 3]) * 1.3
    vis = ((nuc[:, 0] + reach > x0) & (nuc[:, 0] - reach < x0 + crop)
           & (nuc[:, 1] + reach > x0) & (nuc[:, 1] - reach < x0 + crop))
    # chromatin grain is only resolved once its cells span a few pixels
    cell = GRADE_PARAMS[scene.grade].nucleus_radius / 2.5
    grain_vis = float(np.clip(cell / px / 2.0 - 0.5, 0.0, 1.0))
    grain = (value_noise(X, Y, cell, scene.salt + 7) - 0.5) * 2.0 if grain_vis > 0 else None
    for k in np.flatnonzero(vis):
        x, y, rx, ry, ang, amp, tex = nuc[k]
        sl = _window(x, y, reach[k], x0, px, size)
        if sl is None:
            continue
        dx, dy = X[sl] - x, Y[sl] - y
        c, s = np.cos(ang), np.sin(ang)
        u, v = (dx * c + dy * s) / rx, (-dx * s + dy * c) / ry
        q = np.sqrt(u * u + v * v)
        r_px = min(rx, ry) / px
        alpha = np.clip((1.0 - q) * r_px + 0.5, 0.0, 1.0)
        if grain is not None and tex > 0:
            alpha = alpha * (1.0 + tex * grain_vis * grain[sl])
        H[sl] = H[sl] + amp * alpha
        E[sl] = E[sl] * (1.0 - 0.6 * np.clip(alpha, 0, 1))


# ---------------------------------------------------------------------------
# dataset writer


def specimen_views(grade: Grade, index: int, spec: SynthSpec) -> dict[str, np.ndarray]:
    rng = np.random.default_rng([spec.seed, int(grade), index])
    scene = build_scene(grade, rng, spec)
    views = {}
    for mag in spec.magnifications:
        noise_rng = np.random.default_rng([spec.seed, int(grade), index, MAGNIFICATIONS.index(mag), 1])
        views[mag] = render_view(scene, CROP_FACTORS[mag], spec.base_size, noise_rng, spec.noise_od,
                                 spec.psf_px)
    return views


def source_id_for(grade: Grade, index: int, mag: str) -> str:
    return f"{grade.name}-{index:04d}@{mag}"


def specimen_key(source_id: str) -> str:
    """Views of one specimen share everything before the ``@``."""
    return source_id.split("@", 1)[0]


def _render_specimen(grade: Grade, idx: int, spec: SynthSpec, image_dir: Path) -> list[PatchRecord]:
    records = []
    for mag, img in specimen_views(grade, idx, spec).items():
        sid = source_id_for(grade, idx, mag)
        write_png(image_dir / f"{sid}.png", img)
        _, frac = tissue_mask(img)
        records.append(PatchRecord(sid, 0, 0, mag, frac, laplacian_focus(img), dhash64(img), grade))
    return records


def generate(spec: SynthSpec, out_dir, jobs: int = 1) -> list[PatchRecord]:
    """Write ``images/*.png``, ``manifest.jsonl`` and ``synth_spec.json`` under ``out_dir``."""
    spec.validate()
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    tasks = [(grade, idx) for grade, count in zip(Grade, spec.counts()) for idx in range(count)]
    work = lambda t: _render_specimen(t[0], t[1], spec, out / "images")  # noqa: E731
    records = []
    if jobs > 1:
        with ThreadPoolExecutor(jobs) as pool:
            for recs in pool.map(work, tasks):
                records.extend(recs)
    else:
        for t in tasks:
            records.extend(work(t))
    log.info("datagen: %d specimens, %d images", len(tasks), len(records))
    records.sort(key=lambda r: r.source_id)
    with open(out / "manifest.jsonl", "w") as fh:
        for r in records:
            fh.write(r.to_json() + "\n")
    spec_dict = asdict(spec)
    spec_dict["magnifications"] = list(spec.magnifications)
    (out / "synth_spec.json").write_text(json.dumps(spec_dict, sort_keys=True, indent=2) + "\n")
    return records
