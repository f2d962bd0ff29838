"""Preprocessing for H&E-style RGB images.

Images are ``uint8`` arrays of shape ``(H, W, 3)``. Everything here is a pure
function of its inputs (and of an explicit ``rng`` where randomness is used).
"""

from __future__ import annotations

import enum
import io
import json
from dataclasses import dataclass, asdict
from pathlib import Path
from typing import Iterator

import numpy as np
from PIL import Image

MAGNIFICATIONS = ("4x", "10x", "20x", "40x")
GRADES = ("I", "II", "III")

# Standardization applied to both streams after scaling to [0, 1].
CHANNEL_MEAN = np.array([0.485, 0.456, 0.406], dtype=np.float32)
CHANNEL_STD = np.array([0.229, 0.224, 0.225], dtype=np.float32)

GRAY_WEIGHTS = np.array([0.299, 0.587, 0.114])


class StainEstimationError(ValueError):
    """Not enough usable tissue pixels to estimate a stain basis."""


class Grade(enum.IntEnum):
    I = 0
    II = 1
    III = 2

    @classmethod
    def parse(cls, value) -> "Grade":
        if isinstance(value, Grade):
            return value
        if isinstance(value, (int, np.integer)):
            return cls(int(value))
        text = str(value).strip().upper()
        for prefix in ("GRADE_", "GRADE-", "GRADE"):
            if text.startswith(prefix):
                text = text[len(prefix):]
        aliases = {"1": "I", "2": "II", "3": "III"}
        text = aliases.get(text, text)
        try:
            return cls[text]
        except KeyError:
            raise ValueError(f"unknown grade label {value!r}") from None


def check_image(img: np.ndarray) -> np.ndarray:
    if img.dtype != np.uint8 or img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected uint8 RGB image (H, W, 3), got {img.dtype} {img.shape}")
    if img.shape[0] < 1 or img.shape[1] < 1:
        raise ValueError("image must be at least 1x1")
    return img


def to_gray(img: np.ndarray) -> np.ndarray:
    return img.astype(np.float64) @ GRAY_WEIGHTS


def read_png(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()


def decode_png(blob: bytes) -> np.ndarray:
    with Image.open(io.BytesIO(blob)) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()


def write_png(path, img: np.ndarray, compress_level: int = 1) -> None:
    # fixed compression settings so identical pixels give identical bytes; level 1 because
    # tissue texture barely compresses and higher levels cost 50% more time
    Image.fromarray(check_image(img), mode="RGB").save(path, format="PNG", optimize=False,
                                                       compress_level=compress_level)


# ---------------------------------------------------------------------------
# optical density and Macenko


@dataclass(frozen=True)
class StainProfile:
    stain_matrix: np.ndarray  # (2, 3): hematoxylin row, eosin row; unit norm
    max_conc: np.ndarray      # (2,)

    def __post_init__(self):
        m = np.asarray(self.stain_matrix, dtype=np.float64)
        c = np.asarray(self.max_conc, dtype=np.float64)
        if m.shape != (2, 3) or c.shape != (2,):
            raise ValueError("stain_matrix must be 2x3 and max_conc length 2")
        if np.any(np.abs(np.linalg.norm(m, axis=1) - 1.0) > 1e-6):
            raise ValueError("stain vectors must have unit norm")
        if np.any(c <= 0):
            raise ValueError("max concentrations must be positive")
        object.__setattr__(self, "stain_matrix", m)
        object.__setattr__(self, "max_conc", c)

    def to_dict(self) -> dict:
        return {"stain_matrix": self.stain_matrix.tolist(), "max_conc": self.max_conc.tolist()}


# Widely used H&E reference basis; the fallback when no reference image is given.
REFERENCE_PROFILE = StainProfile(
    stain_matrix=np.array([[0.5626, 0.7201, 0.4062], [0.2159, 0.8012, 0.5581]])
    / np.linalg.norm([[0.5626, 0.7201, 0.4062], [0.2159, 0.8012, 0.5581]], axis=1, keepdims=True),
    max_conc=np.array([1.9705, 1.0308]),
)


def rgb_to_od(img: np.ndarray, i0: float = 255.0) -> np.ndarray:
    if i0 <= 0:
        raise ValueError("i0 must be positive")
    od = -np.log10((img.astype(np.float64) + 1.0) / i0)
    return np.maximum(od, 0.0)


def od_to_rgb(od: np.ndarray, i0: float = 255.0) -> np.ndarray:
    rgb = i0 * np.power(10.0, -od) - 1.0
    return np.clip(np.rint(rgb), 0, 255).astype(np.uint8)


def _stain_basis_from_eigs(od_t: np.ndarray) -> np.ndarray:
    cov = np.cov(od_t, rowvar=False)
    _, vecs = np.linalg.eigh(cov)
    plane = vecs[:, [2, 1]]
    # OD vectors are non-negative; orient the basis into the positive octant
    for k in range(2):
        if plane[:, k].sum() < 0:
            plane[:, k] = -plane[:, k]
    return plane


def estimate_stain_profile_macenko(od: np.ndarray, beta: float = 0.15, alpha_pct: float = 1.0,
                                   min_pixels: int = 100, min_angle_deg: float = 3.0) -> StainProfile:
    """Estimate a two-stain basis from optical densities (any shape ending in 3)."""
    od_all = np.asarray(od, dtype=np.float64).reshape(-1, 3)
    od_t = od_all[np.all(od_all > beta, axis=1)]
    if od_t.shape[0] < min_pixels:
        raise StainEstimationError(f"only {od_t.shape[0]} pixels above OD {beta}; need {min_pixels}")
    plane = _stain_basis_from_eigs(od_t)
    proj = od_t @ plane
    phi = np.arctan2(proj[:, 1], proj[:, 0])
    lo, hi = np.percentile(phi, [alpha_pct, 100.0 - alpha_pct])
    v1 = plane @ np.array([np.cos(lo), np.sin(lo)])
    v2 = plane @ np.array([np.cos(hi), np.sin(hi)])
    sep = np.degrees(np.arccos(np.clip(abs(np.dot(v1, v2)) / (np.linalg.norm(v1) * np.linalg.norm(v2)), -1, 1)))
    if not np.isfinite(sep) or sep < min_angle_deg:
        raise StainEstimationError(f"stain directions not separable ({sep:.2f} deg apart)")
    rows = np.stack([v1, v2])
    if np.any(rows.sum(axis=1) <= 0):
        raise StainEstimationError("estimated stain vector outside the positive OD octant")
    rows /= np.linalg.norm(rows, axis=1, keepdims=True)
    if rows[0, 0] < rows[1, 0]:
        rows = rows[::-1]
    conc = _unmix(od_all, rows)
    max_conc = np.percentile(conc, 99, axis=0)
    if np.any(~np.isfinite(max_conc)) or np.any(max_conc <= 0):
        raise StainEstimationError("non-positive stain concentration percentile")
    return StainProfile(rows, max_conc)


def _unmix(od_flat: np.ndarray, stain_matrix: np.ndarray) -> np.ndarray:
    """Least-squares concentrations, shape (N, 2)."""
    gram = stain_matrix @ stain_matrix.T
    if np.linalg.cond(gram) > 1e8:
        raise np.linalg.LinAlgError("stain matrix is singular")
    return np.linalg.solve(gram, stain_matrix @ od_flat.T).T


def macenko_normalize(img: np.ndarray, source: StainProfile, target: StainProfile,
                      i0: float = 255.0) -> np.ndarray:
    """Map ``img`` from the ``source`` stain basis onto ``target``.

    The component of each pixel's OD lying outside the source stain plane is
    carried over unchanged, so ``source == target`` is an identity up to
    8-bit rounding.
    """
    check_image(img)
    od = rgb_to_od(img, i0).reshape(-1, 3)
    conc = _unmix(od, source.stain_matrix)
    residual = od - conc @ source.stain_matrix
    conc = conc * (target.max_conc / source.max_conc)
    od_new = conc @ target.stain_matrix + residual
    return od_to_rgb(od_new, i0).reshape(img.shape)


# ---------------------------------------------------------------------------
# Reinhard (l-alpha-beta statistics transfer)

_RGB2LMS = np.array([[0.3811, 0.5783, 0.0402],
                     [0.1967, 0.7244, 0.0782],
                     [0.0241, 0.1288, 0.8444]])
_LMS2RGB = np.linalg.inv(_RGB2LMS)
_LOG2LAB = np.diag([1 / np.sqrt(3), 1 / np.sqrt(6), 1 / np.sqrt(2)]) @ np.array(
    [[1, 1, 1], [1, 1, -2], [1, -1, 0]], dtype=np.float64)
_LAB2LOG = np.linalg.inv(_LOG2LAB)
_LMS_FLOOR = 1e-4
_STD_FLOOR = 1e-6


@dataclass(frozen=True)
class LabStats:
    mean: tuple[float, float, float]
    std: tuple[float, float, float]

    def to_dict(self) -> dict:
        return {"mean": list(self.mean), "std": list(self.std)}


def rgb_to_lab(img: np.ndarray) -> np.ndarray:
    rgb = img.reshape(-1, 3).astype(np.float64) / 255.0
    lms = np.maximum(rgb @ _RGB2LMS.T, _LMS_FLOOR)
    return (np.log10(lms) @ _LOG2LAB.T).reshape(img.shape)


def lab_to_rgb_float(lab: np.ndarray) -> np.ndarray:
    log_lms = lab.reshape(-1, 3) @ _LAB2LOG.T
    rgb = np.power(10.0, log_lms) @ _LMS2RGB.T
    return (rgb * 255.0).reshape(lab.shape)


def lab_stats(img: np.ndarray) -> LabStats:
    lab = rgb_to_lab(check_image(img)).reshape(-1, 3)
    return LabStats(tuple(lab.mean(axis=0).tolist()), tuple(lab.std(axis=0).tolist()))


def reinhard_transfer_lab(img: np.ndarray, target: LabStats) -> np.ndarray:
    """Shifted/scaled l-alpha-beta values before conversion back to RGB."""
    lab = rgb_to_lab(check_image(img))
    flat = lab.reshape(-1, 3)
    mean, std = flat.mean(axis=0), flat.std(axis=0)
    varying = std > _STD_FLOOR
    if not varying.any():
        raise ValueError("Reinhard normalization needs a non-constant image")
    t_mean, t_std = np.asarray(target.mean), np.asarray(target.std)
    scale = np.where(varying, t_std / np.where(varying, std, 1.0), 1.0)
    return ((flat - mean) * scale + t_mean).reshape(lab.shape)


def reinhard_normalize(img: np.ndarray, target: LabStats) -> np.ndarray:
    rgb = lab_to_rgb_float(reinhard_transfer_lab(img, target))
    return np.clip(np.rint(rgb), 0, 255).astype(np.uint8)


# ---------------------------------------------------------------------------
# Otsu and tissue masking


def otsu_threshold(hist) -> int:
    """Threshold ``t`` such that class 0 is values ``< t`` and class 1 is ``>= t``.

    Maximizes between-class variance in exact integer arithmetic; the smallest
    maximizing ``t`` wins.
    """
    counts = [int(c) for c in np.asarray(hist).reshape(-1)]
    if len(counts) != 256 or any(c < 0 for c in counts):
        raise ValueError("histogram must have 256 non-negative bins")
    if sum(1 for c in counts if c > 0) < 2:
        raise ValueError("Otsu needs at least two distinct occupied bins")
    n_tot = sum(counts)
    s_tot = sum(i * c for i, c in enumerate(counts))
    best_t, best_num, best_den = None, -1, 1
    n0 = s0 = 0
    for t in range(1, 256):
        n0 += counts[t - 1]
        s0 += (t - 1) * counts[t - 1]
        n1, s1 = n_tot - n0, s_tot - s0
        if n0 == 0 or n1 == 0:
            continue
        # sigma_b^2 * N^2 == (s0*n1 - s1*n0)^2 / (n0*n1)
        num, den = (s0 * n1 - s1 * n0) ** 2, n0 * n1
        if num * best_den > best_num * den:
            best_t, best_num, best_den = t, num, den
    return best_t


def gray_u8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(to_gray(img)), 0, 255).astype(np.uint8)


def tissue_mask(img: np.ndarray) -> tuple[np.ndarray, float]:
    """Pixels darker than the Otsu threshold count as tissue."""
    g = gray_u8(check_image(img))
    hist = np.bincount(g.reshape(-1), minlength=256)
    try:
        t = otsu_threshold(hist)
    except ValueError:
        return np.zeros(g.shape, dtype=bool), 0.0
    mask = g < t
    return mask, float(mask.mean())


# ---------------------------------------------------------------------------
# patches, focus, pen marks, hashing


@dataclass
class PatchRecord:
    source_id: str
    grid_x: int
    grid_y: int
    magnification: str
    tissue_fraction: float
    focus_score: float
    dhash: int
    label: Grade

    def __post_init__(self):
        if self.magnification not in MAGNIFICATIONS:
            raise ValueError(f"magnification must be one of {MAGNIFICATIONS}, got {self.magnification!r}")
        if not 0.0 <= self.tissue_fraction <= 1.0:
            raise ValueError("tissue_fraction outside [0, 1]")
        self.label = Grade.parse(self.label)

    @property
    def patch_id(self) -> str:
        return f"{self.source_id}__{self.grid_x}_{self.grid_y}"

    def to_json(self) -> str:
        return json.dumps({
            "source_id": self.source_id, "grid_x": self.grid_x, "grid_y": self.grid_y,
            "magnification": self.magnification,
            "tissue_fraction": round(self.tissue_fraction, 6),
            "focus_score": round(self.focus_score, 6),
            "dhash": f"{self.dhash:016x}", "label": self.label.name,
        })

    @classmethod
    def from_json(cls, line: str) -> "PatchRecord":
        d = json.loads(line)
        expected = {"source_id", "grid_x", "grid_y", "magnification", "tissue_fraction",
                    "focus_score", "dhash", "label"}
        if set(d) != expected:
            raise ValueError(f"manifest row keys {sorted(d)} != {sorted(expected)}")
        return cls(str(d["source_id"]), int(d["grid_x"]), int(d["grid_y"]), d["magnification"],
                   float(d["tissue_fraction"]), float(d["focus_score"]), int(d["dhash"], 16),
                   Grade.parse(d["label"]))


def laplacian_focus(patch: np.ndarray) -> float:
    """Variance of the 4-neighbour Laplacian of the grayscale patch (interior only)."""
    g = to_gray(patch) if patch.ndim == 3 else np.asarray(patch, dtype=np.float64)
    if g.shape[0] < 3 or g.shape[1] < 3:
        raise ValueError("focus metric needs at least a 3x3 patch")
    lap = (g[:-2, 1:-1] + g[2:, 1:-1] + g[1:-1, :-2] + g[1:-1, 2:] - 4.0 * g[1:-1, 1:-1])
    return float(lap.var())


def extract_patches(img: np.ndarray, patch_size: int, stride: int, min_tissue: float,
                    source_id: str = "", magnification: str = "20x", label=Grade.I,
                    mask: np.ndarray | None = None) -> list[tuple[PatchRecord, np.ndarray]]:
    """Tile ``img`` on a regular grid, row-major; drop tiles below ``min_tissue``.

    The tissue mask is computed once for the whole image unless given.
    """
    check_image(img)
    H, W, _ = img.shape
    if patch_size > min(H, W):
        raise ValueError(f"patch size {patch_size} larger than image {W}x{H}")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    if mask is None:
        mask, _ = tissue_mask(img)
    out = []
    for gy, y in enumerate(range(0, H - patch_size + 1, stride)):
        for gx, x in enumerate(range(0, W - patch_size + 1, stride)):
            frac = float(mask[y:y + patch_size, x:x + patch_size].mean())
            if frac < min_tissue:
                continue
            patch = img[y:y + patch_size, x:x + patch_size].copy()
            rec = PatchRecord(source_id, gx, gy, magnification, frac,
                              laplacian_focus(patch), dhash64(patch), label)
            out.append((rec, patch))
    return out


def rgb_to_hsv(rgb: np.ndarray) -> np.ndarray:
    """Float RGB in [0, 1] -> HSV with hue in turns [0, 1)."""
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    mx = np.max(rgb, axis=-1)
    mn = np.min(rgb, axis=-1)
    delta = mx - mn
    safe = np.where(delta > 0, delta, 1.0)
    h = np.where(mx == r, ((g - b) / safe) % 6.0,
                 np.where(mx == g, (b - r) / safe + 2.0, (r - g) / safe + 4.0))
    h = np.where(delta > 0, h / 6.0, 0.0)
    s = np.where(mx > 0, delta / np.where(mx > 0, mx, 1.0), 0.0)
    return np.stack([h, s, mx], axis=-1)


def hsv_to_rgb(hsv: np.ndarray) -> np.ndarray:
    h, s, v = hsv[..., 0] % 1.0, hsv[..., 1], hsv[..., 2]
    i = np.floor(h * 6.0)
    f = h * 6.0 - i
    p, q, t = v * (1 - s), v * (1 - s * f), v * (1 - s * (1 - f))
    i = i.astype(np.int64) % 6
    r = np.choose(i, [v, q, p, p, t, v])
    g = np.choose(i, [t, v, v, q, p, p])
    b = np.choose(i, [p, p, t, v, v, q])
    return np.stack([r, g, b], axis=-1)


# hue bands in degrees for blue and green marker ink
INK_HUE_BANDS = ((75.0, 170.0), (180.0, 250.0))


def hsv_saturation(img: np.ndarray) -> np.ndarray:
    """HSV saturation of a uint8 RGB image, without the full conversion."""
    mx = img.max(axis=-1).astype(np.float32)
    mn = img.min(axis=-1).astype(np.float32)
    return np.where(mx > 0, (mx - mn) / np.maximum(mx, 1.0), 0.0).astype(np.float32)


def pen_mark_suspect(patch: np.ndarray, slide_sat_q85: float, dark_value: float = 0.15) -> bool:
    """Heuristic ink detector: saturated patch whose dominant hue is ink-coloured or near black."""
    sat = hsv_saturation(patch)
    if sat.mean() <= slide_sat_q85:
        return False
    hsv = rgb_to_hsv(patch.astype(np.float64) / 255.0)
    strong = sat > slide_sat_q85
    hue_deg = np.median(hsv[..., 0][strong]) * 360.0 if strong.any() else np.median(hsv[..., 0]) * 360.0
    in_band = any(lo <= hue_deg <= hi for lo, hi in INK_HUE_BANDS)
    return in_band or float(np.median(hsv[..., 2])) < dark_value


def _bilinear_axis(n_in: int, n_out: int):
    scale = n_in / n_out
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * scale - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    w1 = src - i0
    return i0, i1, w1


def resize_float(arr: np.ndarray, out_w: int, out_h: int) -> np.ndarray:
    """Half-pixel-centred bilinear resize of a float array ``(H, W[, C])``."""
    if out_w < 1 or out_h < 1:
        raise ValueError("output size must be at least 1x1")
    a = np.asarray(arr, dtype=np.float64)
    H, W = a.shape[:2]
    if (H, W) == (out_h, out_w):
        return a.copy()
    y0, y1, wy = _bilinear_axis(H, out_h)
    x0, x1, wx = _bilinear_axis(W, out_w)
    extra = (1,) * (a.ndim - 2)
    wy = wy.reshape((-1, 1) + extra)
    rows = a[y0] * (1 - wy) + a[y1] * wy
    wx = wx.reshape((1, -1) + extra)
    return rows[:, x0] * (1 - wx) + rows[:, x1] * wx


def resize_bilinear(img: np.ndarray, out_w: int, out_h: int) -> np.ndarray:
    check_image(img)
    if img.shape[:2] == (out_h, out_w):
        return img.copy()
    return np.clip(np.rint(resize_float(img, out_w, out_h)), 0, 255).astype(np.uint8)


def dhash64(img: np.ndarray) -> int:
    """64-bit difference hash: bit ``8*y + x`` set iff pixel (x+1, y) > pixel (x, y) on a 9x8 grid."""
    g = to_gray(img) if img.ndim == 3 else np.asarray(img, dtype=np.float64)
    small = resize_float(g, 9, 8)
    bits = (small[:, 1:] > small[:, :-1]).reshape(-1)
    return int(np.sum(bits.astype(np.uint64) << np.arange(64, dtype=np.uint64)))


def hamming(a: int, b: int) -> int:
    return bin(int(a) ^ int(b)).count("1")


# ---------------------------------------------------------------------------
# colour jitter


@dataclass(frozen=True)
class JitterRanges:
    brightness: float = 0.2
    contrast: float = 0.2
    saturation: float = 0.2
    hue: float = 0.05  # turns

    def draw(self, rng: np.random.Generator) -> tuple[float, float, float, float]:
        # four draws always, so the stream advances identically whatever the ranges
        u = rng.uniform(-1.0, 1.0, size=4)
        return (1.0 + self.brightness * u[0], 1.0 + self.contrast * u[1],
                1.0 + self.saturation * u[2], self.hue * u[3])


def hue_rotation_matrix(turns: float) -> np.ndarray:
    """RGB-space rotation of chroma about the gray axis (YIQ hue rotation)."""
    rgb2yiq = np.array([[0.299, 0.587, 0.114],
                        [0.595716, -0.274453, -0.321263],
                        [0.211456, -0.522591, 0.311135]])
    th = 2.0 * np.pi * turns
    rot = np.array([[1.0, 0.0, 0.0],
                    [0.0, np.cos(th), -np.sin(th)],
                    [0.0, np.sin(th), np.cos(th)]])
    return np.linalg.inv(rgb2yiq) @ rot @ rgb2yiq


def _gray_f32(x: np.ndarray) -> np.ndarray:
    w = GRAY_WEIGHTS.astype(np.float32)
    return x[..., 0] * w[0] + x[..., 1] * w[1] + x[..., 2] * w[2]


def jitter_float_(x: np.ndarray, factors: np.ndarray) -> np.ndarray:
    """In-place colour jitter of a float32 batch ``[B,H,W,3]`` on the 0..255 scale.

    ``factors`` is ``[B,4]``: brightness, contrast, saturation multipliers and a
    hue shift in turns. Order is brightness, contrast, saturation, hue, with a
    clamp to [0, 255] after each step.
    """
    factors = np.asarray(factors, dtype=np.float64).reshape(-1, 4)
    if x.ndim != 4 or x.shape[-1] != 3 or x.shape[0] != factors.shape[0]:
        raise ValueError(f"expected [B,H,W,3] batch with {factors.shape[0]} samples, got {x.shape}")
    col = lambda v: np.asarray(v, dtype=np.float32)[:, None, None, None]  # noqa: E731
    x *= col(factors[:, 0])
    np.clip(x, 0, 255, out=x)
    m = col(_gray_f32(x).mean(axis=(1, 2), dtype=np.float64))
    x -= m
    x *= col(factors[:, 1])
    x += m
    np.clip(x, 0, 255, out=x)
    g = _gray_f32(x)[..., None]
    x -= g
    x *= col(factors[:, 2])
    x += g
    np.clip(x, 0, 255, out=x)
    rot = np.stack([hue_rotation_matrix(h).T for h in factors[:, 3]]).astype(np.float32)
    B = x.shape[0]
    x[...] = np.matmul(x.reshape(B, -1, 3), rot).reshape(x.shape)
    np.clip(x, 0, 255, out=x)
    return x


def apply_jitter(img: np.ndarray, brightness: float = 1.0, contrast: float = 1.0,
                 saturation: float = 1.0, hue: float = 0.0) -> np.ndarray:
    """Brightness, contrast, saturation then hue; values clamped after each step.

    Hue is shifted by rotating chroma about the gray axis, ``hue`` in turns.
    """
    x = check_image(img).astype(np.float32)[None]
    jitter_float_(x, [[brightness, contrast, saturation, hue]])
    return np.rint(x[0]).astype(np.uint8)


def color_jitter(img: np.ndarray, rng: np.random.Generator,
                 ranges: JitterRanges = JitterRanges()) -> np.ndarray:
    return apply_jitter(check_image(img), *ranges.draw(rng))


# ---------------------------------------------------------------------------
# dual-scale input

_STD_SCALE = (1.0 / (255.0 * CHANNEL_STD.astype(np.float64))).astype(np.float32)
_STD_SHIFT = (CHANNEL_MEAN.astype(np.float64) / CHANNEL_STD).astype(np.float32)


def standardize_float_(x: np.ndarray) -> np.ndarray:
    """In place: 0..255 float32 -> ``(x/255 - mean) / std`` per channel."""
    x *= _STD_SCALE
    x -= _STD_SHIFT
    return x


def standardize(img_u8: np.ndarray) -> np.ndarray:
    """uint8 ``[..., 3]`` -> float32 scaled to [0, 1] and channel-standardized."""
    return standardize_float_(np.asarray(img_u8).astype(np.float32))


def make_dual_scale(patch: np.ndarray, fine: int = 224, coarse: int = 320):
    """Return ``(t224, t320)`` float tensors, channels-last."""
    return (standardize(resize_bilinear(patch, fine, fine)),
            standardize(resize_bilinear(patch, coarse, coarse)))


def iter_png_dir(root: Path) -> Iterator[Path]:
    yield from sorted(p for p in Path(root).rglob("*.png") if p.is_file())
