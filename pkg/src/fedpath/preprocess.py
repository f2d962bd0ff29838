"""Ingest a folder tree or ZIP archive of PNGs and turn it into normalized, filtered, deduplicated patches."""

from __future__ import annotations

import json
import logging
import re
import shutil
import zipfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path, PurePosixPath
from typing import Callable

import numpy as np

from .config import PreprocessConfig
from .data import MANIFEST_NAME, write_manifest
from .imaging import (MAGNIFICATIONS, REFERENCE_PROFILE, Grade, LabStats, PatchRecord,
                      StainEstimationError, StainProfile, decode_png, estimate_stain_profile_macenko,
                      extract_patches, hamming, hsv_saturation, lab_stats, macenko_normalize,
                      pen_mark_suspect, reinhard_normalize, rgb_to_od, tissue_mask, write_png)

log = logging.getLogger(__name__)

# l-alpha-beta statistics of typical tissue fields normalized to REFERENCE_PROFILE;
# the Reinhard target when no reference image is given.
REFERENCE_LAB_STATS = LabStats(mean=(-0.8071, -0.0100, 0.0566), std=(0.4620, 0.0814, 0.0263))

_MAG_RE = re.compile(r"(?:^|[^0-9])(4|10|20|40)[xX](?:$|[^0-9a-zA-Z])")


class IngestError(ValueError):
    pass


@dataclass
class SourceImage:
    source_id: str
    magnification: str
    label: Grade
    load: Callable[[], np.ndarray] = field(repr=False)


# ---------------------------------------------------------------------------
# ingestion


class _Store:
    """Uniform read access to a directory tree or a ZIP archive (posix-style relative names)."""

    def __init__(self, path):
        self.path = Path(path)
        if not self.path.exists():
            raise IngestError(f"input {self.path} does not exist")
        self.zip = zipfile.ZipFile(self.path) if self.path.is_file() else None
        if self.zip is None and not self.path.is_dir():
            raise IngestError(f"{self.path} is neither a directory nor a ZIP archive")

    def names(self) -> list[str]:
        if self.zip is not None:
            return sorted(n for n in self.zip.namelist() if not n.endswith("/"))
        return sorted(p.relative_to(self.path).as_posix() for p in self.path.rglob("*") if p.is_file())

    def read(self, name: str) -> bytes:
        if self.zip is not None:
            return self.zip.read(name)
        return (self.path / name).read_bytes()


def infer_labels(relpath: str) -> tuple[str, Grade]:
    """Magnification and grade from folder/file names such as ``GradeII/20x/slide3.png``."""
    parts = PurePosixPath(relpath).parts
    grade = None
    for part in parts[:-1]:
        try:
            grade = Grade.parse(part)
        except ValueError:
            continue
    mag = None
    for part in parts:
        m = _MAG_RE.search(PurePosixPath(part).stem if part == parts[-1] else part)
        if m:
            mag = f"{m.group(1)}x"
    if grade is None or mag is None or mag not in MAGNIFICATIONS:
        raise IngestError(f"cannot infer grade and magnification from path {relpath!r}")
    return mag, grade


def _sanitize(relpath: str) -> str:
    return "--".join(PurePosixPath(relpath).with_suffix("").parts)


def discover(input_path) -> list[SourceImage]:
    """List source images, manifest first; folder names are the fallback for labels."""
    store = _Store(input_path)
    names = store.names()
    pngs = [n for n in names if n.lower().endswith(".png")]
    manifests = [n for n in names if PurePosixPath(n).name == MANIFEST_NAME]
    loader = lambda n: (lambda: decode_png(store.read(n)))  # noqa: E731
    out: list[SourceImage] = []
    if manifests:
        top = min(manifests, key=lambda n: (len(PurePosixPath(n).parts), n))
        by_stem: dict[str, str] = {}
        for n in pngs:
            by_stem.setdefault(PurePosixPath(n).stem, n)
        seen = set()
        for line_no, line in enumerate(store.read(top).decode().splitlines(), start=1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
                sid, mag, label = str(row["source_id"]), row["magnification"], Grade.parse(row["label"])
                if mag not in MAGNIFICATIONS:
                    raise ValueError(f"unknown magnification {mag!r}")
            except (ValueError, KeyError, TypeError) as exc:
                raise IngestError(f"{top}:{line_no}: {exc}") from None
            if sid in seen:
                continue
            seen.add(sid)
            if sid not in by_stem:
                raise IngestError(f"{top}:{line_no}: no image file for source {sid!r}")
            out.append(SourceImage(sid, mag, label, loader(by_stem[sid])))
    else:
        for n in pngs:
            mag, grade = infer_labels(n)
            out.append(SourceImage(_sanitize(n), mag, grade, loader(n)))
    if not out:
        raise IngestError(f"no PNG images found in {input_path}")
    out.sort(key=lambda s: s.source_id)
    ids = [s.source_id for s in out]
    if len(set(ids)) != len(ids):
        raise IngestError("duplicate source ids in input")
    return out


# ---------------------------------------------------------------------------
# per-image processing


@dataclass
class Normalizer:
    method: str = "macenko"
    profile: StainProfile = REFERENCE_PROFILE
    lab: LabStats = REFERENCE_LAB_STATS

    @classmethod
    def from_config(cls, cfg: PreprocessConfig) -> "Normalizer":
        if cfg.reference_image is None:
            return cls(cfg.normalization)
        ref = decode_png(Path(cfg.reference_image).read_bytes())
        return cls(cfg.normalization, estimate_stain_profile_macenko(rgb_to_od(ref)), lab_stats(ref))

    def __call__(self, img: np.ndarray) -> tuple[np.ndarray, str]:
        """Return the normalized image and the method actually used."""
        if self.method == "none":
            return img, "none"
        if self.method == "macenko":
            try:
                src = estimate_stain_profile_macenko(rgb_to_od(img))
                return macenko_normalize(img, src, self.profile), "macenko"
            except (StainEstimationError, np.linalg.LinAlgError):
                pass
        try:
            return reinhard_normalize(img, self.lab), "reinhard"
        except ValueError:
            return img, "none"


@dataclass
class ImageResult:
    source: SourceImage
    patches: list  # (PatchRecord, ndarray)
    method: str
    n_low_tissue: int = 0
    n_blurry: int = 0
    n_pen: int = 0


def process_image(src: SourceImage, cfg: PreprocessConfig, normalizer: Normalizer) -> ImageResult:
    img = src.load()
    img, method = normalizer(img)
    if cfg.patch_size > min(img.shape[:2]):
        raise IngestError(f"{src.source_id}: image {img.shape[1]}x{img.shape[0]} smaller than patch {cfg.patch_size}")
    mask, _ = tissue_mask(img)
    kept = extract_patches(img, cfg.patch_size, cfg.stride, cfg.min_tissue, src.source_id,
                           src.magnification, src.label, mask=mask)
    H, W = img.shape[:2]
    n_grid = ((H - cfg.patch_size) // cfg.stride + 1) * ((W - cfg.patch_size) // cfg.stride + 1)
    res = ImageResult(src, [], method, n_low_tissue=n_grid - len(kept))
    sat_q = float(np.quantile(hsv_saturation(img), cfg.pen_quantile)) if cfg.pen_filter else 0.0
    for rec, patch in kept:
        if rec.focus_score < cfg.blur_threshold:
            res.n_blurry += 1
        elif cfg.pen_filter and pen_mark_suspect(patch, sat_q):
            res.n_pen += 1
        else:
            res.patches.append((rec, patch))
    return res


class Deduplicator:
    """First occurrence wins; later patches within ``max_distance`` bits of a kept one are dropped."""

    def __init__(self, max_distance: int = 8):
        self.max_distance = max_distance
        self.kept: list[int] = []

    def admit(self, code: int) -> bool:
        if any(hamming(code, k) <= self.max_distance for k in self.kept):
            return False
        self.kept.append(code)
        return True


def preprocess(input_path, out_dir, cfg: PreprocessConfig | None = None, jobs: int = 1) -> dict:
    """Write ``out_dir/patches/*.png``, ``out_dir/manifest.jsonl`` and ``out_dir/preprocess_summary.json``."""
    cfg = cfg or PreprocessConfig()
    cfg.validate()
    sources = discover(input_path)
    normalizer = Normalizer.from_config(cfg)
    out = Path(out_dir)
    patch_dir = out / "patches"
    if patch_dir.exists():
        shutil.rmtree(patch_dir)
    patch_dir.mkdir(parents=True)

    dedup = Deduplicator(cfg.dedup_hamming)
    records: list[PatchRecord] = []
    summary = {"n_images": len(sources), "n_patches": 0, "low_tissue": 0, "blurry": 0, "pen_marks": 0,
               "duplicates": 0, "normalization": {"macenko": 0, "reinhard": 0, "none": 0}}

    def work(src):
        return process_image(src, cfg, normalizer)

    def consume(res: ImageResult):
        summary["normalization"][res.method] += 1
        summary["low_tissue"] += res.n_low_tissue
        summary["blurry"] += res.n_blurry
        summary["pen_marks"] += res.n_pen
        for rec, patch in res.patches:
            if not dedup.admit(rec.dhash):
                summary["duplicates"] += 1
                continue
            write_png(patch_dir / f"{rec.patch_id}.png", patch)
            records.append(rec)

    if jobs > 1:
        with ThreadPoolExecutor(jobs) as pool:
            for res in pool.map(work, sources):  # ordered, so dedup sees lexical source order
                consume(res)
    else:
        for src in sources:
            consume(work(src))
    summary["n_patches"] = len(records)
    write_manifest(out / MANIFEST_NAME, records)
    (out / "preprocess_summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    log.info("preprocess: %d images -> %d patches (%d blurry, %d pen, %d duplicate, %d low-tissue tiles)",
             summary["n_images"], summary["n_patches"], summary["blurry"], summary["pen_marks"],
             summary["duplicates"], summary["low_tissue"])
    return summary
