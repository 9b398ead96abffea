"""Slide ingestion: thumbnails, tissue masking, patch-grid extraction, manifests.

Desk-scale corpora use small synthetic slides, so patch and thumbnail sizes
are configurable; full-scale defaults stay at 4096 / 1024. Tissue detection
is a saturation + brightness threshold: a pixel is tissue when
(max-min)/max(1,max) exceeds ``sat_thresh`` and mean(R,G,B) is below
``brightness_frac * 255``. Patches form a non-overlapping grid anchored at
(0,0); partial border cells are discarded; a cell is kept when its tissue
fraction strictly exceeds ``min_tissue``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DataError
from .rasters import load_rgb, save_rgb


@dataclass(frozen=True)
class TileConfig:
    patch_size: int = 4096
    thumb_size: int = 1024
    min_tissue: float = 0.5
    sat_thresh: float = 0.08
    brightness_frac: float = 0.95
    magnification: str = "20x"  # metadata tag only; synthetic slides carry no pyramid

    def to_dict(self) -> dict:
        return {f: getattr(self, f) for f in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, d: dict) -> "TileConfig":
        from .errors import ConfigError
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown tile config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class PatchEntry:
    x: int
    y: int
    tissue_fraction: float

    def to_dict(self) -> dict:
        return {"x": self.x, "y": self.y, "tissue_fraction": self.tissue_fraction}


@dataclass
class SlideRecord:
    slide_id: str
    thumbnail: str
    patches: list[PatchEntry] = field(default_factory=list)
    caption: str = ""
    split: str = "train"

    @property
    def n_patches(self) -> int:
        return len(self.patches)

    @property
    def usable(self) -> bool:
        return self.n_patches >= 1

    def to_dict(self) -> dict:
        return {
            "slide_id": self.slide_id,
            "thumbnail": self.thumbnail,
            "patches": [p.to_dict() for p in self.patches],
            "caption": self.caption,
            "split": self.split,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SlideRecord":
        return cls(
            slide_id=d["slide_id"],
            thumbnail=d["thumbnail"],
            patches=[PatchEntry(int(p["x"]), int(p["y"]), float(p["tissue_fraction"]))
                     for p in d["patches"]],
            caption=d["caption"],
            split=d["split"],
        )


def _area_resample_axis(arr: np.ndarray, out_len: int, axis: int) -> np.ndarray:
    """Exact area-averaged resampling of one axis (piecewise-constant pixels)."""
    arr = np.moveaxis(arr, axis, 0).astype(np.float64)
    n = arr.shape[0]
    if n == out_len:
        return np.moveaxis(arr, 0, axis)
    # cumulative integral at integer positions, 0..n
    cs = np.concatenate([np.zeros((1,) + arr.shape[1:]), np.cumsum(arr, axis=0)])

    def integral(pos: np.ndarray) -> np.ndarray:
        base = np.clip(np.floor(pos).astype(np.int64), 0, n)
        frac = pos - base
        pixel = arr[np.minimum(base, n - 1)]
        return cs[base] + frac[(...,) + (None,) * (arr.ndim - 1)] * pixel

    edges = np.arange(out_len + 1, dtype=np.float64) * (n / out_len)
    edges[-1] = n
    hi = integral(edges[1:])
    lo = integral(edges[:-1])
    out = (hi - lo) / (n / out_len)
    return np.moveaxis(out, 0, axis)


def make_thumbnail(slide: np.ndarray, size: int = 1024) -> np.ndarray:
    """White-pad to square, then area-average downscale to ``size`` x ``size``."""
    h, w = slide.shape[:2]
    if h < 1 or w < 1:
        raise DataError("empty slide")
    side = max(h, w)
    if h != w:
        padded = np.full((side, side, 3), 255, dtype=np.uint8)
        padded[:h, :w] = slide
    else:
        padded = slide
    out = _area_resample_axis(padded, size, axis=0)
    out = _area_resample_axis(out, size, axis=1)
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def tissue_mask(slide: np.ndarray, sat_thresh: float = 0.08,
                brightness_frac: float = 0.95) -> np.ndarray:
    """Boolean HxW mask, True where a pixel looks like stained tissue."""
    px = slide.astype(np.int32)
    mx = px.max(axis=2)
    mn = px.min(axis=2)
    saturation = (mx - mn) / np.maximum(1, mx)
    brightness = px.mean(axis=2)
    return (saturation > sat_thresh) & (brightness < brightness_frac * 255.0)


def extract_patches(slide: np.ndarray, mask: np.ndarray, patch_size: int = 4096,
                    min_tissue: float = 0.5) -> list[PatchEntry]:
    """Grid cells fully inside the slide, row-major, kept when tissue fraction > min_tissue."""
    h, w = mask.shape
    entries: list[PatchEntry] = []
    for y in range(0, h - patch_size + 1, patch_size):
        for x in range(0, w - patch_size + 1, patch_size):
            frac = float(mask[y:y + patch_size, x:x + patch_size].mean())
            if frac > min_tissue:
                entries.append(PatchEntry(x=x, y=y, tissue_fraction=frac))
    return entries


def patch_filename(slide_id: str, x: int, y: int) -> str:
    return f"{slide_id}_{x}_{y}.png"


def tile_slide(slide_id: str, pixels: np.ndarray, out_dir: str | Path,
               cfg: TileConfig, caption: str = "", split: str = "train",
               write_patches: bool = True) -> SlideRecord:
    """Produce thumbnail + patch rasters under ``out_dir`` and the slide's record."""
    out_dir = Path(out_dir)
    thumbs = out_dir / "thumbnails"
    patches_dir = out_dir / "patches"
    thumbs.mkdir(parents=True, exist_ok=True)
    patches_dir.mkdir(parents=True, exist_ok=True)

    thumb = make_thumbnail(pixels, cfg.thumb_size)
    thumb_rel = f"thumbnails/{slide_id}.png"
    save_rgb(out_dir / thumb_rel, thumb)

    mask = tissue_mask(pixels, cfg.sat_thresh, cfg.brightness_frac)
    entries = extract_patches(pixels, mask, cfg.patch_size, cfg.min_tissue)
    if write_patches:
        for e in entries:
            crop = pixels[e.y:e.y + cfg.patch_size, e.x:e.x + cfg.patch_size]
            save_rgb(patches_dir / patch_filename(slide_id, e.x, e.y), crop)
    return SlideRecord(slide_id=slide_id, thumbnail=thumb_rel,
                       patches=entries, caption=caption, split=split)


def write_manifest(path: str | Path, records: Sequence[SlideRecord]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_dict(), sort_keys=True) + "\n")


def read_manifest(path: str | Path) -> list[SlideRecord]:
    records = []
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise DataError(f"cannot read manifest {path}: {exc}") from exc
    for lineno, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            records.append(SlideRecord.from_dict(json.loads(line)))
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise DataError(f"{path}: malformed manifest line {lineno}: {exc}") from exc
    return records


def load_slide(path: str | Path) -> np.ndarray:
    return load_rgb(path)


def resolve_path(manifest_path: str | Path, stored: str) -> Path:
    """Paths inside manifests are relative to the manifest's directory."""
    p = Path(stored)
    return p if p.is_absolute() else Path(manifest_path).parent / p
