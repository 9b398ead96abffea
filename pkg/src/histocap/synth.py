"""Deterministic synthetic slide corpus for desk-scale verification.

Each slide is a grid of tissue cells drawn from a small set of color
archetypes plus white background; its caption is a pure function of that
content, so an informative model can learn the mapping while a
label-shuffled control cannot. Same spec, same bytes.

Grammar (captions are derivable from cell colors alone):
  focal slide    -> "mostly <dominant> tissue with focal <focal> regions"
  uniform slide  -> "uniform <dominant> tissue"
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError
from .rasters import save_rgb

ARCHETYPE_COLORS = {
    "purple": (140, 80, 180),
    "pink": (230, 140, 180),
    "green": (120, 190, 120),
    "tan": (210, 180, 130),
    "blue": (100, 130, 210),
    "brown": (150, 100, 70),
}

_BASE_TERMINALS = ("mostly", "tissue", "with", "focal", "regions", "uniform")


@dataclass(frozen=True)
class SynthSpec:
    seed: int = 13
    n_slides: int = 16
    slide_size: int = 128
    patch_size: int = 64
    archetypes: tuple[str, ...] = ("purple", "pink", "green", "tan", "blue", "brown")
    noise: int = 6

    def __post_init__(self):
        if len(self.archetypes) < 2:
            raise ConfigError("need at least two archetypes")
        unknown = [a for a in self.archetypes if a not in ARCHETYPE_COLORS]
        if unknown:
            raise ConfigError(f"unknown archetypes {unknown}; known: {sorted(ARCHETYPE_COLORS)}")
        if self.slide_size < 2 * self.patch_size:
            raise ConfigError("slide must hold at least a 2x2 patch grid")

    def to_dict(self) -> dict:
        return {"seed": self.seed, "n_slides": self.n_slides,
                "slide_size": self.slide_size, "patch_size": self.patch_size,
                "archetypes": list(self.archetypes), "noise": self.noise}

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        allowed = {"seed", "n_slides", "slide_size", "patch_size", "archetypes", "noise"}
        unknown = set(d) - allowed
        if unknown:
            raise ConfigError(f"unknown synth spec keys: {sorted(unknown)}")
        d = dict(d)
        if "archetypes" in d:
            d["archetypes"] = tuple(d["archetypes"])
        return cls(**d)


@dataclass
class SlideSeed:
    slide_id: str
    slide_path: str
    caption: str
    split: str

    def to_dict(self) -> dict:
        return {"slide_id": self.slide_id, "slide_path": self.slide_path,
                "caption": self.caption, "split": self.split}


def grammar_terminals(spec: SynthSpec) -> set[str]:
    return set(_BASE_TERMINALS) | set(spec.archetypes)


def _caption(dominant: str, focal: str | None) -> str:
    if focal is None:
        return f"uniform {dominant} tissue"
    return f"mostly {dominant} tissue with focal {focal} regions"


def _paint_cell(rng: np.random.Generator, pixels: np.ndarray, y: int, x: int,
                size: int, color: tuple[int, int, int], noise: int) -> None:
    base = np.array(color, dtype=np.int16)
    jitter = rng.integers(-noise, noise + 1, size=(size, size, 3), dtype=np.int16)
    pixels[y:y + size, x:x + size] = np.clip(base + jitter, 0, 255).astype(np.uint8)


def _splits(n: int, rng: np.random.Generator) -> list[str]:
    order = rng.permutation(n)
    n_train = int(n * 0.8)
    n_val = int(n * 0.1)
    tags = [""] * n
    for rank, idx in enumerate(order):
        if rank < n_train:
            tags[idx] = "train"
        elif rank < n_train + n_val:
            tags[idx] = "val"
        else:
            tags[idx] = "test"
    return tags


def generate(spec: SynthSpec, out_dir: str | Path) -> list[SlideSeed]:
    """Write slide rasters and a seed manifest (slides.jsonl) under ``out_dir``."""
    out_dir = Path(out_dir)
    slides_dir = out_dir / "slides"
    slides_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(spec.seed)
    k = len(spec.archetypes)
    cells = spec.slide_size // spec.patch_size
    n_cells = cells * cells

    seeds: list[SlideSeed] = []
    splits = _splits(spec.n_slides, rng)
    for i in range(spec.n_slides):
        dominant = spec.archetypes[i % k]
        focal: str | None = None
        if i % 2 == 0:
            others = [a for a in spec.archetypes if a != dominant]
            focal = others[int(rng.integers(len(others)))]

        pixels = np.full((spec.slide_size, spec.slide_size, 3), 255, dtype=np.uint8)
        positions = [(r, c) for r in range(cells) for c in range(cells)]
        special = int(rng.integers(n_cells))  # focal cell, or background gap
        for j, (r, c) in enumerate(positions):
            y, x = r * spec.patch_size, c * spec.patch_size
            if j == special:
                if focal is not None:
                    _paint_cell(rng, pixels, y, x, spec.patch_size,
                                ARCHETYPE_COLORS[focal], spec.noise)
                continue  # uniform slides keep this cell white
            _paint_cell(rng, pixels, y, x, spec.patch_size,
                        ARCHETYPE_COLORS[dominant], spec.noise)

        slide_id = f"synth{i:04d}"
        rel = f"slides/{slide_id}.png"
        save_rgb(out_dir / rel, pixels)
        seeds.append(SlideSeed(slide_id, rel, _caption(dominant, focal), splits[i]))

    with open(out_dir / "slides.jsonl", "w", encoding="utf-8") as fh:
        for s in seeds:
            fh.write(json.dumps(s.to_dict(), sort_keys=True) + "\n")
    return seeds


def resolve_path(manifest_path: str | Path, stored: str) -> Path:
    """Paths inside manifests are relative to the manifest's directory."""
    p = Path(stored)
    return p if p.is_absolute() else Path(manifest_path).parent / p


def read_seeds(path: str | Path) -> list[SlideSeed]:
    seeds = []
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    for lineno, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            d = json.loads(line)
            seeds.append(SlideSeed(d["slide_id"], d["slide_path"], d["caption"], d["split"]))
        except (json.JSONDecodeError, KeyError) as exc:
            raise DataError(f"{path}: malformed line {lineno}: {exc}") from exc
    return seeds


def shuffle_captions(seeds: list[SlideSeed], seed: int,
                     splits: tuple[str, ...] = ("train", "val")) -> list[SlideSeed]:
    """Control corpus: permute captions among the given splits, test left intact."""
    rng = np.random.default_rng(seed)
    idxs = [i for i, s in enumerate(seeds) if s.split in splits]
    perm = rng.permutation(len(idxs))
    out = [SlideSeed(s.slide_id, s.slide_path, s.caption, s.split) for s in seeds]
    for a, b in zip(idxs, perm):
        out[a].caption = seeds[idxs[b]].caption
    return out
