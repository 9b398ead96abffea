"""Attention-explanation export: per-word thumbnail heatmaps, top-weighted
patches, and the slide's pooling weights.

For every word of the generated caption the decoder's attention map over the
thumbnail grid is bilinearly upsampled to thumbnail size and written as an
8-bit PGM (scaled so the hottest cell is 255), plus a red-tinted overlay PPM
on the thumbnail. The JSON sidecar carries the caption, per-word attention
sums (each 1 within tolerance before upsampling), the full patch-weight
vector and the top-k patch ranking.
"""

from __future__ import annotations

import json
import re
from pathlib import Path

import numpy as np

from .errors import DataError
from .fusion import top_k_patches
from .pipeline import CaptionModel
from .rasters import save_gray, save_rgb
from .tiler import SlideRecord
from .vocab import END, PAD, START, Vocabulary


def bilinear_upsample(grid: np.ndarray, size: int) -> np.ndarray:
    """(G, G) -> (size, size), sampling cell centers with edge clamping."""
    g = grid.shape[0]
    coords = (np.arange(size) + 0.5) * g / size - 0.5
    coords = np.clip(coords, 0.0, g - 1.0)
    lo = np.floor(coords).astype(np.int64)
    hi = np.minimum(lo + 1, g - 1)
    frac = coords - lo
    rows = grid[lo][:, lo] * ((1 - frac)[:, None] * (1 - frac)[None, :]) \
        + grid[hi][:, lo] * (frac[:, None] * (1 - frac)[None, :]) \
        + grid[lo][:, hi] * ((1 - frac)[:, None] * frac[None, :]) \
        + grid[hi][:, hi] * (frac[:, None] * frac[None, :])
    return rows


def _heat_to_gray(heat: np.ndarray) -> np.ndarray:
    peak = heat.max()
    scaled = heat / peak if peak > 0 else heat
    return np.clip(np.rint(scaled * 255.0), 0, 255).astype(np.uint8)


def _overlay(thumb: np.ndarray, heat_gray: np.ndarray) -> np.ndarray:
    out = thumb.astype(np.float64) * 0.5
    out[:, :, 0] += heat_gray.astype(np.float64) * 0.5
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def _safe(token: str) -> str:
    return re.sub(r"[^a-z0-9]+", "_", token.lower()) or "punct"


def explain_slide(model: CaptionModel, vb: Vocabulary, record: SlideRecord,
                  thumb_pixels: np.ndarray, patch_tokens: np.ndarray,
                  out_dir: str | Path, topk: int = 4, beam_width: int = 1,
                  max_len: int | None = None, config_hash: str = "") -> dict:
    """Decode one slide and write its explanation bundle; returns the summary."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    hyp, alpha = model.generate(thumb_pixels, patch_tokens,
                                beam_width=beam_width, max_len=max_len)

    g = model.thumb.cfg.grid_size
    size = thumb_pixels.shape[0]
    words = []
    step = 0
    for tok_id, beta in zip(hyp.generated, hyp.attentions):
        if tok_id == END:
            break
        if tok_id in (PAD, START):
            continue
        token = vb.token_of(tok_id)
        beta_sum = float(beta.sum())
        if abs(beta_sum - 1.0) > 1e-5:
            raise DataError(f"attention map for step {step} sums to {beta_sum}")
        heat = bilinear_upsample(beta.reshape(g, g), size)
        gray = _heat_to_gray(heat)
        stem = f"word_{step}_{_safe(token)}"
        save_gray(out_dir / f"{stem}.pgm", gray)
        save_rgb(out_dir / f"{stem}_overlay.ppm", _overlay(thumb_pixels, gray))
        words.append({"t": step, "token": token, "beta_sum": beta_sum,
                      "heatmap": f"{stem}.pgm", "overlay": f"{stem}_overlay.ppm"})
        step += 1

    ranked = top_k_patches(alpha, topk)
    top = [{"index": i, "x": record.patches[i].x, "y": record.patches[i].y,
            "alpha": a} for i, a in ranked]
    caption = " ".join(w["token"] for w in words)
    bundle = {
        "slide_id": record.slide_id,
        "caption": caption,
        "logprob": hyp.logprob,
        "words": words,
        "alpha": [float(a) for a in alpha],
        "top_patches": top,
        "config_hash": config_hash,
    }
    (out_dir / "explanation.json").write_text(
        json.dumps(bundle, indent=2, sort_keys=True), encoding="utf-8")
    return bundle
