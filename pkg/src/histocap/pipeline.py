"""Wiring of the trainable pieces into one caption model.

The frozen patch encoder runs offline (see vit/cli); here a slide is a
(thumbnail pixels, patch token matrix) pair. This module provides the
forward paths shared by training, decoding and evaluation.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from . import vocab as V
from .decoder import CaptionDecoder, Hypothesis
from .errors import DataError
from .fusion import AttentionFusion, fuse
from .metrics import MetricsReport, score_corpus
from .thumb import ThumbEncoder
from .tiler import SlideRecord


@dataclass
class CaptionModel:
    thumb: ThumbEncoder
    fusion: AttentionFusion
    decoder: CaptionDecoder

    @property
    def grid_count(self) -> int:
        g = self.thumb.cfg.grid_size
        return g * g

    def encoder_parameters(self) -> dict[str, T.Tensor]:
        return {f"thumb.{k}": v for k, v in self.thumb.parameters().items()}

    def decoder_parameters(self) -> dict[str, T.Tensor]:
        out = {f"fusion.{k}": v for k, v in self.fusion.parameters().items()}
        out.update({f"decoder.{k}": v for k, v in self.decoder.parameters().items()})
        return out

    def parameters(self) -> dict[str, T.Tensor]:
        return {**self.encoder_parameters(), **self.decoder_parameters()}

    def batch_annotations(self, thumbs: np.ndarray, tokens_flat: T.Tensor,
                          mask: np.ndarray):
        """Forward a batch: (B,S,S,3) thumbnails + padded patch tokens.

        Returns (annotations (B*G2, a), fused_global (B, a), summary).
        """
        grid_flat, thumb_global = self.thumb.forward_batch(thumbs)
        summary = self.fusion.pool(tokens_flat, mask)
        annotations, fused_global = fuse(grid_flat, thumb_global, summary,
                                         self.grid_count)
        return annotations, fused_global, summary

    def slide_annotations(self, thumb_pixels: np.ndarray, patch_tokens: np.ndarray):
        """Single-slide forward, no gradient recording expected."""
        annotations, _, summary = self.batch_annotations(
            thumb_pixels[None], T.Tensor(patch_tokens),
            np.ones((1, patch_tokens.shape[0]), dtype=bool))
        return annotations, summary

    def generate(self, thumb_pixels: np.ndarray, patch_tokens: np.ndarray,
                 beam_width: int = 1, max_len: int | None = None):
        """Decode one slide; beam_width 1 is greedy. Returns (Hypothesis, alpha)."""
        annotations, summary = self.slide_annotations(thumb_pixels, patch_tokens)
        if beam_width <= 1:
            hyp = self.decoder.greedy(annotations, max_len=max_len)
        else:
            hyp = self.decoder.beam(annotations, width=beam_width, max_len=max_len)[0]
        return hyp, summary.alpha.data[0].copy()


ThumbLoader = Callable[[SlideRecord], np.ndarray]


def caption_tokens(hyp: Hypothesis, vb: V.Vocabulary) -> list[str]:
    return [t for t in V.decode(hyp.ids, vb).split() if t]


def evaluate_corpus(model: CaptionModel, records: Sequence[SlideRecord],
                    features: dict[str, np.ndarray], load_thumb: ThumbLoader,
                    vb: V.Vocabulary, beam_width: int = 1,
                    max_len: int | None = None) -> MetricsReport:
    """Decode every slide of a split and score against its reference caption."""
    if not records:
        raise DataError("empty evaluation split")
    candidates = {}
    references = {}
    for rec in records:
        if rec.slide_id not in features:
            raise DataError(f"missing encoded features for slide {rec.slide_id}")
        hyp, _ = model.generate(load_thumb(rec), features[rec.slide_id],
                                beam_width=beam_width, max_len=max_len)
        candidates[rec.slide_id] = caption_tokens(hyp, vb)
        references[rec.slide_id] = V.tokenize(rec.caption)
    return score_corpus(candidates, references)
