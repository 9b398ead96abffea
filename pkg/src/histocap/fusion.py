"""Trainable pooling of patch tokens into a slide vector, and fusion with the
thumbnail features into the decoder's annotation grid.

Pooling scores each 576-d patch token with a two-layer tanh attention net
(score_i = v' tanh(W' token_i)), normalizes with a masked softmax, and takes
the convex combination of the tokens. A linear+ReLU projection maps the
pooled vector to the thumbnail width. Each annotation vector the decoder
attends over is a thumbnail grid feature with the projected slide vector
broadcast-concatenated onto it, so spatial structure survives for per-word
attention maps while every position still sees the whole-slide summary.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError


@dataclass(frozen=True)
class FusionConfig:
    token_dim: int = 576
    attn_dim: int = 128
    proj_dim: int = 512

    def to_dict(self) -> dict:
        return {"token_dim": self.token_dim, "attn_dim": self.attn_dim,
                "proj_dim": self.proj_dim}

    @classmethod
    def from_dict(cls, d: dict) -> "FusionConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown fusion config keys: {sorted(unknown)}")
        return cls(**d)


def fusion_tensor_shapes(cfg: FusionConfig) -> dict[str, tuple[int, ...]]:
    return {
        "attn.score.weight": (cfg.token_dim, cfg.attn_dim),
        "attn.score.v": (cfg.attn_dim, 1),
        "proj.weight": (cfg.token_dim, cfg.proj_dim),
        "proj.bias": (1, cfg.proj_dim),
    }


@dataclass
class SlideSummary:
    """Pooled slide-level vectors for a batch: attention, pooled, projected."""
    alpha: T.Tensor      # (B, M) patch weights, each row sums to 1
    pooled: T.Tensor     # (B, token_dim) convex combination of patch tokens
    projected: T.Tensor  # (B, proj_dim) relu(pooled @ W + b)


class AttentionFusion:
    def __init__(self, cfg: FusionConfig, weights: Mapping[str, np.ndarray]):
        self.cfg = cfg
        from .archive import validate_tensors
        validate_tensors(weights, fusion_tensor_shapes(cfg), context="fusion weights")
        self.params = {
            name: T.Tensor(np.asarray(weights[name], dtype=np.float32), requires_grad=True)
            for name in fusion_tensor_shapes(cfg)
        }

    @classmethod
    def random(cls, cfg: FusionConfig, seed: int) -> "AttentionFusion":
        rng = np.random.default_rng(seed)
        weights = {
            "attn.score.weight": T.uniform_init(rng, (cfg.token_dim, cfg.attn_dim),
                                                cfg.token_dim),
            "attn.score.v": T.uniform_init(rng, (cfg.attn_dim, 1), cfg.attn_dim),
            "proj.weight": T.uniform_init(rng, (cfg.token_dim, cfg.proj_dim),
                                          cfg.token_dim),
            "proj.bias": T.uniform_init(rng, (1, cfg.proj_dim), cfg.token_dim),
        }
        return cls(cfg, weights)

    def pool(self, tokens: T.Tensor, mask: np.ndarray | None = None) -> SlideSummary:
        """Pool patch tokens, (B*M, token_dim) rows grouped by slide.

        ``mask`` is (B, M) with nonzero marking real rows; None means a single
        slide with every row valid.
        """
        if tokens.data.ndim != 2 or tokens.shape[1] != self.cfg.token_dim:
            raise ShapeError(f"expected (*, {self.cfg.token_dim}) tokens, got {tokens.shape}")
        if mask is None:
            mask = np.ones((1, tokens.shape[0]), dtype=bool)
        b, m = mask.shape
        if tokens.shape[0] != b * m:
            raise ShapeError(f"{tokens.shape[0]} token rows != {b}x{m} mask")
        if not mask.any(axis=1).all():
            raise ShapeError("a slide in the batch has every patch masked")

        hidden = T.tanh(T.matmul(tokens, self.params["attn.score.weight"]))
        scores = T.reshape(T.matmul(hidden, self.params["attn.score.v"]), (b, m))
        alpha = T.masked_softmax(scores, mask, axis=1)
        pooled = T.attend(tokens, alpha)
        projected = T.relu(T.add(T.matmul(pooled, self.params["proj.weight"]),
                                 self.params["proj.bias"]))
        return SlideSummary(alpha=alpha, pooled=pooled, projected=projected)

    def parameters(self) -> dict[str, T.Tensor]:
        return self.params


def fuse(grid: T.Tensor, thumb_global: T.Tensor, summary: SlideSummary,
         grid_count: int) -> tuple[T.Tensor, T.Tensor]:
    """Annotation vectors and the fused global vector.

    ``grid`` is (B*G2, C) thumbnail features; returns
    (annotations (B*G2, C + proj_dim), fused_global (B, C + proj_dim)).
    Slice [C:] of every annotation row within one slide is identical: the
    broadcast projected slide vector.
    """
    if grid.data.ndim != 2 or thumb_global.data.ndim != 2:
        raise ShapeError("fuse expects matrix inputs")
    b = thumb_global.shape[0]
    if grid.shape[0] != b * grid_count:
        raise ShapeError(f"{grid.shape[0]} grid rows != {b}x{grid_count}")
    if summary.projected.shape[0] != b:
        raise ShapeError("slide summary batch does not match thumbnail batch")
    annotations = T.concat([grid, T.repeat_rows(summary.projected, grid_count)], axis=1)
    fused_global = T.concat([thumb_global, summary.projected], axis=1)
    return annotations, fused_global


def top_k_patches(alpha: np.ndarray, k: int) -> list[tuple[int, float]]:
    """Indices of the k highest-weight patches, weight descending, ties by index."""
    alpha = np.asarray(alpha).reshape(-1)
    if k > alpha.shape[0]:
        raise ShapeError(f"k={k} exceeds patch count {alpha.shape[0]}")
    order = sorted(range(alpha.shape[0]), key=lambda i: (-float(alpha[i]), i))
    return [(i, float(alpha[i])) for i in order[:k]]
