"""Trainable thumbnail encoder: a small strided conv stack over the
low-resolution slide view.

Produces a G x G spatial feature grid plus the global thumbnail vector,
which is always the spatial mean of the grid. The stack uses 3x3 convs with
replicate padding and ReLU, strides chosen so the grid lands exactly at
``input_size / prod(strides)``. There is no dropout or batch norm, so train
and eval forwards are the same function; gradients are recorded whenever a
GradTape is active.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

from . import tensor as T
from .archive import load_archive, save_archive, validate_tensors
from .errors import ConfigError, ShapeError


@dataclass(frozen=True)
class ThumbConfig:
    input_size: int = 1024
    channels: tuple[int, ...] = (16, 64, 128, 256, 512)
    strides: tuple[int, ...] = (4, 4, 2, 2, 2)
    kernel: int = 3

    def __post_init__(self):
        if len(self.channels) != len(self.strides):
            raise ConfigError("channels and strides must have equal length")
        total = math.prod(self.strides)
        if self.input_size % total != 0:
            raise ConfigError(
                f"input_size {self.input_size} not divisible by stride product {total}")
        if self.input_size // total < 2:
            raise ConfigError("feature grid must be at least 2x2")

    @property
    def grid_size(self) -> int:
        return self.input_size // math.prod(self.strides)

    @property
    def feature_dim(self) -> int:
        return self.channels[-1]

    @classmethod
    def desk(cls) -> "ThumbConfig":
        # small geometry, full-scale feature width
        return cls(input_size=64, channels=(32, 128, 512), strides=(2, 2, 2))

    def to_dict(self) -> dict:
        return {"input_size": self.input_size, "channels": list(self.channels),
                "strides": list(self.strides), "kernel": self.kernel}

    @classmethod
    def from_dict(cls, d: dict) -> "ThumbConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown thumb config keys: {sorted(unknown)}")
        d = dict(d)
        for key in ("channels", "strides"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


def thumb_tensor_shapes(cfg: ThumbConfig) -> dict[str, tuple[int, ...]]:
    shapes = {}
    cin = 3
    for i, cout in enumerate(cfg.channels):
        shapes[f"conv{i}.weight"] = (cfg.kernel, cfg.kernel, cin, cout)
        shapes[f"conv{i}.bias"] = (1, cout)
        cin = cout
    return shapes


class ThumbEncoder:
    def __init__(self, cfg: ThumbConfig, weights: Mapping[str, np.ndarray]):
        self.cfg = cfg
        validate_tensors(weights, thumb_tensor_shapes(cfg), context="thumb weights")
        self.params: dict[str, T.Tensor] = {
            name: T.Tensor(np.asarray(weights[name], dtype=np.float32), requires_grad=True)
            for name in thumb_tensor_shapes(cfg)
        }

    @classmethod
    def random(cls, cfg: ThumbConfig, seed: int) -> "ThumbEncoder":
        rng = np.random.default_rng(seed)
        weights = {}
        cin = 3
        for i, cout in enumerate(cfg.channels):
            fan_in = cfg.kernel * cfg.kernel * cin
            weights[f"conv{i}.weight"] = T.uniform_init(
                rng, (cfg.kernel, cfg.kernel, cin, cout), fan_in)
            weights[f"conv{i}.bias"] = T.uniform_init(rng, (1, cout), fan_in)
            cin = cout
        return cls(cfg, weights)

    @classmethod
    def from_archive(cls, path: str | Path, cfg: ThumbConfig) -> "ThumbEncoder":
        return cls(cfg, load_archive(path))

    def save(self, path: str | Path) -> None:
        save_archive(path, {k: v.data for k, v in self.params.items()})

    def forward(self, pixels: np.ndarray) -> tuple[T.Tensor, T.Tensor]:
        """(S, S, 3) uint8 thumbnail -> (grid (G*G, C), global (1, C))."""
        cfg = self.cfg
        if pixels.shape != (cfg.input_size, cfg.input_size, 3):
            raise ShapeError(
                f"expected ({cfg.input_size}, {cfg.input_size}, 3) thumbnail, "
                f"got {pixels.shape}")
        x = T.Tensor(pixels.astype(np.float32) / 255.0 - 0.5)
        for i, stride in enumerate(cfg.strides):
            x = T.conv2d(x, self.params[f"conv{i}.weight"],
                         self.params[f"conv{i}.bias"], stride=stride)
            x = T.relu(x)
        g = cfg.grid_size
        grid = T.reshape(x, (g * g, cfg.feature_dim))
        global_vec = T.group_mean(grid, g * g)
        return grid, global_vec

    def forward_batch(self, thumbs: np.ndarray) -> tuple[T.Tensor, T.Tensor]:
        """(B, S, S, 3) -> (grid rows (B*G*G, C), global (B, C))."""
        grids = [self.forward(thumbs[i])[0] for i in range(thumbs.shape[0])]
        grid_flat = T.concat(grids, axis=0) if len(grids) > 1 else grids[0]
        g = self.cfg.grid_size
        return grid_flat, T.group_mean(grid_flat, g * g)

    def parameters(self) -> dict[str, T.Tensor]:
        return self.params
