"""Frozen hierarchical transformer encoding of slide patches.

Two stacked pre-norm ViTs summarize each large patch: a region-level net
turns every region of the patch into a 384-d summary vector, and a
patch-level net (whose token embedding doubles as the 384 -> 192 bridge)
turns the sequence of region summaries into a 192-d patch vector. The final
per-patch token is concat(patch summary, mean of region summaries), 576-d.

Everything here is inference-only: plain float32 numpy, no gradient
recording, no dropout. Weights are immutable after load, so encoding may run
concurrently across patches and slides.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np
from scipy.special import erf

from .archive import load_archive, save_archive, validate_tensors
from .errors import ConfigError, DataError, ShapeError
from .tiler import SlideRecord, patch_filename
from .rasters import load_rgb

REGION_DIM = 384   # region-level summary width
PATCH_DIM = 192    # patch-level summary width
TOKEN_DIM = REGION_DIM + PATCH_DIM  # 576


@dataclass(frozen=True)
class VitConfig:
    """One transformer level: sequences of ``n_tokens`` vectors of ``token_dim``."""
    n_tokens: int
    token_dim: int
    embed_dim: int
    depth: int
    heads: int
    mlp_ratio: float = 4.0

    def __post_init__(self):
        if self.embed_dim % self.heads != 0:
            raise ConfigError(
                f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")

    @property
    def mlp_hidden(self) -> int:
        return int(self.embed_dim * self.mlp_ratio)


@dataclass(frozen=True)
class EncoderConfig:
    """Geometry and sizes of the two-level patch encoder.

    ``patch_size`` is the square patch side, ``region_size`` the side of the
    regions tiling it, ``token_size`` the side of the pixel tokens tiling each
    region. Defaults follow the full-scale setup (4096 / 256 / 16); the desk
    profile shrinks geometry but keeps the 384/192 output widths so every
    downstream dimension is unchanged.
    """
    patch_size: int = 4096
    region_size: int = 256
    token_size: int = 16
    region_depth: int = 12
    patch_depth: int = 6
    heads: int = 6
    mlp_ratio: float = 4.0
    region_dim: int = REGION_DIM
    patch_dim: int = PATCH_DIM

    def __post_init__(self):
        if self.patch_size % self.region_size != 0:
            raise ConfigError("patch_size must be a multiple of region_size")
        if self.region_size % self.token_size != 0:
            raise ConfigError("region_size must be a multiple of token_size")

    @property
    def regions_per_patch(self) -> int:
        return (self.patch_size // self.region_size) ** 2

    @property
    def tokens_per_region(self) -> int:
        return (self.region_size // self.token_size) ** 2

    @property
    def out_dim(self) -> int:
        return self.region_dim + self.patch_dim

    def region_vit(self) -> VitConfig:
        return VitConfig(n_tokens=self.tokens_per_region,
                         token_dim=3 * self.token_size ** 2,
                         embed_dim=self.region_dim, depth=self.region_depth,
                         heads=self.heads, mlp_ratio=self.mlp_ratio)

    def patch_vit(self) -> VitConfig:
        # token embedding here is the 384 -> 192 bridge between the levels
        return VitConfig(n_tokens=self.regions_per_patch,
                         token_dim=self.region_dim,
                         embed_dim=self.patch_dim, depth=self.patch_depth,
                         heads=self.heads, mlp_ratio=self.mlp_ratio)

    @classmethod
    def paper(cls) -> "EncoderConfig":
        return cls()

    @classmethod
    def desk(cls) -> "EncoderConfig":
        return cls(patch_size=64, region_size=16, token_size=4,
                   region_depth=2, patch_depth=2, heads=6, mlp_ratio=2.0)

    def to_dict(self) -> dict:
        return {"patch_size": self.patch_size, "region_size": self.region_size,
                "token_size": self.token_size, "region_depth": self.region_depth,
                "patch_depth": self.patch_depth, "heads": self.heads,
                "mlp_ratio": self.mlp_ratio, "region_dim": self.region_dim,
                "patch_dim": self.patch_dim}

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        allowed = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - allowed
        if unknown:
            raise ConfigError(f"unknown encoder config keys: {sorted(unknown)}")
        return cls(**d)


def _gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + erf(x / np.sqrt(2.0, dtype=x.dtype)))


def _layernorm(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray) -> np.ndarray:
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + np.float32(1e-6)) * gamma + beta


def vit_tensor_shapes(cfg: VitConfig) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {
        "embed.weight": (cfg.token_dim, cfg.embed_dim),
        "embed.bias": (cfg.embed_dim,),
        "cls": (1, cfg.embed_dim),
        "pos": (cfg.n_tokens + 1, cfg.embed_dim),
        "ln_f.gamma": (cfg.embed_dim,),
        "ln_f.beta": (cfg.embed_dim,),
    }
    for i in range(cfg.depth):
        b = f"blocks.{i}."
        shapes[b + "ln1.gamma"] = (cfg.embed_dim,)
        shapes[b + "ln1.beta"] = (cfg.embed_dim,)
        shapes[b + "attn.qkv.weight"] = (cfg.embed_dim, 3 * cfg.embed_dim)
        shapes[b + "attn.qkv.bias"] = (3 * cfg.embed_dim,)
        shapes[b + "attn.proj.weight"] = (cfg.embed_dim, cfg.embed_dim)
        shapes[b + "attn.proj.bias"] = (cfg.embed_dim,)
        shapes[b + "ln2.gamma"] = (cfg.embed_dim,)
        shapes[b + "ln2.beta"] = (cfg.embed_dim,)
        shapes[b + "mlp.fc1.weight"] = (cfg.embed_dim, cfg.mlp_hidden)
        shapes[b + "mlp.fc1.bias"] = (cfg.mlp_hidden,)
        shapes[b + "mlp.fc2.weight"] = (cfg.mlp_hidden, cfg.embed_dim)
        shapes[b + "mlp.fc2.bias"] = (cfg.embed_dim,)
    return shapes


class Vit:
    """A frozen pre-norm transformer returning the summary (first) token."""

    def __init__(self, cfg: VitConfig, weights: Mapping[str, np.ndarray], prefix: str = ""):
        self.cfg = cfg
        expected = {prefix + k: v for k, v in vit_tensor_shapes(cfg).items()}
        validate_tensors(weights, expected, context=f"vit weights '{prefix}'")
        self.w = {k[len(prefix):]: np.asarray(weights[k], dtype=np.float32)
                  for k in expected}

    def forward_batch(self, tokens: np.ndarray,
                      return_attention: bool = False):
        """(B, n_tokens, token_dim) -> (B, embed_dim) summary vectors."""
        cfg = self.cfg
        if tokens.ndim != 3 or tokens.shape[1] != cfg.n_tokens \
                or tokens.shape[2] != cfg.token_dim:
            raise ShapeError(
                f"expected (B, {cfg.n_tokens}, {cfg.token_dim}) tokens, "
                f"got {tokens.shape}")
        w = self.w
        b = tokens.shape[0]
        x = tokens.astype(np.float32) @ w["embed.weight"] + w["embed.bias"]
        cls = np.broadcast_to(w["cls"], (b, 1, cfg.embed_dim))
        x = np.concatenate([cls, x], axis=1) + w["pos"][None, :, :]

        n = cfg.n_tokens + 1
        hd = cfg.embed_dim // cfg.heads
        scale = np.float32(1.0 / np.sqrt(hd))
        attentions = []
        for i in range(cfg.depth):
            blk = f"blocks.{i}."
            h = _layernorm(x, w[blk + "ln1.gamma"], w[blk + "ln1.beta"])
            qkv = h @ w[blk + "attn.qkv.weight"] + w[blk + "attn.qkv.bias"]
            qkv = qkv.reshape(b, n, 3, cfg.heads, hd).transpose(2, 0, 3, 1, 4)
            q, k, v = qkv[0], qkv[1], qkv[2]          # (B, H, n, hd)
            scores = (q @ k.transpose(0, 1, 3, 2)) * scale
            scores -= scores.max(axis=-1, keepdims=True)
            e = np.exp(scores)
            attn = e / e.sum(axis=-1, keepdims=True)
            if return_attention:
                attentions.append(attn)
            ctx = (attn @ v).transpose(0, 2, 1, 3).reshape(b, n, cfg.embed_dim)
            x = x + ctx @ w[blk + "attn.proj.weight"] + w[blk + "attn.proj.bias"]
            h = _layernorm(x, w[blk + "ln2.gamma"], w[blk + "ln2.beta"])
            h = _gelu(h @ w[blk + "mlp.fc1.weight"] + w[blk + "mlp.fc1.bias"])
            x = x + h @ w[blk + "mlp.fc2.weight"] + w[blk + "mlp.fc2.bias"]

        x = _layernorm(x, w["ln_f.gamma"], w["ln_f.beta"])
        out = x[:, 0, :]
        if not np.all(np.isfinite(out)):
            raise DataError("non-finite summary vector from frozen transformer")
        if return_attention:
            return out, attentions
        return out

    def forward(self, tokens: np.ndarray) -> np.ndarray:
        """(n_tokens, token_dim) -> (1, embed_dim)."""
        return self.forward_batch(tokens[None, :, :])


def init_vit_weights(cfg: VitConfig, rng: np.random.Generator,
                     prefix: str = "") -> dict[str, np.ndarray]:
    out = {}
    for name, shape in vit_tensor_shapes(cfg).items():
        if name.endswith(("gamma",)):
            arr = np.ones(shape, dtype=np.float32)
        elif name.endswith(("beta", "bias")):
            arr = np.zeros(shape, dtype=np.float32)
        else:
            arr = (rng.standard_normal(shape) * 0.02).astype(np.float32)
        out[prefix + name] = arr
    return out


def encoder_tensor_shapes(cfg: EncoderConfig) -> dict[str, tuple[int, ...]]:
    shapes = {("region." + k): v for k, v in vit_tensor_shapes(cfg.region_vit()).items()}
    shapes.update({("patch." + k): v for k, v in vit_tensor_shapes(cfg.patch_vit()).items()})
    return shapes


def init_encoder_weights(cfg: EncoderConfig, seed: int) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    weights = init_vit_weights(cfg.region_vit(), rng, prefix="region.")
    weights.update(init_vit_weights(cfg.patch_vit(), rng, prefix="patch."))
    return weights


def save_encoder_weights(path: str | Path, weights: Mapping[str, np.ndarray]) -> None:
    save_archive(path, weights)


def load_encoder_weights(path: str | Path, cfg: EncoderConfig) -> dict[str, np.ndarray]:
    weights = load_archive(path)
    validate_tensors(weights, encoder_tensor_shapes(cfg), context=str(path))
    return weights


class HierarchicalEncoder:
    """Frozen two-level encoder mapping patch pixels to 576-d tokens."""

    def __init__(self, cfg: EncoderConfig, weights: Mapping[str, np.ndarray]):
        self.cfg = cfg
        self.region_net = Vit(cfg.region_vit(), weights, prefix="region.")
        self.patch_net = Vit(cfg.patch_vit(), weights, prefix="patch.")

    def _patch_to_region_tokens(self, pixels: np.ndarray) -> np.ndarray:
        """(P, P, 3) uint8 -> (regions, tokens_per_region, 3*token_size^2)."""
        cfg = self.cfg
        p, r, t = cfg.patch_size, cfg.region_size, cfg.token_size
        if pixels.shape != (p, p, 3):
            raise ShapeError(f"expected ({p}, {p}, 3) patch pixels, got {pixels.shape}")
        x = pixels.astype(np.float32) / 255.0 - 0.5
        nr = p // r
        nt = r // t
        # regions in row-major order, tokens row-major within each region
        x = x.reshape(nr, r, nr, r, 3).transpose(0, 2, 1, 3, 4)
        x = x.reshape(nr * nr, nt, t, nt, t, 3).transpose(0, 1, 3, 2, 4, 5)
        return x.reshape(nr * nr, nt * nt, t * t * 3)

    def encode_patch(self, pixels: np.ndarray) -> np.ndarray:
        """One patch -> 576-d token: concat(patch summary, mean region summary)."""
        tokens = self._patch_to_region_tokens(pixels)
        region_cls = self.region_net.forward_batch(tokens)        # (R, 384)
        patch_cls = self.patch_net.forward(region_cls)[0]          # (192,)
        return np.concatenate([patch_cls, region_cls.mean(axis=0)]).astype(np.float32)

    def encode_slide(self, record: SlideRecord, patches_dir: str | Path) -> np.ndarray:
        """All retained patches of a slide, manifest order -> (M, 576)."""
        if not record.usable:
            raise DataError(f"slide {record.slide_id} has no usable patches")
        patches_dir = Path(patches_dir)
        rows = []
        for entry in record.patches:
            path = patches_dir / patch_filename(record.slide_id, entry.x, entry.y)
            rows.append(self.encode_patch(load_rgb(path)))
        return np.stack(rows, axis=0)
