"""One structured run configuration covering every module, JSON round-trip,
unknown keys rejected, content-hashed for artifact provenance.

The default profile carries the full-scale sizes (4096 patches, 1024
thumbnails, deep frozen transformers); the desk profile shrinks geometry for
synthetic-corpus runs while keeping every representation width identical.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .decoder import DecoderConfig
from .errors import ConfigError
from .fusion import FusionConfig
from .thumb import ThumbConfig
from .tiler import TileConfig
from .trainer import TrainConfig
from .vit import EncoderConfig


@dataclass(frozen=True)
class DecoderSettings:
    """Decoder hyperparameters; vocabulary size binds at training time."""
    embed_dim: int = 256
    hidden_dim: int = 512
    attn_dim: int = 256
    lambda_att: float = 1.0
    max_len: int = 60
    beam_width: int = 3
    length_norm: float = 0.7

    def to_dict(self) -> dict:
        return {f: getattr(self, f) for f in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, d: dict) -> "DecoderSettings":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown decoder config keys: {sorted(unknown)}")
        return cls(**d)

    def resolve(self, vocab_size: int, annot_dim: int) -> DecoderConfig:
        return DecoderConfig(vocab_size=vocab_size, annot_dim=annot_dim,
                             **self.to_dict())


@dataclass(frozen=True)
class RunConfig:
    seed: int = 13
    min_count: int = 1
    tile: TileConfig = field(default_factory=TileConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig.paper)
    thumb: ThumbConfig = field(default_factory=ThumbConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    decoder: DecoderSettings = field(default_factory=DecoderSettings)
    train: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self):
        if self.fusion.token_dim != self.encoder.out_dim:
            raise ConfigError(
                f"fusion token_dim {self.fusion.token_dim} != encoder output "
                f"{self.encoder.out_dim}")
        if self.thumb.input_size != self.tile.thumb_size:
            raise ConfigError(
                f"thumb encoder input {self.thumb.input_size} != tiled thumbnail "
                f"{self.tile.thumb_size}")
        if self.encoder.patch_size != self.tile.patch_size:
            raise ConfigError(
                f"patch encoder size {self.encoder.patch_size} != tiled patch "
                f"{self.tile.patch_size}")

    @property
    def annot_dim(self) -> int:
        return self.thumb.feature_dim + self.fusion.proj_dim

    @classmethod
    def desk(cls, seed: int = 13, **train_overrides) -> "RunConfig":
        """Small-geometry profile for synthetic corpora; widths match full scale."""
        return cls(
            seed=seed,
            tile=TileConfig(patch_size=64, thumb_size=64),
            encoder=EncoderConfig.desk(),
            thumb=ThumbConfig.desk(),
            fusion=FusionConfig(),
            decoder=DecoderSettings(embed_dim=64, hidden_dim=128, attn_dim=64,
                                    max_len=16),
            train=TrainConfig(**train_overrides) if train_overrides else TrainConfig(),
        )

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "min_count": self.min_count,
            "tile": self.tile.to_dict(),
            "encoder": self.encoder.to_dict(),
            "thumb": self.thumb.to_dict(),
            "fusion": self.fusion.to_dict(),
            "decoder": self.decoder.to_dict(),
            "train": self.train.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        allowed = {"seed", "min_count", "tile", "encoder", "thumb", "fusion",
                   "decoder", "train"}
        unknown = set(d) - allowed
        if unknown:
            raise ConfigError(f"unknown run config keys: {sorted(unknown)}")
        kwargs: dict = {}
        if "seed" in d:
            kwargs["seed"] = int(d["seed"])
        if "min_count" in d:
            kwargs["min_count"] = int(d["min_count"])
        for key, sub in (("tile", TileConfig), ("encoder", EncoderConfig),
                         ("thumb", ThumbConfig), ("fusion", FusionConfig),
                         ("decoder", DecoderSettings), ("train", TrainConfig)):
            if key in d:
                kwargs[key] = sub.from_dict(d[key])
        return cls(**kwargs)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True),
                              encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        try:
            raw = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        try:
            return cls.from_dict(json.loads(raw))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from exc

    def hash(self) -> str:
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode("utf-8")).hexdigest()[:16]
