"""Training protocol: Adam with split learning rates, value gradient clipping,
BLEU-4 plateau decay, early stopping, deterministic seeded runs, checkpoints.

The thumbnail encoder trains at ``encoder_lr``; the attention pooling,
projection and decoder train together at ``decoder_lr``. Frozen patch-encoder
weights never enter the optimizer (they are consumed offline during feature
encoding). Validation BLEU-4 uses greedy decoding. Learning rates decay by
``lr_decay`` after every ``plateau_patience`` consecutive epochs without a
new best validation BLEU-4, and training stops after
``early_stop_patience`` such epochs; the checkpoint with the best validation
BLEU-4 is kept.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from . import vocab as V
from .archive import load_archive, save_archive
from .decoder import CaptionDecoder, DecoderConfig
from .errors import ConfigError, DataError, NumericError
from .fusion import AttentionFusion, FusionConfig
from .metrics import bleu
from .pipeline import CaptionModel, ThumbLoader, caption_tokens
from .thumb import ThumbConfig, ThumbEncoder
from .tiler import SlideRecord
from .vocab import PAD


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    encoder_lr: float = 1e-4
    decoder_lr: float = 4e-4
    lr_decay: float = 0.8
    plateau_patience: int = 8
    early_stop_patience: int = 20
    clip_value: float = 5.0
    lambda_att: float = 1.0
    seed: int = 0
    max_epochs: int = 100
    target_val_bleu4: float | None = None  # optional early exit for overfit runs

    def __post_init__(self):
        if min(self.batch_size, self.plateau_patience, self.early_stop_patience,
               self.max_epochs) < 1:
            raise ConfigError("batch size, patiences and max_epochs must be positive")
        if min(self.encoder_lr, self.decoder_lr, self.lr_decay, self.clip_value) <= 0:
            raise ConfigError("rates, decay and clip value must be positive")

    def to_dict(self) -> dict:
        return {f: getattr(self, f) for f in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


class Adam:
    """Standard bias-corrected Adam over a named parameter group."""

    def __init__(self, params: dict[str, T.Tensor], lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def state(self) -> dict:
        return {"t": self.t, "m": self.m, "v": self.v}

    def load_state(self, t: int, m: dict, v: dict) -> None:
        self.t = t
        for k in self.params:
            self.m[k] = np.asarray(m[k], dtype=np.float32).copy()
            self.v[k] = np.asarray(v[k], dtype=np.float32).copy()


class PlateauTracker:
    """Best-value tracking with decay-every-N and stop-after-M plateau rules."""

    def __init__(self, plateau_patience: int, stop_patience: int):
        self.plateau_patience = plateau_patience
        self.stop_patience = stop_patience
        self.best = -math.inf
        self.best_epoch = 0
        self.streak = 0

    def update(self, epoch: int, value: float) -> str:
        """Returns 'improved', 'decay', 'stop' or ''."""
        if value > self.best:
            self.best = value
            self.best_epoch = epoch
            self.streak = 0
            return "improved"
        self.streak += 1
        if self.streak >= self.stop_patience:
            return "stop"
        if self.streak % self.plateau_patience == 0:
            return "decay"
        return ""

    def state(self) -> dict:
        return {"best": self.best, "best_epoch": self.best_epoch, "streak": self.streak}

    def load_state(self, s: dict) -> None:
        self.best = s["best"]
        self.best_epoch = s["best_epoch"]
        self.streak = s["streak"]


@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    val_bleu4: float
    lr_encoder: float
    lr_decoder: float
    event: str = ""

    def to_dict(self) -> dict:
        return {"epoch": self.epoch, "train_loss": self.train_loss,
                "val_bleu4": self.val_bleu4, "lr_encoder": self.lr_encoder,
                "lr_decoder": self.lr_decoder, "event": self.event}


@dataclass
class TrainResult:
    model: CaptionModel
    logs: list[EpochLog]
    best_epoch: int
    best_val_bleu4: float
    best_path: Path | None
    last_path: Path | None


def collate(records: Sequence[SlideRecord], features: dict[str, np.ndarray],
            load_thumb: ThumbLoader, captions: dict[str, list[int]]):
    """Pad a minibatch: patch tokens to max M with a mask, captions to max length."""
    b = len(records)
    ms = [features[r.slide_id].shape[0] for r in records]
    m_max = max(ms)
    dim = features[records[0].slide_id].shape[1]
    tokens = np.zeros((b * m_max, dim), dtype=np.float32)
    mask = np.zeros((b, m_max), dtype=bool)
    for i, rec in enumerate(records):
        f = features[rec.slide_id]
        tokens[i * m_max:i * m_max + f.shape[0]] = f
        mask[i, :f.shape[0]] = True
    lengths = np.array([len(captions[r.slide_id]) for r in records], dtype=np.int64)
    gold = np.full((b, int(lengths.max())), PAD, dtype=np.int64)
    for i, rec in enumerate(records):
        ids = captions[rec.slide_id]
        gold[i, :len(ids)] = ids
    thumbs = np.stack([load_thumb(r) for r in records])
    return thumbs, tokens, mask, gold, lengths


def validation_bleu4(model: CaptionModel, records: Sequence[SlideRecord],
                     features: dict[str, np.ndarray], load_thumb: ThumbLoader,
                     vb: V.Vocabulary, max_len: int) -> float:
    cands, refs = [], []
    for rec in records:
        hyp, _ = model.generate(load_thumb(rec), features[rec.slide_id],
                                beam_width=1, max_len=max_len)
        cands.append(caption_tokens(hyp, vb))
        refs.append(V.tokenize(rec.caption))
    return bleu(cands, refs)[3]


def train(model: CaptionModel, train_records: Sequence[SlideRecord],
          val_records: Sequence[SlideRecord], features: dict[str, np.ndarray],
          load_thumb: ThumbLoader, vb: V.Vocabulary, cfg: TrainConfig,
          out_dir: str | Path | None = None, config_hash: str = "",
          resume_from: str | Path | None = None,
          max_decode_len: int = 60) -> TrainResult:
    """Run the full protocol; returns the model restored to its best epoch."""
    if not train_records or not val_records:
        raise DataError("train and validation splits must be non-empty")
    for rec in list(train_records) + list(val_records):
        if rec.slide_id not in features:
            raise DataError(f"missing encoded features for slide {rec.slide_id}")

    captions = {r.slide_id: V.encode(r.caption, vb)
                for r in list(train_records) + list(val_records)}
    enc_opt = Adam(model.encoder_parameters(), cfg.encoder_lr)
    dec_opt = Adam(model.decoder_parameters(), cfg.decoder_lr)
    tracker = PlateauTracker(cfg.plateau_patience, cfg.early_stop_patience)
    rng = np.random.default_rng(cfg.seed)
    start_epoch = 1
    logs: list[EpochLog] = []

    out_dir = Path(out_dir) if out_dir is not None else None
    best_path = out_dir / "checkpoints" / "best.ckpt" if out_dir else None
    last_path = out_dir / "checkpoints" / "last.ckpt" if out_dir else None
    log_path = out_dir / "logs.jsonl" if out_dir else None
    if out_dir:
        (out_dir / "checkpoints").mkdir(parents=True, exist_ok=True)

    if resume_from is not None:
        state = load_checkpoint(resume_from, model)
        enc_opt.load_state(state["enc_t"], state["enc_m"], state["enc_v"])
        dec_opt.load_state(state["dec_t"], state["dec_m"], state["dec_v"])
        enc_opt.lr = state["lr_encoder"]
        dec_opt.lr = state["lr_decoder"]
        tracker.load_state(state["tracker"])
        rng.bit_generator.state = state["rng_state"]
        start_epoch = state["epoch"] + 1
        logs = [EpochLog(**d) for d in state["logs"]]

    all_params = list(model.parameters().values())
    n_train = len(train_records)
    stop = False

    for epoch in range(start_epoch, cfg.max_epochs + 1):
        order = rng.permutation(n_train)
        total_loss = 0.0
        total_weight = 0
        for lo in range(0, n_train, cfg.batch_size):
            batch = [train_records[i] for i in order[lo:lo + cfg.batch_size]]
            thumbs, tokens, mask, gold, lengths = collate(
                batch, features, load_thumb, captions)
            with T.GradTape() as tape:
                annotations, _, _ = model.batch_annotations(thumbs, T.Tensor(tokens), mask)
                loss, _ = model.decoder.teacher_loss(
                    annotations, model.grid_count, gold, lengths,
                    lambda_att=cfg.lambda_att)
                value = loss.item()
                if not math.isfinite(value):
                    raise NumericError(
                        f"non-finite loss {value} at epoch {epoch}, batch {lo // cfg.batch_size}")
                tape.backward(loss)
            T.clip_gradients(all_params, cfg.clip_value)
            enc_opt.step()
            dec_opt.step()
            T.zero_grads(all_params)
            total_loss += value * len(batch)
            total_weight += len(batch)

        val_b4 = validation_bleu4(model, val_records, features, load_thumb, vb,
                                  max_len=max_decode_len)
        event = tracker.update(epoch, val_b4)
        if event == "decay":
            enc_opt.lr *= cfg.lr_decay
            dec_opt.lr *= cfg.lr_decay
        target_hit = cfg.target_val_bleu4 is not None and val_b4 >= cfg.target_val_bleu4
        logged = event + "+target" if (target_hit and event) else ("target" if target_hit else event)
        entry = EpochLog(epoch=epoch, train_loss=total_loss / total_weight,
                         val_bleu4=val_b4, lr_encoder=enc_opt.lr,
                         lr_decoder=dec_opt.lr, event=logged)
        logs.append(entry)
        if log_path:
            with open(log_path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(entry.to_dict(), sort_keys=True) + "\n")

        if out_dir:
            save_checkpoint(last_path, model, enc_opt, dec_opt, tracker, rng,
                            epoch, logs, vb, cfg, config_hash)
            if event == "improved":
                save_checkpoint(best_path, model, enc_opt, dec_opt, tracker, rng,
                                epoch, logs, vb, cfg, config_hash)
        if event == "stop" or target_hit:
            stop = True
        if stop:
            break

    if best_path and best_path.exists():
        load_checkpoint(best_path, model)
    return TrainResult(model=model, logs=logs, best_epoch=tracker.best_epoch,
                       best_val_bleu4=tracker.best, best_path=best_path,
                       last_path=last_path)


# -- checkpoint io ----------------------------------------------------------


def save_checkpoint(path: str | Path, model: CaptionModel, enc_opt: Adam,
                    dec_opt: Adam, tracker: PlateauTracker, rng: np.random.Generator,
                    epoch: int, logs: list[EpochLog], vb: V.Vocabulary,
                    cfg: TrainConfig, config_hash: str = "") -> None:
    path = Path(path)
    tensors: dict[str, np.ndarray] = {}
    for name, p in model.parameters().items():
        tensors[name] = p.data
    for group, opt in (("enc", enc_opt), ("dec", dec_opt)):
        for k in opt.params:
            tensors[f"adam.{group}.{k}.m"] = opt.m[k]
            tensors[f"adam.{group}.{k}.v"] = opt.v[k]
    save_archive(path, tensors)
    sidecar = {
        "epoch": epoch,
        "enc_t": enc_opt.t, "dec_t": dec_opt.t,
        "lr_encoder": enc_opt.lr, "lr_decoder": dec_opt.lr,
        "tracker": tracker.state(),
        "rng_state": rng.bit_generator.state,
        "logs": [e.to_dict() for e in logs],
        "vocab_tokens": vb.tokens,
        "train_config": cfg.to_dict(),
        "config_hash": config_hash,
        "thumb_config": model.thumb.cfg.to_dict(),
        "fusion_config": model.fusion.cfg.to_dict(),
        "decoder_config": model.decoder.cfg.to_dict(),
    }
    Path(str(path) + ".json").write_text(
        json.dumps(sidecar, sort_keys=True), encoding="utf-8")


def read_sidecar(path: str | Path) -> dict:
    sidecar_path = Path(str(path) + ".json")
    try:
        return json.loads(sidecar_path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise DataError(f"cannot read checkpoint sidecar {sidecar_path}: {exc}") from exc


def load_checkpoint(path: str | Path, model: CaptionModel) -> dict:
    """Restore parameters (and return optimizer/loop state) from a checkpoint."""
    side = read_sidecar(path)
    for attr, want in (("thumb", "thumb_config"), ("fusion", "fusion_config"),
                       ("decoder", "decoder_config")):
        have = getattr(model, attr).cfg.to_dict()
        if have != side[want]:
            raise ConfigError(
                f"checkpoint {want} mismatch: saved {side[want]}, model has {have}")
    tensors = load_archive(path)
    params = model.parameters()
    for name, p in params.items():
        if name not in tensors:
            raise DataError(f"checkpoint missing tensor {name}")
        if tensors[name].shape != p.data.shape:
            raise ConfigError(
                f"checkpoint tensor {name} has shape {tensors[name].shape}, "
                f"model expects {p.data.shape}")
        p.data = tensors[name].copy()
        p.grad = None
    enc_names = [k for k in model.encoder_parameters()]
    dec_names = [k for k in model.decoder_parameters()]
    state = {
        "epoch": side["epoch"],
        "enc_t": side["enc_t"], "dec_t": side["dec_t"],
        "lr_encoder": side["lr_encoder"], "lr_decoder": side["lr_decoder"],
        "tracker": side["tracker"],
        "rng_state": side["rng_state"],
        "logs": side["logs"],
        "enc_m": {k: tensors[f"adam.enc.{k}.m"] for k in enc_names},
        "enc_v": {k: tensors[f"adam.enc.{k}.v"] for k in enc_names},
        "dec_m": {k: tensors[f"adam.dec.{k}.m"] for k in dec_names},
        "dec_v": {k: tensors[f"adam.dec.{k}.v"] for k in dec_names},
        "vocab_tokens": side["vocab_tokens"],
        "config_hash": side.get("config_hash", ""),
    }
    return state


def model_from_checkpoint(path: str | Path) -> tuple[CaptionModel, V.Vocabulary, dict]:
    """Rebuild a full model + vocabulary from a self-contained checkpoint."""
    side = read_sidecar(path)
    model = CaptionModel(
        thumb=ThumbEncoder.random(ThumbConfig.from_dict(side["thumb_config"]), seed=0),
        fusion=AttentionFusion.random(FusionConfig.from_dict(side["fusion_config"]), seed=0),
        decoder=CaptionDecoder.random(DecoderConfig.from_dict(side["decoder_config"]), seed=0),
    )
    load_checkpoint(path, model)
    vb = V.Vocabulary(side["vocab_tokens"])
    return model, vb, side
