"""Attention LSTM caption decoder over fused annotation vectors.

Per step, the previous token's embedding and a gated attention readout of
the annotation grid feed an LSTM cell; logits come from a deep output layer
combining the embedding, the new hidden state and the readout. Training is
teacher-forced with a doubly stochastic attention penalty; inference is
greedy or beam search with a length-normalized ranking. The <unk> token is
never emitted at inference.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import tensor as T
from .archive import validate_tensors
from .errors import ConfigError, DataError, ShapeError
from .vocab import END, START, UNK


@dataclass(frozen=True)
class DecoderConfig:
    vocab_size: int
    annot_dim: int = 1024
    embed_dim: int = 256
    hidden_dim: int = 512
    attn_dim: int = 256
    lambda_att: float = 1.0
    max_len: int = 60
    beam_width: int = 3
    length_norm: float = 0.7

    def __post_init__(self):
        if self.vocab_size < 5:
            raise ConfigError("vocabulary must hold the specials plus content tokens")

    def to_dict(self) -> dict:
        return {f: getattr(self, f) for f in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, d: dict) -> "DecoderConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown decoder config keys: {sorted(unknown)}")
        return cls(**d)


def decoder_tensor_shapes(cfg: DecoderConfig) -> dict[str, tuple[int, ...]]:
    a, de, dh, da = cfg.annot_dim, cfg.embed_dim, cfg.hidden_dim, cfg.attn_dim
    return {
        "embed": (cfg.vocab_size, de),
        "init_h.weight": (a, dh), "init_h.bias": (1, dh),
        "init_c.weight": (a, dh), "init_c.bias": (1, dh),
        "att.w_ann": (a, da), "att.w_hid": (dh, da),
        "att.bias": (1, da), "att.v": (da, 1),
        "gate.weight": (dh, 1), "gate.bias": (1, 1),
        "lstm.w_x": (de + a, 4 * dh), "lstm.w_h": (dh, 4 * dh), "lstm.bias": (1, 4 * dh),
        "out.w_h": (dh, de), "out.w_z": (a, de),
        "out.w_o": (de, cfg.vocab_size), "out.bias": (1, cfg.vocab_size),
    }


@dataclass
class Hypothesis:
    """A decoded sequence: ids include the leading <start> (and <end> if reached)."""
    ids: list[int]
    logprob: float
    attentions: list[np.ndarray]   # one (n_annotations,) map per generated token
    gates: list[float]
    ended: bool

    @property
    def generated(self) -> list[int]:
        return self.ids[1:]

    def score(self, length_norm: float) -> float:
        return self.logprob / max(1, len(self.generated)) ** length_norm


@dataclass
class _Context:
    """Per-sequence constants: annotations and their attention projection."""
    annotations: T.Tensor   # (B*n, annot_dim)
    ann_proj: T.Tensor      # (B*n, attn_dim)
    n: int
    batch: int
    ones_annot: np.ndarray  # (1, annot_dim), broadcast helper for the gate


class CaptionDecoder:
    def __init__(self, cfg: DecoderConfig, weights: Mapping[str, np.ndarray]):
        self.cfg = cfg
        validate_tensors(weights, decoder_tensor_shapes(cfg), context="decoder weights")
        self.params = {
            name: T.Tensor(np.asarray(weights[name], dtype=np.float32), requires_grad=True)
            for name in decoder_tensor_shapes(cfg)
        }

    @classmethod
    def random(cls, cfg: DecoderConfig, seed: int) -> "CaptionDecoder":
        rng = np.random.default_rng(seed)
        weights = {}
        for name, shape in decoder_tensor_shapes(cfg).items():
            if name == "embed":
                weights[name] = rng.uniform(-0.1, 0.1, shape).astype(np.float32)
            elif name.endswith("bias"):
                weights[name] = np.zeros(shape, dtype=np.float32)
            else:
                weights[name] = T.uniform_init(rng, shape, shape[0])
        # forget-gate bias starts open so early steps keep cell memory
        dh = cfg.hidden_dim
        weights["lstm.bias"][0, dh:2 * dh] = 1.0
        return cls(cfg, weights)

    def parameters(self) -> dict[str, T.Tensor]:
        return self.params

    # -- forward pieces ----------------------------------------------------

    def context(self, annotations: T.Tensor, n: int) -> _Context:
        if annotations.data.ndim != 2 or annotations.shape[1] != self.cfg.annot_dim:
            raise ShapeError(
                f"expected (*, {self.cfg.annot_dim}) annotations, got {annotations.shape}")
        if annotations.shape[0] % n != 0:
            raise ShapeError(f"{annotations.shape[0]} annotation rows not divisible by {n}")
        ann_proj = T.matmul(annotations, self.params["att.w_ann"])
        return _Context(annotations=annotations, ann_proj=ann_proj, n=n,
                        batch=annotations.shape[0] // n,
                        ones_annot=np.ones((1, self.cfg.annot_dim), dtype=np.float32))

    def init_state(self, ctx: _Context) -> tuple[T.Tensor, T.Tensor]:
        mean_ann = T.group_mean(ctx.annotations, ctx.n)
        h0 = T.tanh(T.add(T.matmul(mean_ann, self.params["init_h.weight"]),
                          self.params["init_h.bias"]))
        c0 = T.tanh(T.add(T.matmul(mean_ann, self.params["init_c.weight"]),
                          self.params["init_c.bias"]))
        return h0, c0

    def step(self, prev_ids: np.ndarray, h: T.Tensor, c: T.Tensor, ctx: _Context):
        """One decode step for a batch.

        Returns (logits (B, V), h', c', beta (B, n), gamma (B, 1)).
        """
        cfg = self.cfg
        prev_ids = np.asarray(prev_ids, dtype=np.int64).reshape(-1)
        if prev_ids.max() >= cfg.vocab_size or prev_ids.min() < 0:
            raise DataError(f"token id out of range [0, {cfg.vocab_size})")
        b, n = ctx.batch, ctx.n

        # attention scores over annotations, conditioned on the hidden state
        hid = T.add(T.matmul(h, self.params["att.w_hid"]), self.params["att.bias"])
        act = T.tanh(T.add(ctx.ann_proj, T.repeat_rows(hid, n)))
        scores = T.reshape(T.matmul(act, self.params["att.v"]), (b, n))
        beta = T.softmax(scores, axis=1)

        gamma = T.sigmoid(T.add(T.matmul(h, self.params["gate.weight"]),
                                self.params["gate.bias"]))
        z = T.mul(T.attend(ctx.annotations, beta), T.matmul(gamma, T.Tensor(ctx.ones_annot)))

        emb = T.lookup(self.params["embed"], prev_ids)
        x = T.concat([emb, z], axis=1)
        gates = T.add(T.add(T.matmul(x, self.params["lstm.w_x"]),
                            T.matmul(h, self.params["lstm.w_h"])),
                      self.params["lstm.bias"])
        dh = cfg.hidden_dim
        i = T.sigmoid(T.slice_cols(gates, 0, dh))
        f = T.sigmoid(T.slice_cols(gates, dh, 2 * dh))
        o = T.sigmoid(T.slice_cols(gates, 2 * dh, 3 * dh))
        g = T.tanh(T.slice_cols(gates, 3 * dh, 4 * dh))
        c2 = T.add(T.mul(f, c), T.mul(i, g))
        h2 = T.mul(o, T.tanh(c2))

        inner = T.add(emb, T.add(T.matmul(h2, self.params["out.w_h"]),
                                 T.matmul(z, self.params["out.w_z"])))
        logits = T.add(T.matmul(inner, self.params["out.w_o"]), self.params["out.bias"])
        return logits, h2, c2, beta, gamma

    # -- training ----------------------------------------------------------

    def teacher_loss(self, annotations: T.Tensor, n: int, gold: np.ndarray,
                     lengths: np.ndarray, lambda_att: float | None = None):
        """Teacher-forced loss for a batch of encoded captions.

        ``gold`` is (B, Tmax) ids padded with <pad>; ``lengths`` counts real
        tokens including <start>/<end>. Per sample the loss is mean per-step
        cross entropy plus lambda * sum_j (1 - sum_t beta_tj)^2 over real
        steps; the batch loss is the sample mean. Also returns the per-step
        attention maps.
        """
        lam = self.cfg.lambda_att if lambda_att is None else lambda_att
        gold = np.asarray(gold, dtype=np.int64)
        lengths = np.asarray(lengths, dtype=np.int64)
        if gold.ndim != 2 or gold.shape[0] != lengths.shape[0]:
            raise ShapeError(f"gold {gold.shape} does not match lengths {lengths.shape}")
        b = gold.shape[0]
        if (lengths < 2).any():
            raise DataError("every caption needs at least <start> and <end>")
        rows = np.arange(b)
        if (gold[:, 0] != START).any() or (gold[rows, lengths - 1] != END).any():
            raise DataError("captions must be framed by <start> and <end>")

        ctx = self.context(annotations, n)
        if ctx.batch != b:
            raise ShapeError(f"{ctx.batch} annotation groups for {b} captions")
        h, c = self.init_state(ctx)
        steps = int(lengths.max()) - 1
        n_steps = (lengths - 1).astype(np.float32)

        loss = None
        beta_sum = None
        betas: list[np.ndarray] = []
        for t in range(steps):
            logits, h, c, beta, _ = self.step(gold[:, t], h, c, ctx)
            mask = (t + 1 < lengths).astype(np.float32)
            w = mask / n_steps / b
            ce = T.cross_entropy(logits, gold[:, t + 1], weights=w)
            loss = ce if loss is None else T.add(loss, ce)
            masked_beta = T.mul(beta, np.repeat(mask[:, None], n, axis=1))
            beta_sum = masked_beta if beta_sum is None else T.add(beta_sum, masked_beta)
            betas.append(beta.data.copy())

        if lam != 0.0:
            deficit = T.add(T.neg(beta_sum), 1.0)
            penalty = T.mul(T.sum_all(T.mul(deficit, deficit)), lam / b)
            loss = T.add(loss, penalty)
        return loss, betas

    # -- inference ---------------------------------------------------------

    def _masked_log_softmax(self, logits: np.ndarray) -> np.ndarray:
        lg = logits.astype(np.float64).copy()
        lg[UNK] = -np.inf
        m = lg.max()
        lse = m + np.log(np.exp(lg - m).sum())
        return lg - lse

    def greedy(self, annotations, max_len: int | None = None) -> Hypothesis:
        """Argmax decode of one slide; ties pick the lowest token id."""
        max_len = self.cfg.max_len if max_len is None else max_len
        ann = annotations if isinstance(annotations, T.Tensor) else T.Tensor(annotations)
        ctx = self.context(ann, ann.shape[0])
        h, c = self.init_state(ctx)
        ids = [START]
        attentions: list[np.ndarray] = []
        gates: list[float] = []
        logprob = 0.0
        ended = False
        for _ in range(max_len):
            logits, h, c, beta, gamma = self.step(np.array([ids[-1]]), h, c, ctx)
            lp = self._masked_log_softmax(logits.data[0])
            tok = int(np.argmax(lp))
            logprob += float(lp[tok])
            ids.append(tok)
            attentions.append(beta.data[0].copy())
            gates.append(float(gamma.data[0, 0]))
            if tok == END:
                ended = True
                break
        return Hypothesis(ids=ids, logprob=logprob, attentions=attentions,
                          gates=gates, ended=ended)

    def beam(self, annotations, width: int | None = None,
             max_len: int | None = None) -> list[Hypothesis]:
        """Beam search; finished hypotheses retire to a pool, ranking is by
        logprob / length^length_norm with lexicographic tie-break."""
        width = self.cfg.beam_width if width is None else width
        max_len = self.cfg.max_len if max_len is None else max_len
        if width < 1:
            raise ConfigError("beam width must be >= 1")
        ann = annotations if isinstance(annotations, T.Tensor) else T.Tensor(annotations)
        ctx = self.context(ann, ann.shape[0])
        h0, c0 = self.init_state(ctx)
        active = [Hypothesis([START], 0.0, [], [], False)]
        states = {(START,): (h0, c0)}
        pool: list[Hypothesis] = []

        for _ in range(max_len):
            if not active:
                break
            candidates = []
            new_states = {}
            for hyp in active:
                key = tuple(hyp.ids)
                h, c = states[key]
                logits, h2, c2, beta, gamma = self.step(np.array([hyp.ids[-1]]), h, c, ctx)
                lp = self._masked_log_softmax(logits.data[0])
                new_states[key] = (h2, c2, beta.data[0].copy(), float(gamma.data[0, 0]))
                for tok in range(self.cfg.vocab_size):
                    if not np.isfinite(lp[tok]):
                        continue
                    candidates.append((hyp.logprob + float(lp[tok]), hyp, tok))
            candidates.sort(key=lambda cand: (-cand[0], tuple(cand[1].ids) + (cand[2],)))
            active = []
            states = {}
            for score, hyp, tok in candidates[:width]:
                h2, c2, beta, gamma = new_states[tuple(hyp.ids)]
                ext = Hypothesis(ids=hyp.ids + [tok], logprob=score,
                                 attentions=hyp.attentions + [beta],
                                 gates=hyp.gates + [gamma], ended=(tok == END))
                if ext.ended:
                    pool.append(ext)
                else:
                    active.append(ext)
                    states[tuple(ext.ids)] = (h2, c2)

        ranked = pool if pool else active
        ranked = sorted(ranked, key=lambda hyp: (-hyp.score(self.cfg.length_norm),
                                                 tuple(hyp.ids)))
        return ranked
