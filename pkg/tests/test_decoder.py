import numpy as np
import pytest

from histocap import tensor as T
from histocap.decoder import CaptionDecoder, DecoderConfig, Hypothesis
from histocap.errors import DataError
from histocap.vocab import END, PAD, START, UNK

CFG = DecoderConfig(vocab_size=7, annot_dim=10, embed_dim=6, hidden_dim=8,
                    attn_dim=5, lambda_att=1.0, max_len=8, beam_width=3)


def make_decoder(seed=0, cfg=CFG):
    return CaptionDecoder.random(cfg, seed=seed)


def annotations(n=4, seed=1, dim=CFG.annot_dim):
    return np.random.default_rng(seed).uniform(-1, 1, (n, dim)).astype(np.float32)


def exhaustive_decode(dec, ann, max_len):
    """Full tree enumeration mirroring the retire-to-pool beam semantics."""
    ctx = dec.context(T.Tensor(ann), ann.shape[0])
    h0, c0 = dec.init_state(ctx)
    ended, truncated = [], []

    def rec(ids, logprob, h, c, attns, gates):
        if ids[-1] == END:
            ended.append(Hypothesis(ids, logprob, attns, gates, True))
            return
        if len(ids) - 1 == max_len:
            truncated.append(Hypothesis(ids, logprob, attns, gates, False))
            return
        logits, h2, c2, beta, gamma = dec.step(np.array([ids[-1]]), h, c, ctx)
        lp = dec._masked_log_softmax(logits.data[0])
        for tok in range(dec.cfg.vocab_size):
            if np.isfinite(lp[tok]):
                rec(ids + [tok], logprob + float(lp[tok]), h2, c2,
                    attns + [beta.data[0].copy()], gates + [float(gamma.data[0, 0])])

    rec([START], 0.0, h0, c0, [], [])
    pool = ended if ended else truncated
    return sorted(pool, key=lambda h: (-h.score(dec.cfg.length_norm), tuple(h.ids)))


class TestInitState:
    def test_shapes(self):
        dec = make_decoder()
        ctx = dec.context(T.Tensor(annotations()), 4)
        h0, c0 = dec.init_state(ctx)
        assert h0.shape == (1, CFG.hidden_dim) and c0.shape == (1, CFG.hidden_dim)

    def test_identical_annotations_reduce_to_single(self):
        dec = make_decoder()
        row = annotations(1, seed=2)
        tiled = np.repeat(row, 4, axis=0)
        h_tiled, _ = dec.init_state(dec.context(T.Tensor(tiled), 4))
        h_one, _ = dec.init_state(dec.context(T.Tensor(row), 1))
        np.testing.assert_allclose(h_tiled.data, h_one.data, atol=1e-6)

    def test_gradient_through_init_path(self):
        dec = make_decoder(seed=3)
        ann = annotations(seed=4)
        probe = T.Tensor(np.random.default_rng(5).uniform(-1, 1, (1, CFG.hidden_dim))
                         .astype(np.float32))

        def f(w):
            saved = dec.params["init_h.weight"]
            dec.params["init_h.weight"] = w
            try:
                h0, _ = dec.init_state(dec.context(T.Tensor(ann), 4))
                return T.sum_all(T.mul(h0, probe))
            finally:
                dec.params["init_h.weight"] = saved

        assert T.check_gradients(f, dec.params["init_h.weight"], h=1e-4) < 1e-4


class TestStep:
    def test_beta_sums_to_one(self):
        dec = make_decoder()
        ctx = dec.context(T.Tensor(annotations(5)), 5)
        h, c = dec.init_state(ctx)
        _, _, _, beta, gamma = dec.step(np.array([START]), h, c, ctx)
        assert abs(beta.data.sum() - 1.0) < 1e-6
        assert 0.0 < gamma.data[0, 0] < 1.0

    def test_single_annotation_beta_one_z_gated(self):
        dec = make_decoder()
        ann = annotations(1, seed=6)
        ctx = dec.context(T.Tensor(ann), 1)
        h, c = dec.init_state(ctx)
        logits, h2, c2, beta, gamma = dec.step(np.array([START]), h, c, ctx)
        np.testing.assert_allclose(beta.data, [[1.0]])
        z = T.mul(T.attend(ctx.annotations, beta),
                  T.matmul(gamma, T.Tensor(ctx.ones_annot)))
        np.testing.assert_allclose(z.data[0], gamma.data[0, 0] * ann[0], atol=1e-6)

    def test_bad_token_id_rejected(self):
        dec = make_decoder()
        ctx = dec.context(T.Tensor(annotations()), 4)
        h, c = dec.init_state(ctx)
        with pytest.raises(DataError, match="out of range"):
            dec.step(np.array([CFG.vocab_size]), h, c, ctx)

    def test_full_step_gradients_match_fd(self):
        dec = make_decoder(seed=7)
        ann = annotations(3, seed=8)
        gold = np.array([[START, 4, 5, END]])
        lengths = np.array([4])

        def loss_for(name):
            def f(p):
                saved = dec.params[name]
                dec.params[name] = p
                try:
                    loss, _ = dec.teacher_loss(T.Tensor(ann), 3, gold, lengths)
                    return loss
                finally:
                    dec.params[name] = saved
            return f

        for name, param in dec.params.items():
            err = T.check_gradients(loss_for(name), param)
            assert err < 1e-4, f"{name}: {err}"


class TestTeacherLoss:
    def test_untrained_loss_is_log_v(self):
        dec = make_decoder(seed=9)
        gold = np.array([[START, 4, 5, 6, END]])
        loss, _ = dec.teacher_loss(T.Tensor(annotations()), 4, gold, np.array([5]),
                                   lambda_att=0.0)
        assert abs(loss.item() - np.log(CFG.vocab_size)) / np.log(CFG.vocab_size) < 0.05

    def test_lambda_zero_removes_regularizer_exactly(self):
        dec = make_decoder(seed=10)
        ann = T.Tensor(annotations())
        gold = np.array([[START, 4, END, PAD], [START, 5, 6, END]])
        lengths = np.array([3, 4])
        ann2 = T.concat([ann, ann], axis=0)
        base, betas = dec.teacher_loss(ann2, 4, gold, lengths, lambda_att=0.0)
        full, _ = dec.teacher_loss(ann2, 4, gold, lengths, lambda_att=1.0)
        mask = np.array([[1.0, 1.0, 0.0], [1.0, 1.0, 1.0]])
        s = sum(b * mask[:, t:t + 1] for t, b in enumerate(betas))
        penalty = ((1.0 - s) ** 2).sum() / 2
        assert full.item() == pytest.approx(base.item() + penalty, rel=1e-5)

    def test_rejects_unframed_captions(self):
        dec = make_decoder()
        ann = T.Tensor(annotations())
        with pytest.raises(DataError, match="framed"):
            dec.teacher_loss(ann, 4, np.array([[4, 5, END, PAD]]), np.array([3]))
        with pytest.raises(DataError, match="at least"):
            dec.teacher_loss(ann, 4, np.array([[START, END]]), np.array([1]))


class TestGreedy:
    def test_deterministic(self):
        dec = make_decoder(seed=11)
        ann = annotations(seed=12)
        a = dec.greedy(ann)
        b = dec.greedy(ann)
        assert a.ids == b.ids and a.logprob == b.logprob

    def test_max_len_one_truncates(self):
        dec = make_decoder(seed=13)
        hyp = dec.greedy(annotations(seed=14), max_len=1)
        assert len(hyp.generated) == 1
        assert hyp.ended == (hyp.generated[0] == END)

    def test_never_emits_unk(self):
        dec = make_decoder(seed=15)
        dec.params["out.bias"].data[0, UNK] = 50.0  # make <unk> the raw argmax
        hyp = dec.greedy(annotations(seed=16))
        assert UNK not in hyp.ids

    def test_logprob_matches_replay(self):
        dec = make_decoder(seed=17)
        ann = annotations(seed=18)
        hyp = dec.greedy(ann)
        ctx = dec.context(T.Tensor(ann), ann.shape[0])
        h, c = dec.init_state(ctx)
        total = 0.0
        for prev, tok in zip(hyp.ids, hyp.ids[1:]):
            logits, h, c, _, _ = dec.step(np.array([prev]), h, c, ctx)
            total += float(dec._masked_log_softmax(logits.data[0])[tok])
        assert total == pytest.approx(hyp.logprob, abs=1e-5)

    def test_attention_recorded_per_token(self):
        dec = make_decoder(seed=19)
        hyp = dec.greedy(annotations(seed=20))
        assert len(hyp.attentions) == len(hyp.generated) == len(hyp.gates)
        for beta in hyp.attentions:
            assert abs(beta.sum() - 1.0) < 1e-6


class TestBeam:
    def test_width_one_equals_greedy(self):
        for seed in range(10):
            dec = make_decoder(seed=seed)
            ann = annotations(seed=100 + seed)
            greedy = dec.greedy(ann, max_len=6)
            top = dec.beam(ann, width=1, max_len=6)[0]
            assert top.ids == greedy.ids
            assert top.logprob == pytest.approx(greedy.logprob, abs=1e-9)

    def test_matches_exhaustive_enumeration(self):
        for seed in (0, 1, 2):
            cfg = DecoderConfig(vocab_size=6, annot_dim=10, embed_dim=6, hidden_dim=8,
                                attn_dim=5, max_len=3, beam_width=6 ** 3)
            dec = CaptionDecoder.random(cfg, seed=seed)
            ann = annotations(seed=200 + seed)
            want = exhaustive_decode(dec, ann, max_len=3)
            got = dec.beam(ann, width=6 ** 3, max_len=3)
            assert got[0].ids == want[0].ids
            assert got[0].logprob == pytest.approx(want[0].logprob, abs=1e-9)
            assert [h.ids for h in got[:5]] == [h.ids for h in want[:5]]

    def test_ranking_sorted_descending(self):
        dec = make_decoder(seed=21)
        ranked = dec.beam(annotations(seed=22), width=4, max_len=5)
        scores = [h.score(dec.cfg.length_norm) for h in ranked]
        assert scores == sorted(scores, reverse=True)
