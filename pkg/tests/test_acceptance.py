"""Acceptance criteria, one test per criterion, each printing a PASS/FAIL line
(see conftest). Training-based criteria run the desk-scale profile on the
synthetic corpus; full-scale published numbers are documentation only.
"""

import json
import time
from itertools import combinations
from pathlib import Path

import numpy as np
import pytest

from histocap import tensor as T
from histocap import vocab as V
from histocap.archive import load_archive, save_archive
from histocap.cli import main
from histocap.config import RunConfig
from histocap.decoder import CaptionDecoder, DecoderConfig
from histocap.fusion import AttentionFusion, FusionConfig, top_k_patches
from histocap.metrics import PUBLISHED_FULL_SCALE, bleu, lcs_length, rouge_l
from histocap.pipeline import CaptionModel, evaluate_corpus
from histocap.rasters import load_rgb
from histocap.synth import SynthSpec, generate, shuffle_captions
from histocap.thumb import ThumbConfig, ThumbEncoder
from histocap.tiler import tile_slide, write_manifest
from histocap.trainer import PlateauTracker, TrainConfig, train
from histocap.vit import EncoderConfig, HierarchicalEncoder, init_encoder_weights

DESK_SEED = 13


# -- shared artifacts ---------------------------------------------------------


def build_corpus(root: Path, spec: SynthSpec, cfg: RunConfig, encoder_seed: int):
    """synth -> tile -> encode, returning records/features/thumbs and paths."""
    seeds = generate(spec, root / "corpus")
    records = []
    for s in seeds:
        rec = tile_slide(s.slide_id, load_rgb(root / "corpus" / s.slide_path),
                         root / "tiled", cfg.tile, caption=s.caption, split=s.split)
        records.append(rec)
    write_manifest(root / "tiled" / "manifest.jsonl", records)
    weights = init_encoder_weights(cfg.encoder, seed=encoder_seed)
    weights_path = root / "features" / "encoder_weights.hct"
    weights_path.parent.mkdir(parents=True, exist_ok=True)
    save_archive(weights_path, weights)
    enc = HierarchicalEncoder(cfg.encoder, weights)
    features = {}
    for rec in records:
        features[rec.slide_id] = enc.encode_slide(rec, root / "tiled" / "patches")
        save_archive(root / "features" / f"{rec.slide_id}.hct",
                     {"patch_tokens": features[rec.slide_id]})
    thumbs = {rec.slide_id: load_rgb(root / "tiled" / rec.thumbnail) for rec in records}
    return records, features, thumbs, weights_path


def desk_model(cfg: RunConfig, vocab_size: int, seed: int) -> CaptionModel:
    return CaptionModel(
        thumb=ThumbEncoder.random(cfg.thumb, seed=seed + 1),
        fusion=AttentionFusion.random(cfg.fusion, seed=seed + 2),
        decoder=CaptionDecoder.random(cfg.decoder.resolve(vocab_size, cfg.annot_dim),
                                      seed=seed + 3))


@pytest.fixture(scope="module")
def overfit_run(tmp_path_factory):
    """16-pair corpus trained to convergence; reused by several criteria."""
    root = tmp_path_factory.mktemp("overfit")
    cfg = RunConfig.desk(seed=DESK_SEED)
    spec = SynthSpec(seed=DESK_SEED, n_slides=16, slide_size=128, patch_size=64)
    t0 = time.monotonic()
    records, features, thumbs, weights_path = build_corpus(root, spec, cfg, DESK_SEED)
    vb = V.build_vocabulary([r.caption for r in records])
    model = desk_model(cfg, len(vb), seed=DESK_SEED)
    tc = TrainConfig(batch_size=16, encoder_lr=1e-3, decoder_lr=4e-3, seed=DESK_SEED,
                     max_epochs=500, early_stop_patience=500, plateau_patience=50,
                     lambda_att=1.0, target_val_bleu4=0.995)
    result = train(model, records, records, features,
                   lambda r: thumbs[r.slide_id], vb, tc, out_dir=root / "run",
                   config_hash=cfg.hash(), max_decode_len=16)
    elapsed = time.monotonic() - t0
    return {"root": root, "cfg": cfg, "records": records, "features": features,
            "thumbs": thumbs, "vocab": vb, "model": model, "result": result,
            "elapsed": elapsed, "weights_path": weights_path}


# -- criteria -----------------------------------------------------------------


def test_published_scale_not_reproduced_here():
    """Full-scale published metrics recorded; desk scale substitutes properties"""
    assert PUBLISHED_FULL_SCALE == {"bleu1": 0.4116, "bleu2": 0.3037,
                                    "bleu3": 0.2147, "bleu4": 0.1470,
                                    "rouge_l": 0.4480}
    print("note: the published test-set scores above require the external "
          "slide corpus and released pre-trained transformer weights; they are "
          "not reproducible at desk scale, so the property-based criteria "
          "below stand in.")


def test_gradient_suite_all_parameter_groups():
    """Gradient suite: every trainable group matches finite differences < 1e-4"""
    t0 = time.monotonic()
    thumb_cfg = ThumbConfig(input_size=8, channels=(4, 6), strides=(2, 2))
    fusion_cfg = FusionConfig(token_dim=12, attn_dim=5, proj_dim=6)
    dec_cfg = DecoderConfig(vocab_size=9, annot_dim=12, embed_dim=6, hidden_dim=8,
                            attn_dim=5, lambda_att=0.7)
    model = CaptionModel(thumb=ThumbEncoder.random(thumb_cfg, 1),
                         fusion=AttentionFusion.random(fusion_cfg, 2),
                         decoder=CaptionDecoder.random(dec_cfg, 3))
    rng = np.random.default_rng(4)
    thumbs = rng.integers(0, 256, (2, 8, 8, 3)).astype(np.uint8)
    tokens = rng.uniform(-1, 1, (2 * 3, 12)).astype(np.float32)
    mask = np.ones((2, 3), dtype=bool)
    gold = np.array([[V.START, 4, 5, V.END, V.PAD],
                     [V.START, 6, 7, 8, V.END]])
    lengths = np.array([4, 5])
    params = model.parameters()
    failures = {}
    for name, param in params.items():
        holder = _find_holder(model, name)

        def f(p, holder=holder, name=name):
            d, key = holder
            saved = d[key]
            d[key] = p
            try:
                annotations, _, _ = model.batch_annotations(
                    thumbs, T.Tensor(tokens), mask)
                loss, _ = model.decoder.teacher_loss(
                    annotations, model.grid_count, gold, lengths)
                return loss
            finally:
                d[key] = saved

        # relu-bearing paths use a narrower step so the central difference
        # cannot straddle a kink; smooth groups use the default
        h = 1e-4 if name.startswith(("thumb.", "fusion.")) else 1e-3
        err = T.check_gradients(f, param, h=h)
        if err >= 1e-4:
            failures[name] = err
    elapsed = time.monotonic() - t0
    assert not failures, failures
    assert elapsed < 120.0, f"gradient suite took {elapsed:.1f}s"


def _find_holder(model: CaptionModel, name: str):
    prefix, key = name.split(".", 1)
    module = {"thumb": model.thumb, "fusion": model.fusion,
              "decoder": model.decoder}[prefix]
    return module.params, key


def test_shape_suite_exact_paper_dimensions():
    """Shape suite: 384/192/576 summaries, MxD tokens, 512 thumb, 1024 fused"""
    enc_cfg = EncoderConfig.desk()
    enc = HierarchicalEncoder(enc_cfg, init_encoder_weights(enc_cfg, seed=0))
    rng = np.random.default_rng(0)
    patch = rng.integers(0, 256, (64, 64, 3)).astype(np.uint8)

    region_tokens = enc._patch_to_region_tokens(patch)
    region_summary = enc.region_net.forward(region_tokens[0])
    assert region_summary.shape == (1, 384)
    region_cls = enc.region_net.forward_batch(region_tokens)
    patch_summary = enc.patch_net.forward(region_cls)
    assert patch_summary.shape == (1, 192)
    token = enc.encode_patch(patch)
    assert token.shape == (576,)

    from histocap.tiler import PatchEntry, SlideRecord
    from histocap.rasters import save_rgb
    import tempfile
    with tempfile.TemporaryDirectory() as td:
        for x in (0, 64):
            save_rgb(Path(td) / f"s_{x}_0.png",
                     rng.integers(0, 256, (64, 64, 3)).astype(np.uint8))
        rec = SlideRecord("s", "t.png", [PatchEntry(0, 0, 1.0), PatchEntry(64, 0, 1.0)],
                          "c", "train")
        tokens = enc.encode_slide(rec, td)
    assert tokens.shape == (2, 576)

    thumb = ThumbEncoder.random(ThumbConfig.desk(), seed=1)
    grid, thumb_vec = thumb.forward(rng.integers(0, 256, (64, 64, 3)).astype(np.uint8))
    assert thumb_vec.shape == (1, 512)
    assert grid.shape == (64, 512)

    fusion = AttentionFusion.random(FusionConfig(), seed=2)
    summary = fusion.pool(T.Tensor(tokens))
    assert summary.pooled.shape == (1, 576)
    assert summary.projected.shape == (1, 512)

    from histocap.fusion import fuse
    annotations, fused_global = fuse(grid, thumb_vec, summary, 64)
    assert fused_global.shape == (1, 1024)
    assert annotations.shape == (64, 1024)


def test_freezing_suite(overfit_run):
    """Freezing: patch-encoder archive bit-stable over training; thumb weights move"""
    env = overfit_run
    cfg = env["cfg"]
    before = env["weights_path"].read_bytes()
    vb = env["vocab"]
    model = desk_model(cfg, len(vb), seed=99)
    init_thumb = {k: p.data.copy() for k, p in model.thumb.parameters().items()}

    tc = TrainConfig(batch_size=16, encoder_lr=1e-3, decoder_lr=4e-3,
                     seed=7, max_epochs=5, early_stop_patience=500,
                     plateau_patience=500)
    train(model, env["records"], env["records"], env["features"],
          lambda r: env["thumbs"][r.slide_id], vb, tc, max_decode_len=16)

    # frozen weights: file untouched, reload bit-identical
    after = env["weights_path"].read_bytes()
    assert after == before
    reloaded = load_archive(env["weights_path"])
    original = init_encoder_weights(cfg.encoder, seed=DESK_SEED)
    assert set(reloaded) == set(original)
    for k in original:
        assert reloaded[k].tobytes() == original[k].tobytes(), k
    # fine-tuned thumbnail encoder moved
    moved = any((model.thumb.parameters()[k].data != init_thumb[k]).any()
                for k in init_thumb)
    assert moved


def test_overfit_16_pairs(overfit_run):
    """Overfit: 16 pairs reach training BLEU-4 >= 0.99 within 500 epochs, < 10 min"""
    env = overfit_run
    assert len(env["records"]) == 16
    assert len(env["result"].logs) <= 500
    report = evaluate_corpus(env["model"], env["records"], env["features"],
                             lambda r: env["thumbs"][r.slide_id], env["vocab"],
                             beam_width=1, max_len=16)
    assert report.bleu4 >= 0.99, report.bleu4
    assert env["elapsed"] < 600.0, f"{env['elapsed']:.0f}s"


def test_generalization_sanity(tmp_path_factory):
    """Generalization: 200 slides, test BLEU-4 >= 0.5 and >= 3x shuffled control"""
    root = tmp_path_factory.mktemp("gen")
    cfg = RunConfig.desk(seed=31)
    spec = SynthSpec(seed=31, n_slides=200, slide_size=128, patch_size=64)
    seeds = generate(spec, root / "corpus")

    def tiled_records(seed_list, write):
        records = []
        for s in seed_list:
            records.append(tile_slide(
                s.slide_id, load_rgb(root / "corpus" / s.slide_path), root / "tiled",
                cfg.tile, caption=s.caption, split=s.split, write_patches=write))
        return records

    records = tiled_records(seeds, write=True)
    enc = HierarchicalEncoder(cfg.encoder, init_encoder_weights(cfg.encoder, seed=31))
    features = {r.slide_id: enc.encode_slide(r, root / "tiled" / "patches")
                for r in records}
    thumbs = {r.slide_id: load_rgb(root / "tiled" / r.thumbnail) for r in records}

    def run(recs):
        tr = [r for r in recs if r.split == "train"]
        va = [r for r in recs if r.split == "val"]
        te = [r for r in recs if r.split == "test"]
        assert len(tr) == 160 and len(va) == 20 and len(te) == 20
        vb = V.build_vocabulary([r.caption for r in tr])
        model = desk_model(cfg, len(vb), seed=31)
        tc = TrainConfig(batch_size=32, encoder_lr=1e-3, decoder_lr=4e-3, seed=31,
                         max_epochs=120, early_stop_patience=20, plateau_patience=8,
                         lambda_att=1.0, target_val_bleu4=0.999)
        train(model, tr, va, features, lambda r: thumbs[r.slide_id], vb, tc,
              max_decode_len=16)
        report = evaluate_corpus(model, te, features, lambda r: thumbs[r.slide_id],
                                 vb, beam_width=1, max_len=16)
        return report.bleu4

    informative = run(records)
    control = run(tiled_records(shuffle_captions(seeds, seed=32), write=False))
    assert informative >= 0.5, informative
    assert informative >= 3.0 * control, (informative, control)


def test_metric_oracles():
    """Metric oracles: clipped p1=2/7, identity 1.0, LCS example, DP=brute force"""
    cand = "the the the the the the the".split()
    ref = "the cat is on the mat".split()
    assert bleu([cand], [ref], max_n=1)[0] == pytest.approx(2 / 7)

    toks = "slide shows mostly pink tissue".split()
    assert bleu([toks], [toks]) == [1.0, 1.0, 1.0, 1.0]

    assert rouge_l("a c e".split(), "a b c d e".split()) == \
        pytest.approx(0.717647, abs=1e-4)

    def brute(a, b):
        for k in range(min(len(a), len(b)), 0, -1):
            for idxs in combinations(range(len(a)), k):
                sub = [a[i] for i in idxs]
                it = iter(b)
                if all(tok in it for tok in sub):
                    return k
        return 0

    rng = np.random.default_rng(5)
    for _ in range(120):
        a = list(rng.integers(0, 4, size=rng.integers(0, 9)))
        b = list(rng.integers(0, 4, size=rng.integers(0, 9)))
        assert lcs_length(a, b) == brute(a, b)


def test_scheduler_and_early_stop_events():
    """Scheduler: decay by 0.8 exactly after 8 flat epochs, stop after 20"""
    tracker = PlateauTracker(plateau_patience=8, stop_patience=20)
    lr_enc, lr_dec = 1e-4, 4e-4
    decay = TrainConfig().lr_decay
    assert decay == 0.8
    history = []
    stopped_at = None
    values = [0.5] + [0.4] * 30  # best at epoch 1, never improves again
    for epoch, val in enumerate(values, start=1):
        event = tracker.update(epoch, val)
        if event == "decay":
            lr_enc *= decay
            lr_dec *= decay
        history.append((epoch, event, lr_enc, lr_dec))
        if event == "stop":
            stopped_at = epoch
            break
    decay_epochs = [e for e, ev, *_ in history if ev == "decay"]
    assert decay_epochs == [9, 17]          # exactly 8 and 16 epochs after best
    assert stopped_at == 21                 # exactly 20 epochs after best
    after_first = [h for h in history if h[0] == 9][0]
    assert after_first[2] == 1e-4 * 0.8 and after_first[3] == 4e-4 * 0.8
    after_second = [h for h in history if h[0] == 17][0]
    assert after_second[2] == 1e-4 * 0.8 * 0.8
    # one decay only within the first plateau
    assert all(ev != "decay" for e, ev, *_ in history if e < 9)


def test_decoding_suite():
    """Decoding: beam width 1 equals greedy on 50 models; beam = exhaustive search"""
    for seed in range(50):
        rng = np.random.default_rng(seed)
        cfg = DecoderConfig(vocab_size=int(rng.integers(6, 10)), annot_dim=8,
                            embed_dim=5, hidden_dim=6, attn_dim=4)
        dec = CaptionDecoder.random(cfg, seed=seed)
        ann = rng.uniform(-1, 1, (3, 8)).astype(np.float32)
        greedy = dec.greedy(ann, max_len=6)
        top = dec.beam(ann, width=1, max_len=6)[0]
        assert top.ids == greedy.ids, seed
        assert top.logprob == pytest.approx(greedy.logprob, abs=1e-9)

    from test_decoder import exhaustive_decode
    for vocab_size, max_len in ((5, 2), (5, 3), (6, 3)):
        for seed in (0, 1):
            cfg = DecoderConfig(vocab_size=vocab_size, annot_dim=8, embed_dim=5,
                                hidden_dim=6, attn_dim=4)
            dec = CaptionDecoder.random(cfg, seed=seed)
            ann = np.random.default_rng(300 + seed).uniform(-1, 1, (3, 8)) \
                .astype(np.float32)
            want = exhaustive_decode(dec, ann, max_len=max_len)
            got = dec.beam(ann, width=vocab_size ** max_len, max_len=max_len)
            assert got[0].ids == want[0].ids
            assert got[0].logprob == pytest.approx(want[0].logprob, abs=1e-9)


def test_full_pipeline_determinism(tmp_path_factory):
    """Determinism: synth->tile->encode->train->generate->evaluate twice, same bytes"""
    outputs = []
    for tag in ("a", "b"):
        root = tmp_path_factory.mktemp(f"det_{tag}")
        cfg = RunConfig.desk(seed=13, max_epochs=3, batch_size=8)
        spec = SynthSpec(seed=13, n_slides=16, slide_size=128, patch_size=64)
        (root / "spec.json").write_text(json.dumps(spec.to_dict()))
        (root / "config.json").write_text(json.dumps(cfg.to_dict()))
        assert main(["synth", "--spec", str(root / "spec.json"),
                     "--out", str(root / "corpus")]) == 0
        assert main(["tile", "--slides", str(root / "corpus"),
                     "--out", str(root / "tiled"), "--patch", "64",
                     "--thumb", "64"]) == 0
        assert main(["encode", "--manifest", str(root / "tiled" / "manifest.jsonl"),
                     "--out", str(root / "features"),
                     "--config", str(root / "config.json")]) == 0
        assert main(["train", "--manifest", str(root / "tiled" / "manifest.jsonl"),
                     "--features", str(root / "features"),
                     "--config", str(root / "config.json"),
                     "--out", str(root / "run")]) == 0
        assert main(["generate", "--checkpoint",
                     str(root / "run" / "checkpoints" / "best.ckpt"),
                     "--manifest", str(root / "tiled" / "manifest.jsonl"),
                     "--features", str(root / "features"),
                     "--out", str(root / "captions.jsonl")]) == 0
        assert main(["evaluate", "--checkpoint",
                     str(root / "run" / "checkpoints" / "best.ckpt"),
                     "--manifest", str(root / "tiled" / "manifest.jsonl"),
                     "--features", str(root / "features"), "--split", "test",
                     "--out", str(root / "report.json")]) == 0
        outputs.append({
            "report": (root / "report.json").read_bytes(),
            "captions": (root / "captions.jsonl").read_bytes(),
            "logs": (root / "run" / "logs.jsonl").read_bytes(),
            "manifest": (root / "tiled" / "manifest.jsonl").read_bytes(),
        })
    for key in outputs[0]:
        assert outputs[0][key] == outputs[1][key], f"{key} differs between runs"


def test_explanation_suite(overfit_run):
    """Explanation: per-word maps sum to 1, top-k matches sort, counts align"""
    env = overfit_run
    root = env["root"]
    checkpoint = root / "run" / "checkpoints" / "best.ckpt"
    sid = env["records"][0].slide_id
    out_dir = root / "explain"
    assert main(["explain", "--checkpoint", str(checkpoint),
                 "--manifest", str(root / "tiled" / "manifest.jsonl"),
                 "--features", str(root / "features"), "--slide", sid,
                 "--topk", "3", "--out", str(out_dir)]) == 0
    bundle = json.loads((out_dir / "explanation.json").read_text())

    caption_tokens = bundle["caption"].split()
    assert len(bundle["words"]) == len(caption_tokens)
    for word, tok in zip(bundle["words"], caption_tokens):
        assert word["token"] == tok
        assert abs(word["beta_sum"] - 1.0) <= 1e-5
        assert (out_dir / word["heatmap"]).exists()
        assert (out_dir / word["overlay"]).exists()

    alpha = np.array(bundle["alpha"])
    want = top_k_patches(alpha, 3)
    got = [(t["index"], t["alpha"]) for t in bundle["top_patches"]]
    assert [i for i, _ in got] == [i for i, _ in want]
    oracle = sorted(range(len(alpha)), key=lambda i: (-alpha[i], i))[:3]
    assert [i for i, _ in got] == oracle
    # the generated caption matches this overfit slide's reference
    assert bundle["caption"] == env["records"][0].caption
