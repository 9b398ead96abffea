"""Command-line surface: synth, tile, encode, train, generate, evaluate, explain.

Exit codes: 0 success, 2 usage/config error, 3 data error, 4 numeric failure.
All commands are deterministic for fixed inputs and seed. The env var
HISTOCAP_THREADS overrides --workers for tile/encode.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import synth as synthmod
from . import vocab as V
from .archive import load_archive, save_archive
from .config import RunConfig
from .decoder import CaptionDecoder
from .errors import ConfigError, DataError, HistocapError, NumericError, ShapeError
from .explain import explain_slide
from .fusion import AttentionFusion
from .metrics import PUBLISHED_FULL_SCALE
from .pipeline import CaptionModel, caption_tokens, evaluate_corpus
from .rasters import load_rgb
from .thumb import ThumbEncoder
from .tiler import (SlideRecord, TileConfig, read_manifest, resolve_path,
                    tile_slide, write_manifest)
from .trainer import model_from_checkpoint, train
from .vit import (HierarchicalEncoder, init_encoder_weights,
                  load_encoder_weights, save_encoder_weights)


def _workers(args) -> int:
    env = os.environ.get("HISTOCAP_THREADS")
    if env:
        return max(1, int(env))
    return max(1, args.workers)


def _map_over(items, fn, workers: int):
    if workers <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def _load_config(path: str | None) -> RunConfig:
    return RunConfig.load(path) if path else RunConfig()


def _load_features(features_dir: str | Path, records) -> dict[str, np.ndarray]:
    features = {}
    for rec in records:
        path = Path(features_dir) / f"{rec.slide_id}.hct"
        if not path.exists():
            raise DataError(f"missing encoded features for slide {rec.slide_id}: {path}")
        features[rec.slide_id] = load_archive(path)["patch_tokens"]
    return features


def _thumb_loader(manifest_path: str):
    def load(rec: SlideRecord) -> np.ndarray:
        return load_rgb(resolve_path(manifest_path, rec.thumbnail))
    return load


def _records_for(args, records):
    if getattr(args, "split", None) and args.split != "all":
        records = [r for r in records if r.split == args.split]
    usable = [r for r in records if r.usable]
    if not usable:
        raise DataError("no usable slides selected")
    return usable


# -- commands ----------------------------------------------------------------


def cmd_synth(args) -> int:
    spec = synthmod.SynthSpec() if args.spec is None else \
        synthmod.SynthSpec.from_dict(json.loads(Path(args.spec).read_text()))
    seeds = synthmod.generate(spec, args.out)
    if args.shuffle_captions:
        shuffled = synthmod.shuffle_captions(seeds, seed=spec.seed + 1)
        with open(Path(args.out) / "slides.jsonl", "w", encoding="utf-8") as fh:
            for s in shuffled:
                fh.write(json.dumps(s.to_dict(), sort_keys=True) + "\n")
    print(f"synth: wrote {len(seeds)} slides under {args.out}")
    return 0


def cmd_tile(args) -> int:
    slides_dir = Path(args.slides)
    cfg = TileConfig(patch_size=args.patch, thumb_size=args.thumb,
                     min_tissue=args.min_tissue)
    seeds_file = slides_dir / "slides.jsonl"
    if seeds_file.exists():
        seeds = synthmod.read_seeds(seeds_file)
        inputs = [(s.slide_id, synthmod.resolve_path(seeds_file, s.slide_path),
                   s.caption, s.split) for s in seeds]
    else:
        paths = sorted(list(slides_dir.glob("*.png")) + list(slides_dir.glob("*.ppm")))
        if not paths:
            raise DataError(f"no .png/.ppm slides under {slides_dir}")
        inputs = [(p.stem, p, "", "train") for p in paths]

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    def one(item) -> SlideRecord:
        slide_id, path, caption, split = item
        return tile_slide(slide_id, load_rgb(path), out, cfg,
                          caption=caption, split=split)

    records = _map_over(inputs, one, _workers(args))
    write_manifest(out / "manifest.jsonl", records)
    kept = sum(r.n_patches for r in records)
    print(f"tile: {len(records)} slides, {kept} patches -> {out / 'manifest.jsonl'}")
    return 0


def cmd_encode(args) -> int:
    cfg = _load_config(args.config)
    records = [r for r in read_manifest(args.manifest) if r.usable]
    if not records:
        raise DataError("manifest holds no usable slides")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    weights_path = Path(args.weights) if args.weights else out / "encoder_weights.hct"
    if args.weights or weights_path.exists():
        weights = load_encoder_weights(weights_path, cfg.encoder)
    else:
        # frozen weights derived deterministically from the run seed
        weights = init_encoder_weights(cfg.encoder, seed=cfg.seed)
        save_encoder_weights(weights_path, weights)
    encoder = HierarchicalEncoder(cfg.encoder, weights)
    patches_dir = Path(args.manifest).parent / "patches"

    def one(rec: SlideRecord) -> str:
        dest = out / f"{rec.slide_id}.hct"
        if dest.exists() and not args.force:
            return "skipped"
        tokens = encoder.encode_slide(rec, patches_dir)
        save_archive(dest, {"patch_tokens": tokens})
        return "encoded"

    results = _map_over(records, one, _workers(args))
    print(f"encode: {results.count('encoded')} encoded, "
          f"{results.count('skipped')} up to date -> {out}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    records = read_manifest(args.manifest)
    train_recs = [r for r in records if r.split == "train" and r.usable]
    val_recs = [r for r in records if r.split == "val" and r.usable]
    if not val_recs:
        val_recs = train_recs
    if not train_recs:
        raise DataError("no usable training slides in manifest")

    vb = V.build_vocabulary([r.caption for r in train_recs], min_count=cfg.min_count)
    vb.save(out / "vocab.txt")
    cfg.save(out / "config.json")

    model = CaptionModel(
        thumb=ThumbEncoder.random(cfg.thumb, seed=cfg.seed + 1),
        fusion=AttentionFusion.random(cfg.fusion, seed=cfg.seed + 2),
        decoder=CaptionDecoder.random(
            cfg.decoder.resolve(len(vb), cfg.annot_dim), seed=cfg.seed + 3),
    )
    features = _load_features(args.features, train_recs + val_recs)
    resume = out / "checkpoints" / "last.ckpt" if args.resume else None
    if resume is not None and not resume.exists():
        raise DataError(f"cannot resume: {resume} does not exist")
    result = train(model, train_recs, val_recs, features,
                   _thumb_loader(args.manifest), vb, cfg.train, out_dir=out,
                   config_hash=cfg.hash(), resume_from=resume,
                   max_decode_len=cfg.decoder.max_len)
    print(f"train: best val BLEU-4 {result.best_val_bleu4:.4f} "
          f"at epoch {result.best_epoch} -> {result.best_path}")
    return 0


def cmd_generate(args) -> int:
    model, vb, side = model_from_checkpoint(args.checkpoint)
    records = read_manifest(args.manifest)
    if args.slide != "all":
        records = [r for r in records if r.slide_id == args.slide]
        if not records:
            raise DataError(f"unknown slide id {args.slide}")
    records = [r for r in records if r.usable]
    features = _load_features(args.features, records)
    load_thumb = _thumb_loader(args.manifest)

    lines = []
    for rec in records:
        hyp, _ = model.generate(load_thumb(rec), features[rec.slide_id],
                                beam_width=args.beam, max_len=args.max_len)
        caption = " ".join(caption_tokens(hyp, vb))
        lines.append({"slide_id": rec.slide_id, "caption": caption,
                      "logprob": hyp.logprob})
    payload = "\n".join(json.dumps(line, sort_keys=True) for line in lines) + "\n"
    if args.out:
        Path(args.out).write_text(payload, encoding="utf-8")
    sys.stdout.write(payload)
    return 0


def cmd_evaluate(args) -> int:
    model, vb, side = model_from_checkpoint(args.checkpoint)
    records = _records_for(args, read_manifest(args.manifest))
    features = _load_features(args.features, records)
    report = evaluate_corpus(model, records, features, _thumb_loader(args.manifest),
                             vb, beam_width=args.beam, max_len=args.max_len)
    payload = report.to_dict()
    payload["split"] = args.split
    payload["config_hash"] = side.get("config_hash", "")
    payload["published_full_scale"] = PUBLISHED_FULL_SCALE
    if args.out:
        Path(args.out).write_text(json.dumps(payload, indent=2, sort_keys=True),
                                  encoding="utf-8")
    if args.csv:
        csv_path = Path(args.csv)
        row = (f"{args.split},{report.bleu1:.6f},{report.bleu2:.6f},"
               f"{report.bleu3:.6f},{report.bleu4:.6f},{report.rouge_l:.6f}\n")
        if not csv_path.exists():
            row = "split,bleu1,bleu2,bleu3,bleu4,rouge_l\n" + row
        with open(csv_path, "a", encoding="utf-8") as fh:
            fh.write(row)
    print(f"BLEU-1 {report.bleu1:.4f}  BLEU-2 {report.bleu2:.4f}  "
          f"BLEU-3 {report.bleu3:.4f}  BLEU-4 {report.bleu4:.4f}  "
          f"ROUGE_L {report.rouge_l:.4f}")
    return 0


def cmd_explain(args) -> int:
    model, vb, side = model_from_checkpoint(args.checkpoint)
    records = [r for r in read_manifest(args.manifest) if r.slide_id == args.slide]
    if not records:
        raise DataError(f"unknown slide id {args.slide}")
    rec = records[0]
    if not rec.usable:
        raise DataError(f"slide {args.slide} has no usable patches")
    features = _load_features(args.features, [rec])
    thumb = _thumb_loader(args.manifest)(rec)
    bundle = explain_slide(model, vb, rec, thumb, features[rec.slide_id],
                           args.out, topk=args.topk, beam_width=args.beam,
                           max_len=args.max_len,
                           config_hash=side.get("config_hash", ""))
    print(f"explain: '{bundle['caption']}' ({len(bundle['words'])} words, "
          f"top {len(bundle['top_patches'])} patches) -> {args.out}")
    return 0


# -- parser ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="histocap",
        description="Slide report generation: hierarchical encoding, attention "
                    "fusion, LSTM captioning.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic slide corpus")
    p.add_argument("--spec", default=None, help="JSON synth spec (default: built-in)")
    p.add_argument("--out", required=True)
    p.add_argument("--shuffle-captions", action="store_true",
                   help="emit the label-shuffled control corpus")
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("tile", help="thumbnails + tissue-filtered patch grid")
    p.add_argument("--slides", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--patch", type=int, default=4096)
    p.add_argument("--thumb", type=int, default=1024)
    p.add_argument("--min-tissue", type=float, default=0.5)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(fn=cmd_tile)

    p = sub.add_parser("encode", help="frozen hierarchical encoding of patches")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--weights", default=None,
                   help="encoder weight archive (default: derive from config seed)")
    p.add_argument("--config", default=None)
    p.add_argument("--force", action="store_true")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(fn=cmd_encode)

    p = sub.add_parser("train", help="train fusion + decoder (+ thumbnail encoder)")
    p.add_argument("--manifest", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--resume", action="store_true")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("generate", help="decode captions")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--slide", default="all")
    p.add_argument("--beam", type=int, default=3)
    p.add_argument("--max-len", type=int, default=60)
    p.add_argument("--out", default=None)
    p.set_defaults(fn=cmd_generate)

    p = sub.add_parser("evaluate", help="score a split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--beam", type=int, default=1)
    p.add_argument("--max-len", type=int, default=60)
    p.add_argument("--out", default=None)
    p.add_argument("--csv", default=None,
                   help="append one metrics row to this CSV for tabulation")
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("explain", help="attention explanation bundle for one slide")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--slide", required=True)
    p.add_argument("--topk", type=int, default=4)
    p.add_argument("--beam", type=int, default=1)
    p.add_argument("--max-len", type=int, default=60)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_explain)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.fn(args)
    except (ConfigError,) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (DataError, ShapeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4
    except HistocapError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
