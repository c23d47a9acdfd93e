"""Command line entry point: ``swincap {gen-corpus,train,caption,eval,flops}``.

Exit codes: 0 ok, 1 I/O or data problem, 2 configuration error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .checkpoint import CheckpointError
from .config import RunConfig
from .ops import ConfigError

EXIT_OK, EXIT_IO, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3

logger = logging.getLogger("swincap")


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _load_config(path) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        return RunConfig.from_file(path)
    except OSError as exc:
        raise CliError(f"cannot read config: {exc}", EXIT_IO) from exc


# -- commands -------------------------------------------------------------------


def cmd_gen_corpus(args) -> int:
    from ._validation import check_divisible
    from .corpus import caption_words, gen_corpus, load_manifest
    from .vocab import Vocabulary

    if args.count < 1:
        raise ConfigError("--count must be at least 1")
    check_divisible(args.size, args.patch)
    manifest = gen_corpus(args.out, seed=args.seed, count=args.count, image_size=args.size,
                          frames=args.frames or None)
    captions = [s.caption for s in load_manifest(manifest)]
    vocab = Vocabulary.build(captions)
    print(f"manifest: {manifest}")
    print(f"samples: {args.count}  vocab size: {len(vocab)} (template closure {len(caption_words())} words)")
    return EXIT_OK


def _dataset(path):
    from .corpus import load_manifest, stack_images

    try:
        samples = load_manifest(path)
    except (OSError, ValueError, json.JSONDecodeError) as exc:
        raise CliError(f"cannot read dataset {path}: {exc}", EXIT_IO) from exc
    if not samples:
        raise CliError(f"dataset {path} is empty", EXIT_IO)
    return stack_images(samples), [s.caption for s in samples]


def cmd_train(args) -> int:
    from .train import DivergenceError, train

    cfg = _load_config(args.config)
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    for key in ("epochs", "max_steps"):
        if getattr(args, key) is not None:
            overrides[key] = getattr(args, key)
    data = args.data or cfg.data
    out = args.out or cfg.out
    if not data or not out:
        raise ConfigError("both --data and --out (or data=/out= in the config) are required")
    images, captions = _dataset(data)
    overrides["image_size"] = images.shape[-1]
    if images.ndim == 5:
        if cfg.model != "video-swinmlp":
            raise ConfigError(f"dataset holds clips but model={cfg.model}")
        overrides["frames"] = images.shape[2]
    elif cfg.model == "video-swinmlp":
        raise ConfigError("model=video-swinmlp needs a clip dataset (generate with --frames)")
    cfg = cfg.replace(data=str(data), out=str(out), **overrides)
    cfg.encoder_config().validate()
    print(f"training {cfg.model}: batch={cfg.batch} lr={cfg.lr:g} warmup={cfg.warmup} "
          f"epochs={cfg.epochs} seed={cfg.seed} samples={len(captions)}")
    resume = None
    if args.resume:
        resume = Path(out) / "last.ckpt"
        if not resume.exists():
            raise CliError(f"nothing to resume: {resume} not found", EXIT_IO)
    try:
        result = train(cfg, images, captions, out_dir=out, resume=resume)
    except DivergenceError as exc:
        raise CliError(f"training diverged: {exc}", EXIT_NUMERIC) from exc
    last = result.log[-1] if result.log else None
    if last:
        print(f"done: step {last[0]} epoch {last[1]} loss {last[3]:.4f}; checkpoints in {out}")
    else:
        print(f"nothing to do: checkpoint already at epoch {result.epochs_done}")
    return EXIT_OK


def _load_model(path):
    from .train import load_checkpoint

    try:
        model, vocab, cfg, _, _ = load_checkpoint(path)
    except OSError as exc:
        raise CliError(f"cannot read checkpoint: {exc}", EXIT_IO) from exc
    except CheckpointError as exc:
        raise CliError(str(exc), EXIT_IO) from exc
    return model, vocab, cfg


def cmd_caption(args) -> int:
    from .corpus import read_image, to_array

    model, vocab, cfg = _load_model(args.checkpoint)
    try:
        pixels = read_image(args.image)
    except (OSError, ValueError) as exc:
        raise CliError(f"cannot read image: {exc}", EXIT_IO) from exc
    x = to_array(pixels, cfg.frames if cfg.video else None)[None]
    ids = model.generate(x)[0]
    print(vocab.decode(ids))
    return EXIT_OK


def _print_metrics(scores: dict, as_csv: bool, count: int) -> None:
    if as_csv:
        print("metric,value")
        for k, v in scores.items():
            print(f"{k},{v:.6f}")
    else:
        print(f"| metric | value |  ({count} records)")
        print("|---|---|")
        for k, v in scores.items():
            print(f"| {k} | {v:.4f} |")


def cmd_eval(args) -> int:
    from .metrics import EvalRecord, bleu4, cider

    if args.pairs:
        try:
            with open(args.pairs, encoding="utf-8") as fh:
                recs = [json.loads(line) for line in fh if line.strip()]
            records = [EvalRecord(r["candidate"], r["references"]) for r in recs]
        except (OSError, ValueError, KeyError) as exc:
            raise CliError(f"cannot read pairs file: {exc}", EXIT_IO) from exc
    else:
        if not args.checkpoint or not args.data:
            raise ConfigError("eval needs --pairs, or both --checkpoint and --data")
        model, vocab, cfg = _load_model(args.checkpoint)
        images, captions = _dataset(args.data)
        records = []
        for i in range(0, len(images), 32):
            for ids, ref in zip(model.generate(images[i: i + 32]), captions[i: i + 32]):
                records.append(EvalRecord(vocab.decode(ids), [ref]))
    if not records:
        raise CliError("no records to evaluate", EXIT_IO)
    scores = {"BLEU-4": bleu4(records), "CIDEr": cider(records) if len(records) > 1 else float("nan")}
    _print_metrics(scores, args.csv, len(records))
    return EXIT_OK


def cmd_flops(args) -> int:
    from .complexity import model_report, to_csv, to_markdown

    cfg = _load_config(args.config)
    cfg.encoder_config().validate()
    kinds = ["swin", "swinmlp"] if args.compare else [cfg.model]
    reports = [
        model_report(cfg.replace(model=k), vocab_size=args.vocab_size, include_decoder=not args.encoder_only,
                     measure_forward=not args.no_measure, elementwise=args.elementwise)
        for k in kinds
    ]
    print(to_csv(reports, per_module=args.per_module) if args.csv
          else to_markdown(reports, per_module=args.per_module), end="")
    return EXIT_OK


# -- parser --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="swincap", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-corpus", help="render the synthetic shapes corpus")
    p.add_argument("--seed", type=int, default=0, help="corpus seed")
    p.add_argument("--count", type=int, required=True, help="number of samples")
    p.add_argument("--size", type=int, default=64, help="image side in pixels")
    p.add_argument("--patch", type=int, default=4, help="patch size the corpus must support")
    p.add_argument("--frames", type=int, default=0, help="frames per clip (0 = still images)")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_gen_corpus)

    p = sub.add_parser("train", help="train a captioner")
    p.add_argument("--config", help="key=value run config (defaults: paper settings)")
    p.add_argument("--data", help="manifest file or corpus directory")
    p.add_argument("--out", help="directory for checkpoints and train_log.csv")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--epochs", type=int, help="override the config epoch count")
    p.add_argument("--max-steps", dest="max_steps", type=int, help="stop after this many steps")
    p.add_argument("--resume", action="store_true", help="continue from OUT/last.ckpt")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("caption", help="caption one image file")
    p.add_argument("--checkpoint", required=True, help="checkpoint file")
    p.add_argument("--image", required=True, help="IMG1 image file")
    p.set_defaults(func=cmd_caption)

    p = sub.add_parser("eval", help="BLEU-4 and CIDEr of a checkpoint or of candidate/reference pairs")
    p.add_argument("--checkpoint", help="checkpoint file")
    p.add_argument("--data", help="manifest file or corpus directory")
    p.add_argument("--pairs", help='JSON-lines of {"candidate": str, "references": [str]}')
    p.add_argument("--csv", action="store_true", help="print metric,value CSV")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("flops", help="parameter and MAC report")
    p.add_argument("--config", help="key=value run config")
    p.add_argument("--compare", action="store_true", help="report swin and swinmlp side by side")
    p.add_argument("--csv", action="store_true", help="CSV instead of Markdown")
    p.add_argument("--per-module", dest="per_module", action="store_true", help="one row per module")
    p.add_argument("--encoder-only", dest="encoder_only", action="store_true", help="skip the decoder")
    p.add_argument("--vocab-size", dest="vocab_size", type=int, default=64, help="decoder vocabulary size")
    p.add_argument("--no-measure", dest="no_measure", action="store_true",
                   help="analytic counts only (skip the instrumented forward)")
    p.add_argument("--elementwise", action="store_true", help="also count LayerNorm/softmax/GELU")
    p.set_defaults(func=cmd_flops)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except FloatingPointError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
