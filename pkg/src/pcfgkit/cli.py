"""Command-line interface.

Exit codes: 0 success, 1 data/runtime error, 2 configuration error. The
PCFGKIT_OUTPUT_DIR environment variable supplies a default directory for
report files when --out/--out-prefix is omitted.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from . import pipeline
from .errors import ConfigError, PcfgkitError
from .lexicon import build_vocabulary


def _default_out(value, name):
    if value is not None:
        return value
    env_dir = os.environ.get(pipeline.OUTPUT_DIR_ENV)
    if env_dir:
        os.makedirs(env_dir, exist_ok=True)
        return os.path.join(env_dir, name)
    return None


def _add_config_args(p):
    p.add_argument("--config", required=True, help="JSON experiment config")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config field")


def build_parser():
    parser = argparse.ArgumentParser(prog="pcfgkit",
                                     description="Grammar induction toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build-vocab", help="rank words and write a vocabulary file")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--size-cap", type=int, default=10000)
    p.add_argument("--lowercase", action="store_true")

    p = sub.add_parser("train", help="train a model per the config")
    _add_config_args(p)
    p.add_argument("--resume-from", default=None)
    p.add_argument("--verbose", action="store_true")

    p = sub.add_parser("parse", help="decode a corpus with a trained checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--strategy", default=None,
                   choices=["Direct", "Random", "Unknown", "Standard"])
    p.add_argument("--embeddings", default=None)
    p.add_argument("--target-vocab-corpus", default=None)
    p.add_argument("--decoder", default=None, choices=["mbr", "viterbi"])

    p = sub.add_parser("evaluate", help="score predictions against gold trees")
    p.add_argument("--predictions", required=True)
    p.add_argument("--gold", required=True)
    p.add_argument("--vocab", default=None)
    p.add_argument("--out-prefix", default=None)

    p = sub.add_parser("analyze-overlap", help="type/instance overlap rates")
    p.add_argument("--train", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--vocab", default=None)
    p.add_argument("--out", default=None)

    p = sub.add_parser("analyze-errors", help="success-to-failure buckets")
    p.add_argument("--predictions", required=True)
    p.add_argument("--gold", required=True)
    p.add_argument("--vocab", default=None)
    p.add_argument("--bucket-width", type=int, default=3)
    p.add_argument("--out", default=None)

    p = sub.add_parser("significance-test", help="controlled-randomness protocol")
    _add_config_args(p)
    p.add_argument("--conditions", default="RM,V-RM")
    p.add_argument("--num-seeds", type=int, default=5)
    p.add_argument("--out-prefix", default=None)

    p = sub.add_parser("sample-corpus", help="synthetic corpus from a seeded grammar")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--num-train", type=int, default=2000)
    p.add_argument("--num-dev", type=int, default=0)
    p.add_argument("--num-test", type=int, default=500)
    p.add_argument("--max-length", type=int, default=10)
    p.add_argument("--num-nonterminals", type=int, default=3)
    p.add_argument("--num-preterminals", type=int, default=4)
    p.add_argument("--vocab-size", type=int, default=20)
    p.add_argument("--grammar-seed", type=int, default=12345)
    p.add_argument("--concentration", type=float, default=2.0)
    p.add_argument("--image-noise", type=float, default=0.0)
    return parser


def run(args) -> int:
    if args.command == "build-vocab":
        sents, _ids = pipeline._read_any_corpus(args.corpus)
        vocab = build_vocabulary(sents, args.size_cap, lowercase=args.lowercase)
        vocab.save(args.out)
        print(f"wrote {len(vocab)} entries to {args.out}")
    elif args.command == "train":
        config = pipeline.load_config(args.config, args.set)
        result = pipeline.run_train(config, resume_from=args.resume_from,
                                    quiet=not args.verbose)
        print(f"checkpoint: {result.checkpoint_path}")
        if result.loss_lines:
            print(f"final: {result.loss_lines[-1]}")
    elif args.command == "parse":
        out = pipeline.run_parse(args.checkpoint, args.corpus, args.out,
                                 strategy=args.strategy, embeddings_path=args.embeddings,
                                 target_vocab_corpus=args.target_vocab_corpus,
                                 decoder=args.decoder)
        print(f"predictions: {out}")
    elif args.command == "evaluate":
        report, _records = pipeline.run_evaluate(args.predictions, args.gold,
                                                 vocab_path=args.vocab,
                                                 out_prefix=_default_out(args.out_prefix,
                                                                         "eval"))
        print(json.dumps({"corpus_f1": report.corpus_f1,
                          "sentence_f1": report.sentence_f1}))
    elif args.command == "analyze-overlap":
        report = pipeline.run_analyze_overlap(args.train, args.test,
                                              vocab_path=args.vocab,
                                              out_path=_default_out(args.out, "overlap.csv"))
        for factor, (t, i) in report.rates.items():
            print(f"{factor}\ttype={t:.4f}\tinstance={i:.4f}")
    elif args.command == "analyze-errors":
        table = pipeline.run_analyze_errors(args.predictions, args.gold, args.vocab,
                                            args.bucket_width,
                                            out_path=_default_out(args.out, "buckets.csv"))
        print(f"{len(table.rows)} bucket rows (width {table.bucket_width})")
    elif args.command == "significance-test":
        config = pipeline.load_config(args.config, args.set)
        conditions = [c.strip() for c in args.conditions.split(",") if c.strip()]
        _table, tests = pipeline.run_significance(config, conditions, args.num_seeds,
                                                  out_prefix=_default_out(args.out_prefix,
                                                                          "significance"))
        print(json.dumps(tests, indent=2, sort_keys=True))
    elif args.command == "sample-corpus":
        paths, _table = pipeline.generate_synthetic_corpus(
            args.out_dir, args.num_train, args.num_test, num_dev=args.num_dev,
            max_length=args.max_length,
            num_nonterminals=args.num_nonterminals, num_preterminals=args.num_preterminals,
            vocab_size=args.vocab_size, grammar_seed=args.grammar_seed,
            concentration=args.concentration, image_noise=args.image_noise,
        )
        for key, value in paths.items():
            print(f"{key}: {value}")
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return run(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except PcfgkitError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
