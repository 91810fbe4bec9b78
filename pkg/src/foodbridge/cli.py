"""Command-line entry point: ``foodbridge {synth,train,eval-i2t,eval-t2i,generate}``.

Exit codes: 0 success, 1 usage error, 2 runtime or numeric error.
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import data, evaluation, training
from .backbones import VocabError
from .config import Config, load_config
from .numerics import DimensionError, NumericError

USAGE_ERROR = 1
RUNTIME_ERROR = 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(USAGE_ERROR, f"{self.prog}: error: {message}\n")


def corpus_file(path) -> Path:
    path = Path(path)
    return path / "corpus.jsonl" if path.is_dir() else path


def cmd_synth(args) -> None:
    if args.n < 1:
        raise UsageError("n must be ≥ 1")
    records = data.synth_corpus(args.seed, args.n, args.out)
    print(f"wrote {len(records)} records to {Path(args.out) / 'corpus.jsonl'}")


def cmd_train(args) -> None:
    cfg = load_config(args.config) if args.config else Config()
    if args.steps is not None:
        cfg = cfg.with_(steps=args.steps)
    state = training.run(cfg, corpus_file(args.data), args.out, resume=args.resume, log=training.json_logger())
    print(f"wrote checkpoint at step {state.step} to {args.out}")


def _eval(args, fn) -> None:
    bb, state = training.load(args.ckpt)
    records = evaluation.held_out(data.load_corpus(corpus_file(args.data)))
    for report in fn(records, state.params, bb):
        print(report.to_json())


def cmd_eval_i2t(args) -> None:
    _eval(args, evaluation.eval_i2t)


def cmd_eval_t2i(args) -> None:
    _eval(args, evaluation.eval_t2i)


def cmd_generate(args) -> None:
    from .bridge import generate_interleaved

    if args.max_tokens < 1:
        raise UsageError("max-tokens must be ≥ 1")
    bb, state = training.load(args.ckpt)
    prompt = []
    if args.image:
        prompt.append(data.load_tensor(args.image))
    prompt.append(args.prompt)
    gen = generate_interleaved(prompt, state.params, bb, max_tokens=args.max_tokens,
                               temperature=args.temperature, seed=args.seed)
    out_dir = Path(args.out_dir)
    count = 0
    for seg in gen.segments:
        if isinstance(seg, str):
            print(seg)
        else:
            out_dir.mkdir(parents=True, exist_ok=True)
            path = out_dir / f"img_{count:03d}.tnsr"
            data.save_tensor(path, seg)
            print(f"[image] {path}")
            count += 1


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="foodbridge", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="write a synthetic recipe/image corpus")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n", type=int, default=512)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train the bridge and write a checkpoint")
    p.add_argument("--config", help="TOML config; defaults apply when omitted")
    p.add_argument("--data", required=True, help="corpus.jsonl or the directory holding it")
    p.add_argument("--out", required=True)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--steps", type=int, help="override the configured step count")
    p.set_defaults(func=cmd_train)

    for name, fn, what in (("eval-i2t", cmd_eval_i2t, "BLEU and ROUGE-2 of recipes generated from images"),
                           ("eval-t2i", cmd_eval_t2i, "similarity of images generated from recipes")):
        p = sub.add_parser(name, help=what)
        p.add_argument("--ckpt", required=True)
        p.add_argument("--data", required=True)
        p.set_defaults(func=fn)

    p = sub.add_parser("generate", help="interleaved text and image generation")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--prompt", required=True)
    p.add_argument("--image", help="TNSR image placed before the text")
    p.add_argument("--max-tokens", type=int, default=64)
    p.add_argument("--temperature", type=float)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", default=".", help="where img_NNN.tnsr files go")
    p.set_defaults(func=cmd_generate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except UsageError as exc:
        print(f"foodbridge: error: {exc}", file=sys.stderr)
        return USAGE_ERROR
    except VocabError as exc:
        print(f"foodbridge: {exc}", file=sys.stderr)
        return RUNTIME_ERROR
    except (NumericError, DimensionError, data.FormatError, data.CorpusError, data.CheckpointError,
            ValueError, OSError) as exc:
        print(f"foodbridge: {type(exc).__name__}: {exc}", file=sys.stderr)
        return RUNTIME_ERROR
    return 0


if __name__ == "__main__":
    sys.exit(main())
