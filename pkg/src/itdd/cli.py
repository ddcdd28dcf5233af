"""Command-line entry point: ``itdd <command> ...``.

Exit codes: 0 success, 1 usage, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError, load_checkpoint
from .config import RunConfig, load_config
from .data import CorpusError, corpus_examples, encode_example, load_corpus, vocab_corpus, write_corpus
from .decode import ChatSession
from .evaluate import compare_variants, decode_examples, evaluate, format_table
from .gradcheck import check_models, check_ops
from .nn import ConfigError
from .synth import gen_fact_copy_task
from .tensor import GradCheckError
from .train import NumericError, TrainingDiverged, train
from .vocab import build_vocab

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("itdd")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _split(convs, fraction: float, seed: int):
    if len(convs) < 2 or fraction <= 0:
        return convs, []
    order = np.random.default_rng(seed).permutation(len(convs))
    n_val = max(1, int(round(len(convs) * fraction)))
    return [convs[i] for i in order[n_val:]], [convs[i] for i in order[:n_val]]


def _prepare(run: RunConfig, corpus: Path, variant: str | None = None):
    convs = load_corpus(corpus)
    if not convs:
        raise CorpusError(f"{corpus}: no conversations")
    cfg = run.model_config(vocab_size=4, **({"variant": variant} if variant else {}))
    train_convs, val_convs = _split(convs, run.val_fraction, run.train.seed)
    caps = dict(max_utt_len=cfg.max_utt_len, max_doc_len=cfg.max_doc_len)
    train_ex = corpus_examples(train_convs, cfg.window, **caps)
    val_ex = corpus_examples(val_convs, cfg.window, **caps)
    if not train_ex:
        raise CorpusError(f"{corpus}: no training examples (conversations need at least two turns)")
    vocab = build_vocab(vocab_corpus(train_ex), run.min_count, run.max_vocab)
    enc = lambda xs: [encode_example(e, vocab) for e in xs]
    return vocab, enc(train_ex), enc(val_ex)


def _load(path: str):
    path = Path(path)
    if not (path / "manifest.json").exists() and (path / "best" / "manifest.json").exists():
        path = path / "best"
    ckpt = load_checkpoint(path)
    if ckpt.vocab is None:
        raise CheckpointError(f"{path}: checkpoint has no vocabulary")
    return ckpt


def _encoded(ckpt, corpus: str):
    cfg = ckpt.model.config
    convs = load_corpus(corpus)
    examples = corpus_examples(convs, cfg.window, max_utt_len=cfg.max_utt_len, max_doc_len=cfg.max_doc_len)
    if not examples:
        raise CorpusError(f"{corpus}: no examples to evaluate")
    return [encode_example(e, ckpt.vocab) for e in examples]


def cmd_train(args) -> int:
    run = load_config(args.config)
    vocab, train_ex, val_ex = _prepare(run, Path(args.corpus))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg = run.model_config(len(vocab))
    tc = run.train
    tc.checkpoint_dir = str(out)
    result = train(train_ex, cfg, tc, val_examples=val_ex or None, vocab=vocab, metrics_path=out / "metrics.csv")
    last = result.history[-1]
    print(f"trained {cfg.variant} for {last['step']} steps; final L_mle {last['L_mle']:.4f}")
    if result.best_val_ppl is not None:
        print(f"best validation PPL (final pass) {result.best_val_ppl:.4f}")
    print(f"checkpoints in {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    ckpt = _load(args.ckpt)
    if args.variant and args.variant != ckpt.model.variant:
        raise UsageError(f"checkpoint holds a {ckpt.model.variant} model, not {args.variant}")
    report = evaluate(ckpt.model, ckpt.vocab, _encoded(ckpt, args.corpus), args.beam, args.max_len,
                      with_bleu=not args.no_bleu)
    print(format_table([report]))
    return EXIT_OK


def cmd_decode(args) -> int:
    ckpt = _load(args.ckpt)
    rows = decode_examples(ckpt.model, ckpt.vocab, _encoded(ckpt, args.corpus), args.beam, args.max_len)
    with open(args.out, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, ensure_ascii=False) + "\n")
    print(f"wrote {len(rows)} responses to {args.out}")
    return EXIT_OK


def _read_doc(path: str) -> str:
    try:
        return Path(path).read_text(encoding="utf-8").strip()
    except OSError as exc:
        raise CorpusError(f"cannot read document {path}: {exc.strerror}") from exc


def cmd_chat(args, stdin=None, stdout=None) -> int:
    stdin = stdin or sys.stdin
    stdout = stdout or sys.stdout
    ckpt = _load(args.ckpt)
    session = ChatSession(ckpt.model, ckpt.vocab, _read_doc(args.doc), args.beam, args.max_len)
    print("commands: :doc PATH, :reset, :quit", file=stdout)
    for line in stdin:
        line = line.strip()
        if not line:
            continue
        if line == ":quit":
            break
        if line == ":reset":
            session.reset()
            print("(context cleared)", file=stdout)
            continue
        if line.startswith(":doc"):
            try:
                session.set_document(_read_doc(line[4:].strip()))
            except CorpusError as exc:
                print(f"error: {exc}", file=stdout)
                continue
            print("(document replaced)", file=stdout)
            continue
        resp = session.reply(line)
        print(f"pass 1> {resp.first_text}", file=stdout)
        print(f"final > {resp.final_text}", file=stdout)
        changed = resp.diff()
        if changed:
            print("revised: " + ", ".join(f"{a or '-'} -> {b or '-'}" for a, b in changed), file=stdout)
    if args.transcript:
        write_corpus([session.transcript()], args.transcript)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    results = [("op " + n, r) for n, r in check_ops(args.seed)]
    if args.full:
        results += [("model " + n, r) for n, r in check_models(args.seed)]
    for name, report in results:
        print(f"{'PASS' if report.passed else 'FAIL'} {name:<28} max rel err {report.max_rel_error:.2e}")
    failed = [n for n, r in results if not r.passed]
    if failed:
        print(f"{len(failed)} gradient checks failed", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_gen_synth(args) -> int:
    convs = gen_fact_copy_task(args.seed, args.conversations, args.facts, args.vocab_size)
    write_corpus(convs, args.out)
    print(f"wrote {len(convs)} conversations to {args.out}")
    return EXIT_OK


def cmd_compare(args) -> int:
    run = load_config(args.config)
    vocab, train_ex, val_ex = _prepare(run, Path(args.corpus))
    if not val_ex:
        raise CorpusError("comparison needs a validation split; raise val_fraction or add conversations")
    configs = [run.model_config(len(vocab), variant=v) for v in run.variants]
    reports = compare_variants(train_ex, val_ex, configs, run.train, vocab, run.beam, run.max_decode_len,
                               with_bleu=not args.no_bleu)
    print(format_table(reports))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="itdd", description="Incremental-transformer dialogue models with a deliberation decoder.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("train", help="train one model")
    s.add_argument("--config", required=True)
    s.add_argument("--corpus", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train)

    def decoding(s):
        s.add_argument("--beam", type=int, default=5)
        s.add_argument("--max-len", type=int, default=30)

    s = sub.add_parser("eval", help="perplexity per pass and BLEU")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--corpus", required=True)
    s.add_argument("--variant", help="fail unless the checkpoint holds this variant")
    s.add_argument("--no-bleu", action="store_true", help="skip beam decoding")
    decoding(s)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("decode", help="write both passes for every example as JSONL")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--corpus", required=True)
    s.add_argument("--out", required=True)
    decoding(s)
    s.set_defaults(func=cmd_decode)

    s = sub.add_parser("chat", help="interactive session over one document")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--doc", required=True)
    s.add_argument("--transcript", help="append-compatible JSONL file for the session")
    decoding(s)
    s.set_defaults(func=cmd_chat)

    s = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    s.add_argument("--full", action="store_true", help="also check tiny full models of every variant")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("gen-synth", help="write a synthetic fact-copy corpus")
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--conversations", type=int, default=500)
    s.add_argument("--facts", type=int, default=4)
    s.add_argument("--vocab-size", type=int, default=64)
    s.set_defaults(func=cmd_gen_synth)

    s = sub.add_parser("compare", help="train and evaluate each configured variant")
    s.add_argument("--config", required=True)
    s.add_argument("--corpus", required=True)
    s.add_argument("--no-bleu", action="store_true")
    s.set_defaults(func=cmd_compare)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"itdd: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingDiverged as exc:
        where = f"; last good checkpoint {exc.last_good}" if exc.last_good else ""
        print(f"itdd: numeric failure: {exc}{where}", file=sys.stderr)
        return EXIT_NUMERIC
    except (NumericError, GradCheckError) as exc:
        print(f"itdd: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (CorpusError, CheckpointError, FileNotFoundError, IndexError, ValueError) as exc:
        print(f"itdd: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
