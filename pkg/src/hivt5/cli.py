"""Command-line entry point: ``hivt5 <command> [--config FILE] [--key value ...]``.

Commands run one pipeline step each and read or write fixed file names under
``out_dir``::

    gen-data   raw.json            synthetic corpus
    build      corpus.json         filtered, windowed, split corpus
               long_*.json         answer pages embedded in long documents
    pretrain   pretrain.ckpt       denoising on single training pages
    train      train.ckpt          two-page answer + page training
    finetune   finetune.ckpt       full-length documents, encoder frozen
    eval       eval/<name>/        report.json, breakdown.csv/svg, confusion.csv
    report     (stdout)            table of every report under eval/

Exit codes: 0 success, 1 usage error, 2 validation error, 3 runtime failure.
``HIVT5_THREADS`` caps the number of evaluation worker threads.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path

from . import config as config_mod
from .config import RunConfig
from .corpus import (
    Corpus,
    construct_multipage,
    embed_in_long_documents,
    filter_corpus,
    generate_synthetic,
    ingest_corpus,
    split_and_trim,
    validate,
    write_corpus,
)
from .errors import CheckpointError, ConfigError, StageError, ValidationError
from .evaluation import evaluate, write_report
from .model import HiVt5
from .tensor import make_rng
from .training import (
    ALLOWED_SOURCES,
    Trainer,
    derive_seed,
    load_checkpoint,
    load_model,
    save_checkpoint,
    write_step_log,
)
from .vocab import Vocab

EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, EXIT_RUNTIME = 0, 1, 2, 3
COMMANDS = ("gen-data", "build", "pretrain", "train", "finetune", "eval", "report")
LONG_SETS = {"long_train": "train", "long_probe": "train", "long_test": "test"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def threads() -> int:
    raw = os.environ.get("HIVT5_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"HIVT5_THREADS must be an integer, got {raw!r}") from None
    return max(1, n)


def _atomic_text(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    tmp.replace(path)


def _claim(path: Path, force: bool) -> None:
    if path.exists() and not force:
        raise UsageError(f"{path} exists; pass --force to overwrite")


def _echo_config(cfg: RunConfig, command: str) -> None:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _atomic_text(out / f"config.{command}.resolved", cfg.dumps())


def stats_table(corpus: Corpus, title: str) -> str:
    s = corpus.stats()
    rows = [("documents", f"{s['documents']}"), ("pages", f"{s['pages']}"), ("questions", f"{s['questions']}"),
            ("questions over multi-page documents", f"{s['multi_page_questions_pct']:.2f}%"),
            ("questions over single-page documents", f"{s['single_page_questions_pct']:.2f}%")]
    for split in ("train", "val", "test"):
        n = sum(1 for q in corpus.samples if q.split == split)
        if n:
            rows.append((f"{split} questions", str(n)))
    width = max(len(k) for k, _ in rows)
    lines = [title, "-" * (width + 12)]
    lines += [f"{k:<{width}}  {v:>10}" for k, v in rows]
    return "\n".join(lines)


def corpus_vocab(corpus: Corpus) -> Vocab:
    texts = [" ".join(p.words) for d in corpus.documents for p in d.pages]
    texts += [s.question for s in corpus.samples] + [a for s in corpus.samples for a in s.answers]
    return Vocab.build(texts)


def _load(path: Path, what: str) -> Corpus:
    if not path.exists():
        raise UsageError(f"{what} {path} not found; run the earlier pipeline step first")
    return ingest_corpus(path)


# -- commands ----------------------------------------------------------------------------------


def cmd_gen_data(cfg: RunConfig, force: bool) -> int:
    out = cfg.path("raw.json")
    _claim(out, force)
    corpus = generate_synthetic(cfg.synthetic(derive_seed(cfg.seed, "data")))
    write_corpus(corpus, out)
    print(stats_table(corpus, f"generated {out}"))
    return EXIT_OK


def cmd_build(cfg: RunConfig, force: bool) -> int:
    out = cfg.path("corpus.json")
    _claim(out, force)
    raw = _load(cfg.path("raw.json"), "raw corpus")
    windowed = construct_multipage(raw, make_rng(derive_seed(cfg.seed, "window")), cfg.window)
    kept, removed = filter_corpus(windowed)
    corpus = split_and_trim(kept, make_rng(derive_seed(cfg.seed, "split")), cfg.ratios)
    validate(corpus)
    write_corpus(corpus, out)
    print(stats_table(corpus, f"built {out}"))
    print(f"removed ambiguous questions: {len(removed)}")
    if cfg.long_pages:
        synth = cfg.synthetic(derive_seed(cfg.seed, "filler"))
        filler_cfg = dataclasses.replace(synth, n_docs=cfg.filler_docs, qa_per_doc=0, pages_range=(1, 1))
        filler = [p for d in generate_synthetic(filler_cfg).documents for p in d.pages]
        for name, split in LONG_SETS.items():
            path = cfg.path(f"{name}.json")
            _claim(path, force)
            long = embed_in_long_documents(corpus.split(split), filler, cfg.long_pages,
                                           make_rng(derive_seed(cfg.seed, name)), suffix=name)
            write_corpus(long, path)
            print(f"{path}: {len(long.samples)} questions over {cfg.long_pages}-page documents")
    return EXIT_OK


def _stage_paths(cfg: RunConfig, stage: str) -> tuple[Path, Path]:
    return cfg.path(f"{stage}.ckpt"), cfg.path(f"{stage}.log.csv")


def _run_stage(cfg: RunConfig, stage: str, force: bool, resume: bool) -> int:
    ckpt, log = _stage_paths(cfg, stage)
    steps = {"pretrain": cfg.pretrain_steps, "train": cfg.train_steps, "finetune": cfg.finetune_steps}[stage]
    corpus = _load(cfg.path("corpus.json"), "corpus")
    data = corpus.split("train")
    if stage == "finetune":
        data = _load(cfg.path("long_train.json"), "long-document corpus").split("train")
    if not data.samples:
        raise ValidationError(f"no training questions for stage {stage}")
    tcfg = cfg.train(steps, derive_seed(cfg.seed, stage))
    if resume:
        if not ckpt.exists():
            raise UsageError(f"--resume given but {ckpt} does not exist")
        trainer = load_checkpoint(ckpt, stage, tcfg)
        if trainer.stage != stage:
            raise StageError(f"{ckpt} holds stage {trainer.stage!r}, expected {stage!r}")
    else:
        _claim(ckpt, force)
        source = {"pretrain": None, "train": "pretrain", "finetune": "train"}[stage]
        if stage == "train" and cfg.train_init == "scratch":
            source = None
        if source is None:
            vocab = corpus_vocab(corpus)
            model = HiVt5(cfg.model(len(vocab), derive_seed(cfg.seed, "init")))
            trainer = Trainer(model, vocab, tcfg, stage)
        else:
            src = cfg.path(f"{source}.ckpt")
            if not src.exists():
                raise UsageError(f"stage {stage} needs {src} (expected stage: "
                                 f"{' or '.join(ALLOWED_SOURCES[stage])}); run `{source}` first")
            trainer = load_checkpoint(src, stage, tcfg)
    remaining = steps - trainer.step
    start = len(trainer.log)
    pages = [p for d in data.documents for p in d.pages] if stage == "pretrain" else None

    def report(t: Trainer) -> None:
        if t.step % 100 == 0 or t.step == steps:
            r = t.log[-1]
            print(f"{stage} step {t.step:5d}  answer_loss {r['answer_loss']:.4f}  "
                  f"page_loss {r['page_loss']:.4f}  lr {r['lr']:.2e}", flush=True)

    trainer.run(data, max(0, remaining), pages, report)
    write_step_log(trainer.log[start:], log, append=resume)
    save_checkpoint(ckpt, trainer)
    print(f"wrote {ckpt} (stage {stage}, step {trainer.step})")
    return EXIT_OK


def cmd_eval(cfg: RunConfig, force: bool) -> int:
    ckpt = cfg.path(f"{cfg.eval_checkpoint}.ckpt")
    if not ckpt.exists():
        raise UsageError(f"checkpoint {ckpt} not found")
    model, vocab, _ = load_model(ckpt)
    corpus = _load(cfg.path(f"{cfg.eval_corpus}.json"), "evaluation corpus")
    if cfg.eval_split != "all":
        corpus = corpus.split(cfg.eval_split)
    if not corpus.samples:
        raise ValidationError(f"{cfg.eval_corpus} has no questions in split {cfg.eval_split!r}")
    name = f"{cfg.eval_checkpoint}-{cfg.eval_corpus}-{cfg.eval_split}-{cfg.setup}-{cfg.budget}"
    out = cfg.path("eval") / name
    _claim(out / "report.json", force)
    report, results = evaluate(model, vocab, corpus, cfg.setup, cfg.budget, cfg.max_answer_len,
                               cfg.eval_batch, threads())
    write_report(report, results, out)
    print(f"{name}: n={report.n_samples} accuracy={report.accuracy:.4f} anls={report.anls:.4f} "
          f"page_accuracy={report.page_accuracy:.4f}")
    print(f"wrote {out}")
    return EXIT_OK


def cmd_report(cfg: RunConfig, force: bool) -> int:
    root = cfg.path("eval")
    reports = sorted(root.glob("*/report.json")) if root.exists() else []
    if not reports:
        raise UsageError(f"no reports under {root}; run `eval` first")
    header = f"{'run':<48} {'n':>5} {'acc':>7} {'anls':>7} {'page':>7}"
    print(header)
    print("-" * len(header))
    for path in reports:
        r = json.loads(path.read_text())
        print(f"{path.parent.name:<48} {r['n_samples']:>5} {r['accuracy']:>7.4f} {r['anls']:>7.4f} "
              f"{r['page_accuracy']:>7.4f}")
    return EXIT_OK


# -- argument handling -----------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="hivt5", description="Hierarchical multi-page document QA pipeline.")
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    sub.required = True
    types = config_mod.field_types()
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="run configuration file")
        p.add_argument("--force", action="store_true", help="overwrite existing outputs")
        if name in ("pretrain", "train", "finetune"):
            p.add_argument("--resume", action="store_true", help="continue this stage from its own checkpoint")
        for key in types:
            p.add_argument("--" + key.replace("_", "-"), dest=key, default=None, metavar=types[key].__name__.upper())
    return parser


def run(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        overrides = {k: v for k, v in vars(args).items() if k in config_mod.field_types() and v is not None}
        cfg = config_mod.resolve(args.config, overrides)
        _echo_config(cfg, args.command)
        print(cfg.dumps(), end="")
        print("-" * 40)
        if args.command == "gen-data":
            return cmd_gen_data(cfg, args.force)
        if args.command == "build":
            return cmd_build(cfg, args.force)
        if args.command in ("pretrain", "train", "finetune"):
            return _run_stage(cfg, args.command, args.force, args.resume)
        if args.command == "eval":
            return cmd_eval(cfg, args.force)
        return cmd_report(cfg, args.force)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ValidationError, ConfigError, CheckpointError) as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (StageError, FloatingPointError, OSError, RuntimeError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
