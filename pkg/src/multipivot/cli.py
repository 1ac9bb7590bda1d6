"""Command-line interface.

Every command writes a JSON run manifest (command, resolved options, seed,
input/output hashes) next to its outputs.  Option precedence is the same
everywhere: command-line flags override values from a ``--config``/``--spec``
file, which override built-in defaults.  The default output directory is
taken from ``$MULTIPIVOT_OUT`` (else the current directory) when ``--out``
is not given.

Exit codes: 0 success, 1 user or configuration error, 2 internal error.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from pathlib import Path
from typing import Sequence

from . import __version__
from .corpus import SPLITS, SynthSpec, encode_corpus, generate_synthetic_nway, load_tsv, write_tsv
from .errors import ConfigurationError, MultipivotError
from .evaluation import bleu, emit_report, markdown_report, read_report_csv, run_direct, run_grid
from .inference import translate
from .model import ModelConfig, TransformerModel
from .pipeline import load_pipeline, parse_k, simultaneous_pipeline, full_sentence_pipeline
from .training import TrainConfig, train, write_curve
from .vocab import build_vocab
from .waitk import multi_source_simultaneous_decode

log = logging.getLogger("multipivot")

OUT_ENV = "MULTIPIVOT_OUT"
PRECEDENCE = "Precedence: flags > config file > defaults."


class UsageError(MultipivotError):
    pass


class _Parser(argparse.ArgumentParser):
    """ArgumentParser that reports usage errors with exit code 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


# -- helpers -----------------------------------------------------------------------
def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def default_out(value: str | None) -> Path:
    return Path(value if value is not None else os.environ.get(OUT_ENV, "."))


def parse_k_list(text: str) -> list[int | None]:
    try:
        return [parse_k(t) for t in text.split(",") if t.strip()]
    except ConfigurationError as e:
        raise UsageError(str(e)) from None


def read_json(path: str | Path) -> dict:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise ConfigurationError(f"{path}: invalid JSON ({e.msg} at line {e.lineno})") from None
    if not isinstance(data, dict):
        raise ConfigurationError(f"{path}: expected a JSON object")
    return data


def write_manifest(args: argparse.Namespace, argv: Sequence[str], config: dict,
                   inputs: Sequence[str | Path], outputs: Sequence[str | Path], out_dir: Path) -> Path:
    path = Path(args.manifest) if getattr(args, "manifest", None) else out_dir / f"{args.command}.manifest.json"
    manifest = {
        "command": args.command,
        "argv": list(argv),
        "config": config,
        "seed": config.get("seed"),
        "version": __version__,
        "inputs": {str(p): sha256_file(p) for p in inputs if Path(p).is_file()},
        "outputs": {str(p): sha256_file(p) for p in outputs if Path(p).is_file()},
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def _read_lines(path: str | None) -> list[str]:
    if path is None or path == "-":
        return sys.stdin.read().splitlines()
    return Path(path).read_text(encoding="utf-8").splitlines()


def _write_lines(path: str | None, lines: Sequence[str]) -> None:
    text = "".join(line + "\n" for line in lines)
    if path is None or path == "-":
        sys.stdout.write(text)
    else:
        Path(path).write_text(text, encoding="utf-8")


# -- commands --------------------------------------------------------------------
def cmd_gen_corpus(args, argv) -> int:
    spec_dict = SynthSpec.default().to_dict()
    if args.spec:
        spec_dict.update(read_json(args.spec))
    if args.seed is not None:
        spec_dict["seed"] = args.seed
    if args.reorder_window is not None:
        tmp = SynthSpec.default(reorder_window=args.reorder_window)
        spec_dict["reorder_window"] = tmp.reorder_window
        spec_dict["reorder_class"] = spec_dict.get("reorder_class") or tmp.reorder_class
    for split in SPLITS:
        size = getattr(args, f"{split}_size")
        if size is not None:
            spec_dict["sizes"] = {**spec_dict["sizes"], split: size}
    try:
        spec = SynthSpec.from_dict(spec_dict)
    except TypeError as e:
        raise ConfigurationError(f"invalid corpus spec: {e}") from None
    out = default_out(args.out)
    out.mkdir(parents=True, exist_ok=True)
    data = generate_synthetic_nway(spec)
    outputs = []
    for split, corpus in data.items():
        write_tsv(corpus, out / f"{split}.tsv")
        outputs.append(out / f"{split}.tsv")
    (out / "spec.json").write_text(json.dumps(spec.to_dict(), indent=2, sort_keys=True) + "\n")
    outputs.append(out / "spec.json")
    write_manifest(args, argv, spec.to_dict(), [args.spec] if args.spec else [], outputs, out)
    print(f"wrote {', '.join(f'{s}={len(c)}' for s, c in data.items())} examples to {out}")
    return 0


MODEL_FLAGS = {"layers": "layers", "heads": "heads", "hidden": "hidden_size", "ff": "ff_size",
               "dropout": "dropout", "max_len": "max_len"}
TRAIN_FLAGS = {"lr": "lr", "warmup": "warmup", "batch_size": "batch_size",
               "label_smoothing": "label_smoothing", "eval_every": "eval_every", "patience": "patience",
               "avg_last": "avg_last", "max_steps": "max_steps", "dev_limit": "dev_limit"}


def _columns(text: str | None) -> list[str]:
    return [c for c in (text or "").split(",") if c]


def cmd_train(args, argv) -> int:
    cfg_file = read_json(args.config) if args.config else {}
    model_opts = dict(cfg_file.get("model", {}))
    train_opts = dict(cfg_file.get("train", {}))
    for flag, key in MODEL_FLAGS.items():
        if getattr(args, flag) is not None:
            model_opts[key] = getattr(args, flag)
    if args.bidirectional:
        model_opts["causal_encoder"] = False
    for flag, key in TRAIN_FLAGS.items():
        if getattr(args, flag) is not None:
            train_opts[key] = getattr(args, flag)
    if args.train_k is not None:
        train_opts["train_k"] = parse_k_list(args.train_k)
    if args.eval_k is not None:
        train_opts["eval_k"] = parse_k(args.eval_k)
    if args.seed is not None:
        train_opts["seed"] = args.seed
    train_cfg = TrainConfig.from_dict(train_opts)

    data_dir = Path(args.data)
    srcs = _columns(args.src)
    src_vocab_cols = _columns(args.src_vocab_from) or srcs
    tgt_vocab_cols = _columns(args.tgt_vocab_from) or [args.tgt]
    wanted = list(dict.fromkeys(srcs + [args.tgt] + src_vocab_cols + tgt_vocab_cols))
    train_c = load_tsv(data_dir / "train.tsv", wanted, "train")
    dev_c = load_tsv(data_dir / "dev.tsv", srcs + [args.tgt], "dev")
    src_vocab = build_vocab(*[train_c.side(s) for s in src_vocab_cols])
    tgt_vocab = build_vocab(*[train_c.side(s) for s in tgt_vocab_cols])
    known = set(ModelConfig.__dataclass_fields__)
    bad = set(model_opts) - known
    if bad:
        raise ConfigurationError(f"unknown model option(s): {', '.join(sorted(bad))}")
    model_opts.update(src_vocab_size=len(src_vocab), tgt_vocab_size=len(tgt_vocab),
                      num_encoders=len(srcs), seed=train_cfg.seed)
    model = TransformerModel(ModelConfig(**model_opts), src_vocab=src_vocab, tgt_vocab=tgt_vocab)
    out = default_out(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result = train(model, encode_corpus(train_c, srcs, args.tgt, src_vocab, tgt_vocab),
                   encode_corpus(dev_c, srcs, args.tgt, src_vocab, tgt_vocab), train_cfg,
                   out / "checkpoints" if args.keep_checkpoints else None)
    ckpt = out / "model.ckpt"
    result.model.save(ckpt, {"steps": result.steps, "sources": srcs, "target": args.tgt})
    write_curve(result.curve, out / "curve.csv")
    config = {"model": result.model.config.to_dict(), "train": train_cfg.to_dict(),
              "sources": srcs, "target": args.tgt, "src_vocab_from": src_vocab_cols,
              "tgt_vocab_from": tgt_vocab_cols, "seed": train_cfg.seed}
    write_manifest(args, argv, config, [data_dir / "train.tsv", data_dir / "dev.tsv"],
                   [ckpt, out / "curve.csv"], out)
    print(f"trained {result.steps} steps; best dev BLEU {result.best_bleu:.2f}; saved {ckpt}")
    return 0


def cmd_translate(args, argv) -> int:
    model = TransformerModel.load(args.model)
    if model.src_vocab is None or model.tgt_vocab is None:
        raise ConfigurationError(f"{args.model}: checkpoint has no vocabularies")
    k = parse_k(args.k)
    n = model.config.num_encoders
    out_lines = []
    for lineno, line in enumerate(_read_lines(args.input), 1):
        fields = line.split("\t") if n > 1 else [line]
        if len(fields) != n:
            raise ConfigurationError(f"input line {lineno}: expected {n} tab-separated sources, got {len(fields)}")
        ids = [model.src_vocab.encode(f.split()) for f in fields]
        if k is None:
            hyp = translate(model, ids, args.max_steps)
        else:
            hyp, _ = multi_source_simultaneous_decode(model, ids, k, args.max_steps)
        out_lines.append(" ".join(model.tgt_vocab.decode(hyp)))
    _write_lines(args.output, out_lines)
    if args.output not in (None, "-"):
        write_manifest(args, argv, {"k": args.k, "max_steps": args.max_steps, "seed": None},
                       [args.model] + ([args.input] if args.input not in (None, "-") else []),
                       [args.output], Path(args.output).parent)
    return 0


def cmd_pipeline_translate(args, argv) -> int:
    config, settings = load_pipeline(args.pipeline)
    if args.max_steps is not None:
        config.max_steps = args.max_steps
    k_s2p = parse_k(args.k_s2p) if args.k_s2p is not None else settings["k_s2p"]
    k_p2t = parse_k(args.k_p2t) if args.k_p2t is not None else settings["k_p2t"]
    src_vocab = config.s2p[0].src_vocab
    tgt_vocab = config.p2t.tgt_vocab
    pivot_vocab = config.p2t.src_vocab
    if src_vocab is None or tgt_vocab is None:
        raise ConfigurationError("pipeline checkpoints must carry vocabularies")
    out_lines, trace_lines = [], []
    for n, line in enumerate(_read_lines(args.input), 1):
        ids = src_vocab.encode(line.split())
        if k_s2p is None and k_p2t is None:
            run = full_sentence_pipeline(config, ids)
        else:
            run = simultaneous_pipeline(config, ids, k_s2p, k_p2t)
        out_lines.append(" ".join(tgt_vocab.decode(run.target)))
        if args.trace:
            trace_lines.append(f"# sentence {n}: reads before first write = {run.reads_before_first_write()}")
            for ev in run.trace:
                vocab = src_vocab if ev.stage == "src" else tgt_vocab if ev.stage == "p2t" and ev.kind == "WRITE" \
                    else pivot_vocab
                tok = vocab.token(ev.token) if vocab is not None and ev.token >= 0 else str(ev.token)
                trace_lines.append(f"{ev.tick}\t{ev.stage}\t{ev.kind}\t{tok}")
    _write_lines(args.output, out_lines)
    if args.trace:
        if args.trace_file:
            Path(args.trace_file).write_text("".join(t + "\n" for t in trace_lines), encoding="utf-8")
        else:
            sys.stderr.write("".join(t + "\n" for t in trace_lines))
    if args.output not in (None, "-"):
        write_manifest(args, argv, {"k_s2p": k_s2p, "k_p2t": k_p2t, "seed": None},
                       [args.pipeline] + ([args.input] if args.input not in (None, "-") else []),
                       [args.output] + ([args.trace_file] if args.trace_file else []), Path(args.output).parent)
    return 0


def cmd_evaluate(args, argv) -> int:
    hyps = [l.split() for l in _read_lines(args.hyp)]
    refs = [l.split() for l in _read_lines(args.ref)]
    report = bleu(hyps, refs, smoothing=not args.no_smoothing)
    result = {"bleu": report.bleu, "precisions": list(report.precisions),
              "brevity_penalty": report.brevity_penalty, "hyp_len": report.hyp_len, "ref_len": report.ref_len}
    text = json.dumps(result, indent=2)
    print(text)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "bleu.json").write_text(text + "\n")
        write_manifest(args, argv, {"smoothing": not args.no_smoothing, "seed": None},
                       [args.hyp, args.ref], [out / "bleu.json"], out)
    return 0


def _labelled(spec: str) -> tuple[str, str]:
    if "=" in spec:
        label, path = spec.split("=", 1)
        return label, path
    return Path(spec).stem, spec


def cmd_grid(args, argv) -> int:
    ks = parse_k_list(args.k)
    if not ks:
        raise UsageError("--k needs at least one value")
    test = load_tsv(Path(args.data) / "test.tsv", split="test")
    if args.limit is not None:
        test = test.subset(args.limit)
    results, inputs = [], [Path(args.data) / "test.tsv"]
    tgt_tokens = test.side(args.tgt if args.tgt else test.target)
    src_lang = args.src if args.src else test.source
    if args.direct:
        label, path = _labelled(args.direct)
        model = TransformerModel.load(path)
        inputs.append(path)
        srcs = [model.src_vocab.encode(s) for s in test.side(src_lang)]
        refs = [model.tgt_vocab.encode(t) for t in tgt_tokens]
        results.append(run_direct(label, model, srcs, refs, ks, args.max_steps))
    for spec in args.pipeline or []:
        label, path = _labelled(spec)
        config, _ = load_pipeline(path)
        inputs.append(path)
        srcs = [config.s2p[0].src_vocab.encode(s) for s in test.side(src_lang)]
        refs = [config.p2t.tgt_vocab.encode(t) for t in tgt_tokens]
        results.append(run_grid(label, {"s2p": config.s2p, "p2t": config.p2t}, srcs, refs, ks,
                                max_steps=args.max_steps))
    if not results:
        raise UsageError("grid needs --direct and/or --pipeline")
    out = default_out(args.out)
    out.mkdir(parents=True, exist_ok=True)
    emit_report(results, out / "grid.csv", out / "grid.md")
    write_manifest(args, argv, {"k": [None if k is None else k for k in ks], "limit": args.limit,
                                "max_steps": args.max_steps, "seed": None},
                   inputs, [out / "grid.csv", out / "grid.md"], out)
    print(f"wrote {out / 'grid.csv'} and {out / 'grid.md'}")
    return 0


def cmd_report(args, argv) -> int:
    results = []
    for path in args.csv:
        results.extend(read_report_csv(path))
    if not results:
        raise UsageError("no results in the given CSV files")
    text = markdown_report(results, args.title)
    if args.md:
        Path(args.md).write_text(text)
        write_manifest(args, argv, {"title": args.title, "seed": None}, args.csv, [args.md], Path(args.md).parent)
    else:
        sys.stdout.write(text)
    return 0


# -- parser ------------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="multipivot", description="Multi-pivot simultaneous translation toolkit.",
                epilog=PRECEDENCE + f" Default output directory: ${OUT_ENV} or '.'.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    g = sub.add_parser("gen-corpus", help="generate a synthetic N-way corpus",
                       description="Generate train/dev/test TSV files from a corpus spec. " + PRECEDENCE)
    g.add_argument("--spec", help="JSON corpus spec (fields of SynthSpec)")
    g.add_argument("--out", help=f"output directory (default ${OUT_ENV} or '.')")
    g.add_argument("--seed", type=int, help="generator seed")
    g.add_argument("--reorder-window", type=int, help="pivot chunk-reversal window (0 = off)")
    for split in SPLITS:
        g.add_argument(f"--{split}-size", type=int, help=f"number of {split} examples")
    g.add_argument("--manifest", help="manifest path (default <out>/gen-corpus.manifest.json)")
    g.set_defaults(func=cmd_gen_corpus)

    t = sub.add_parser("train", help="train one model",
                       description="Train a (multi-source) model on TSV data. " + PRECEDENCE)
    t.add_argument("--data", required=True, help="directory with train.tsv and dev.tsv")
    t.add_argument("--src", required=True, help="source column(s), comma separated")
    t.add_argument("--tgt", required=True, help="target column")
    t.add_argument("--config", help='JSON file {"model": {...}, "train": {...}}')
    t.add_argument("--src-vocab-from", help="columns whose tokens form the source vocabulary (default --src)")
    t.add_argument("--tgt-vocab-from", help="columns whose tokens form the target vocabulary (default --tgt); "
                                            "use every pivot column so stages of a pipeline share a vocabulary")
    t.add_argument("--out", help=f"output directory (default ${OUT_ENV} or '.')")
    t.add_argument("--seed", type=int, help="seed for init, batching and dropout")
    t.add_argument("--layers", type=int)
    t.add_argument("--heads", type=int)
    t.add_argument("--hidden", type=int, help="hidden size")
    t.add_argument("--ff", type=int, help="feed-forward size")
    t.add_argument("--dropout", type=float)
    t.add_argument("--max-len", type=int, help="longest sequence the model accepts")
    t.add_argument("--bidirectional", action="store_true", help="full-attention encoder (no streaming)")
    t.add_argument("--lr", type=float, help="peak learning rate")
    t.add_argument("--warmup", type=int, help="warmup steps")
    t.add_argument("--batch-size", type=int, help="sentences per batch")
    t.add_argument("--label-smoothing", type=float)
    t.add_argument("--eval-every", type=int, help="steps between dev evaluations")
    t.add_argument("--patience", type=int, help="stagnant evaluations before stopping")
    t.add_argument("--avg-last", type=int, help="checkpoints averaged into the final model")
    t.add_argument("--max-steps", type=int)
    t.add_argument("--dev-limit", type=int, help="dev sentences used for BLEU")
    t.add_argument("--train-k", help="wait-k values sampled per batch, e.g. 1,2,4,full")
    t.add_argument("--eval-k", help="wait-k used for dev BLEU (default full)")
    t.add_argument("--keep-checkpoints", action="store_true", help="also save every evaluated checkpoint")
    t.add_argument("--manifest", help="manifest path (default <out>/train.manifest.json)")
    t.set_defaults(func=cmd_train)

    tr = sub.add_parser("translate", help="translate with one model",
                        description="Translate newline-delimited sentences (tab-separated sources "
                                    "for multi-source models).")
    tr.add_argument("--model", required=True, help="checkpoint file")
    tr.add_argument("--k", default="full", help="wait-k value or 'full' (default full)")
    tr.add_argument("--input", help="input file (default stdin)")
    tr.add_argument("--output", help="output file (default stdout)")
    tr.add_argument("--max-steps", type=int, default=64, help="longest output (default 64)")
    tr.add_argument("--manifest", help="manifest path (default next to --output)")
    tr.set_defaults(func=cmd_translate)

    pt = sub.add_parser("pipeline-translate", help="translate through a pivot pipeline",
                        description="Run a cascaded pipeline described by a JSON file. " + PRECEDENCE)
    pt.add_argument("--pipeline", required=True, help="pipeline JSON file")
    pt.add_argument("--k-s2p", help="source-to-pivot wait-k or 'full'")
    pt.add_argument("--k-p2t", help="pivot-to-target wait-k or 'full'")
    pt.add_argument("--input", help="input file (default stdin)")
    pt.add_argument("--output", help="output file (default stdout)")
    pt.add_argument("--trace", action="store_true", help="emit the tick-by-tick action trace")
    pt.add_argument("--trace-file", help="write the trace here instead of stderr")
    pt.add_argument("--max-steps", type=int, help="longest output per stage")
    pt.add_argument("--manifest", help="manifest path (default next to --output)")
    pt.set_defaults(func=cmd_pipeline_translate)

    e = sub.add_parser("evaluate", help="corpus BLEU of a hypothesis file",
                       description="Score newline-delimited hypotheses against references.")
    e.add_argument("--hyp", required=True, help="hypothesis file")
    e.add_argument("--ref", required=True, help="reference file")
    e.add_argument("--no-smoothing", action="store_true", help="disable add-one smoothing for n >= 2")
    e.add_argument("--out", help="also write bleu.json and a manifest here")
    e.add_argument("--manifest", help="manifest path (default <out>/evaluate.manifest.json)")
    e.set_defaults(func=cmd_evaluate)

    gr = sub.add_parser("grid", help="wait-k grid over pipelines and a direct model",
                        description="Evaluate every (k_s2p, k_p2t) pair on test.tsv and write grid.csv/grid.md.")
    gr.add_argument("--data", required=True, help="directory with test.tsv")
    gr.add_argument("--k", default="1,2,4,6,8", help="comma-separated k values, 'full' allowed")
    gr.add_argument("--direct", help="[LABEL=]direct model checkpoint")
    gr.add_argument("--pipeline", action="append", help="[LABEL=]pipeline JSON (repeatable)")
    gr.add_argument("--src", help="source column (default first column)")
    gr.add_argument("--tgt", help="target column (default last column)")
    gr.add_argument("--limit", type=int, help="use the first N test sentences")
    gr.add_argument("--max-steps", type=int, default=64, help="longest output (default 64)")
    gr.add_argument("--out", help=f"output directory (default ${OUT_ENV} or '.')")
    gr.add_argument("--manifest", help="manifest path (default <out>/grid.manifest.json)")
    gr.set_defaults(func=cmd_grid)

    r = sub.add_parser("report", help="markdown tables from grid CSV files",
                       description="Render one or more grid CSV files as markdown tables.")
    r.add_argument("--csv", required=True, action="append", help="grid CSV (repeatable)")
    r.add_argument("--md", help="output markdown file (default stdout)")
    r.add_argument("--title", default="Results", help="document title")
    r.add_argument("--manifest", help="manifest path (default next to --md)")
    r.set_defaults(func=cmd_report)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    if args.command is None:
        parser.print_usage(sys.stderr)
        print("multipivot: error: a command is required", file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args, argv)
    except (MultipivotError, ValueError, OSError) as e:
        print(f"multipivot {args.command}: error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # pragma: no cover - defensive
        log.exception("internal error")
        print(f"multipivot {args.command}: internal error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
