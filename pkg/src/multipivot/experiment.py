"""Synthetic ordering experiment: direct vs single-pivot vs multi-pivot.

For each seed the same N-way corpus trains six models (direct, one
source-to-pivot model per pivot, one pivot-to-target model per pivot and a
multi-source pivot-to-target model).  All models are trained with wait-k
values sampled per batch, so one checkpoint serves every k.  Trained
checkpoints and evaluation results are cached under ``cache_dir`` keyed by a
digest of everything that influences them.

Run ``python -m multipivot.experiment --help`` for the command-line entry.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .corpus import SynthSpec, encode_corpus, load_or_generate
from .evaluation import bleu, corpus_al, emit_report, DirectResult, GridResult
from .inference import batch_greedy_decode
from .model import ModelConfig, TransformerModel
from .pipeline import PipelineConfig, batch_pipeline, replay_pipeline
from .training import TrainConfig, train, write_curve
from .vocab import Vocab, build_vocab
from .waitk import ReplaySession, run_lockstep

log = logging.getLogger(__name__)

FULL = None
SIM_CELLS = [(4, 4), (2, 6), (6, 2)]


@dataclass
class ExperimentConfig:
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2])
    vocab_size: int = 48
    confused: int = 24
    reorder_window: int = 3
    train_size: int = 20000
    dev_size: int = 500
    test_size: int = 1000
    model: dict = field(default_factory=lambda: {"layers": 2, "heads": 4, "hidden_size": 64,
                                                 "ff_size": 256, "dropout": 0.1})
    train: dict = field(default_factory=lambda: {"max_steps": 10000, "eval_every": 200, "patience": 5,
                                                 "avg_last": 5, "dev_limit": 200, "warmup": 400,
                                                 "lr": 2e-3, "batch_size": 64,
                                                 "train_k": [1, 2, 4, 6, 8, None]})
    direct_k: int = 8
    max_steps: int = 40

    def spec(self, seed: int) -> SynthSpec:
        return SynthSpec.default(seed=seed, vocab_size=self.vocab_size, confused=self.confused,
                                 reorder_window=self.reorder_window,
                                 sizes={"train": self.train_size, "dev": self.dev_size, "test": self.test_size})

    def digest(self, *extra) -> str:
        blob = json.dumps([asdict(self), *extra], sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def model_plan(spec: SynthSpec) -> dict[str, tuple[list[str], str]]:
    """Model name -> (source columns, target column)."""
    plan = {"direct": ([spec.source], spec.target)}
    for p in spec.pivots:
        plan[f"s2p_{p}"] = ([spec.source], p)
    for p in spec.pivots:
        plan[f"p2t_{p}"] = ([p], spec.target)
    plan["p2t_multi"] = (list(spec.pivots), spec.target)
    return plan


def _vocabs(spec: SynthSpec, corpus) -> dict[str, Vocab]:
    train_c = corpus["train"]
    pivot = build_vocab(*[train_c.side(p) for p in spec.pivots])
    return {"src": build_vocab(train_c.side(spec.source)), "pivot": pivot,
            "tgt": build_vocab(train_c.side(spec.target))}


def train_models(cfg: ExperimentConfig, seed: int, cache_dir: Path) -> dict[str, TransformerModel]:
    spec = cfg.spec(seed)
    corpus = load_or_generate(spec, cache_dir)
    vocabs = _vocabs(spec, corpus)
    out = cache_dir / f"models-{cfg.digest(seed, spec.digest())}"
    out.mkdir(parents=True, exist_ok=True)
    models = {}
    for name, (srcs, tgt) in model_plan(spec).items():
        path = out / f"{name}.ckpt"
        if path.exists():
            models[name] = TransformerModel.load(path)
            continue
        sv = vocabs["src"] if srcs == [spec.source] else vocabs["pivot"]
        tv = vocabs["tgt"] if tgt == spec.target else vocabs["pivot"]
        mcfg = ModelConfig(src_vocab_size=len(sv), tgt_vocab_size=len(tv), num_encoders=len(srcs),
                           seed=seed, **cfg.model)
        tcfg = TrainConfig(seed=seed, **cfg.train)
        t0 = time.time()
        result = train(TransformerModel(mcfg, src_vocab=sv, tgt_vocab=tv),
                       encode_corpus(corpus["train"], srcs, tgt, sv, tv),
                       encode_corpus(corpus["dev"], srcs, tgt, sv, tv), tcfg)
        log.info("seed %d %s: %d steps in %.0fs, best dev BLEU %.2f", seed, name, result.steps,
                 time.time() - t0, result.best_bleu)
        write_curve(result.curve, out / f"{name}.curve.csv")
        result.model.save(path, {"name": name, "steps": result.steps})
        models[name] = result.model
    return models


def _al_direct(hyps, sources, k, max_steps):
    logs = [run_lockstep(ReplaySession(h, 1, k, max_steps), [s])[1][0] for h, s in zip(hyps, sources)]
    return corpus_al(logs, [len(s) for s in sources], [len(h) for h in hyps])


def evaluate_seed(cfg: ExperimentConfig, seed: int, models: dict[str, TransformerModel],
                  cache_dir: Path) -> dict:
    """BLEU/AL for every configuration the ordering criteria need."""
    spec = cfg.spec(seed)
    corpus = load_or_generate(spec, cache_dir)
    test = corpus["test"]
    direct = models["direct"]
    sources = [direct.src_vocab.encode(s) for s in test.side(spec.source)]
    refs = [direct.tgt_vocab.encode(t) for t in test.side(spec.target)]
    res: dict = {"seed": seed, "direct": {}, "pivot": {}}
    for k in (FULL, cfg.direct_k):
        hyps = batch_greedy_decode(direct, [sources], k=k, max_steps=cfg.max_steps)
        res["direct"]["full" if k is None else str(k)] = {
            "bleu": bleu(hyps, refs).bleu, "al": _al_direct(hyps, sources, k, cfg.max_steps)}
    configs = {p: ([models[f"s2p_{p}"]], models[f"p2t_{p}"]) for p in spec.pivots}
    configs["multi"] = ([models[f"s2p_{p}"] for p in spec.pivots], models["p2t_multi"])
    for label, (s2p, p2t) in configs.items():
        pc = PipelineConfig(s2p, p2t, cfg.max_steps)
        cells = {}
        for ks, kp in [(FULL, FULL)] + SIM_CELLS:
            hyps, pivots = batch_pipeline(pc, sources, ks, kp)
            logs = [replay_pipeline(pivots[i], hyps[i], sources[i], ks, kp, cfg.max_steps).source_log
                    for i in range(len(sources))]
            key = "full" if ks is None else f"{ks},{kp}"
            cells[key] = {"bleu": bleu(hyps, refs).bleu,
                          "al": corpus_al(logs, [len(s) for s in sources], [len(h) for h in hyps])}
        res["pivot"][label] = cells
    return res


def run_experiment(cfg: ExperimentConfig, cache_dir: str | Path) -> list[dict]:
    cache_dir = Path(cache_dir)
    cache_dir.mkdir(parents=True, exist_ok=True)
    results = []
    for seed in cfg.seeds:
        path = cache_dir / f"results-{cfg.digest(seed)}.json"
        if path.exists():
            results.append(json.loads(path.read_text()))
            continue
        models = train_models(cfg, seed, cache_dir)
        res = evaluate_seed(cfg, seed, models, cache_dir)
        path.write_text(json.dumps(res, indent=2, sort_keys=True) + "\n")
        results.append(res)
    return results


# -- criteria -------------------------------------------------------------------------
def full_sentence_ordering(res: dict, pivots: list[str], margin: float = 2.0) -> tuple[bool, str]:
    d = res["direct"]["full"]["bleu"]
    m = res["pivot"]["multi"]["full"]["bleu"]
    singles = {p: res["pivot"][p]["full"]["bleu"] for p in pivots}
    best = max(singles.values())
    ok = d > m > best and m - best >= margin
    detail = f"direct {d:.2f} > multi {m:.2f} > best single {best:.2f} " \
             f"({', '.join(f'{p} {v:.2f}' for p, v in singles.items())}); gap {m - best:.2f}"
    return ok, detail


def simultaneous_ordering(res: dict, pivots: list[str], direct_k: int = 8,
                          margin: float = 2.0) -> tuple[bool, str]:
    d = res["direct"][str(direct_k)]["bleu"]
    m = res["pivot"]["multi"]["4,4"]["bleu"]
    best = max(res["pivot"][p]["4,4"]["bleu"] for p in pivots)
    ok = m - best >= margin and (d - m) < (d - best)
    detail = f"(4,4) multi {m:.2f} vs best single {best:.2f} (gap {m - best:.2f}); " \
             f"direct k={direct_k} {d:.2f}: gaps {d - m:.2f} vs {d - best:.2f}"
    return ok, detail


def p2t_dominance(res: dict, pivots: list[str]) -> tuple[bool, str]:
    parts, ok = [], True
    for label in list(pivots) + ["multi"]:
        a = res["pivot"][label]["2,6"]["bleu"]
        b = res["pivot"][label]["6,2"]["bleu"]
        ok &= a >= b
        parts.append(f"{label} (2,6) {a:.2f} vs (6,2) {b:.2f}")
    return ok, "; ".join(parts)


def summarize(results: list[dict], pivots: list[str], direct_k: int = 8) -> dict[str, list[tuple[bool, str]]]:
    return {
        "full_sentence": [full_sentence_ordering(r, pivots) for r in results],
        "simultaneous": [simultaneous_ordering(r, pivots, direct_k) for r in results],
        "p2t_dominance": [p2t_dominance(r, pivots) for r in results],
    }


def results_as_report(results: list[dict]) -> list:
    """GridResult/DirectResult objects (one per seed and configuration) for emit_report."""
    out = []
    for r in results:
        s = r["seed"]
        ks = [None if k == "full" else int(k) for k in r["direct"]]
        out.append(DirectResult(f"direct-seed{s}", ks, [v["bleu"] for v in r["direct"].values()],
                                [v["al"] for v in r["direct"].values()]))
        for label, cells in r["pivot"].items():
            for key, v in cells.items():
                k_s, k_p = (None, None) if key == "full" else map(int, key.split(","))
                out.append(GridResult(f"{label}-seed{s}", [k_s], [k_p], [[v["bleu"]]], [[v["al"]]]))
    return out


def summary_markdown(results: list[dict], direct_k: int = 8, title: str = "Synthetic ordering experiment") -> str:
    """One BLEU table and one AL table per seed: rows are configurations, columns the evaluated cells."""
    cols = ["full"] + [f"{a},{b}" for a, b in SIM_CELLS]
    lines = [f"# {title}", ""]
    for r in results:
        for metric, name in (("bleu", "BLEU"), ("al", "average lagging")):
            lines += [f"## seed {r['seed']}: {name}", "",
                      "| config | " + " | ".join(f"({c})" if c != "full" else c for c in cols) + " |",
                      "|---" * (len(cols) + 1) + "|"]
            d = r["direct"]
            cells = [f"{d['full'][metric]:.2f}", f"{d[str(direct_k)][metric]:.2f} (k={direct_k})"]
            lines.append("| direct | " + " | ".join(cells + [""] * (len(cols) - 2)) + " |")
            for label, c in r["pivot"].items():
                lines.append(f"| {label} | " + " | ".join(f"{c[k][metric]:.2f}" for k in cols) + " |")
            lines.append("")
    return "\n".join(lines)


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="python -m multipivot.experiment",
                                 description="Train and evaluate the synthetic ordering experiment.")
    ap.add_argument("--cache", default=".multipivot-cache", help="cache directory for corpora, models, results")
    ap.add_argument("--seeds", default="0,1,2", help="comma-separated seeds")
    ap.add_argument("--max-steps", type=int, help="training steps per model")
    ap.add_argument("--out", help="write results.csv and results.md here")
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    cfg = ExperimentConfig(seeds=[int(s) for s in args.seeds.split(",")])
    if args.max_steps:
        cfg.train["max_steps"] = args.max_steps
    results = run_experiment(cfg, args.cache)
    pivots = cfg.spec(0).pivots
    for name, rows in summarize(results, pivots, cfg.direct_k).items():
        for r, (ok, detail) in zip(results, rows):
            print(f"{name} seed {r['seed']}: {'PASS' if ok else 'FAIL'}  {detail}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        emit_report(results_as_report(results), out / "results.csv")
        (out / "results.md").write_text(summary_markdown(results, cfg.direct_k))
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
