"""BLEU, average lagging, the wait-k grid harness and report files."""
from __future__ import annotations

import csv
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Hashable, Sequence

from .errors import ConfigurationError, ContractError, ParseError
from .inference import batch_greedy_decode
from .model import TransformerModel
from .pipeline import PipelineConfig, replay_pipeline
from .waitk import ActionLog, ReplaySession, run_lockstep

Tokens = Sequence[Hashable]


@dataclass(frozen=True)
class BleuReport:
    bleu: float
    precisions: tuple[float, ...]
    brevity_penalty: float
    hyp_len: int
    ref_len: int
    matches: tuple[int, ...] = ()
    totals: tuple[int, ...] = ()


def _ngrams(tokens: Tokens, n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu(hypotheses: Sequence[Tokens], references: Sequence[Tokens], smoothing: bool = True,
         max_n: int = 4) -> BleuReport:
    """Corpus BLEU on a 0-100 scale with one reference per hypothesis.

    With ``smoothing`` an n-gram order (n >= 2) without any match scores
    ``1 / (total + 1)`` instead of zero.  Unigram precision is never smoothed.
    """
    if len(hypotheses) != len(references):
        raise ContractError(f"{len(hypotheses)} hypotheses but {len(references)} references")
    matches = [0] * max_n
    totals = [0] * max_n
    hyp_len = ref_len = 0
    for hyp, ref in zip(hypotheses, references):
        hyp, ref = list(hyp), list(ref)
        hyp_len += len(hyp)
        ref_len += len(ref)
        for n in range(1, max_n + 1):
            h = _ngrams(hyp, n)
            r = _ngrams(ref, n)
            matches[n - 1] += sum(min(c, r[g]) for g, c in h.items())
            totals[n - 1] += max(len(hyp) - n + 1, 0)
    precisions = []
    for n in range(max_n):
        if matches[n] == 0 and smoothing and n > 0:
            precisions.append(1.0 / (totals[n] + 1))
        else:
            precisions.append(matches[n] / totals[n] if totals[n] else 0.0)
    if hyp_len == 0:
        bp = 1.0    # score is zero anyway; keep BP inside (0, 1]
    elif hyp_len < ref_len:
        bp = math.exp(1.0 - ref_len / hyp_len)
    else:
        bp = 1.0
    if min(precisions) <= 0.0:
        score = 0.0
    else:
        score = 100.0 * bp * math.exp(sum(math.log(p) for p in precisions) / max_n)
    return BleuReport(min(score, 100.0), tuple(precisions), bp, hyp_len, ref_len,
                      tuple(matches), tuple(totals))


def average_lagging(log: ActionLog, src_len: int, tgt_len: int | None = None, cutoff: bool = True) -> float:
    """Average lagging of one sentence.

    ``d_i`` is the number of source tokens read before target token ``i``.
    AL averages ``d_i - (i - 1) * src_len / tgt_len`` over target positions up
    to the first one written after the whole source was read (all positions
    when ``cutoff`` is False).
    """
    if not log.actions:
        raise ContractError("average lagging of an empty action log")
    delays = log.delays()
    if tgt_len is None:
        tgt_len = len(delays)
    delays = delays[:tgt_len]
    if not delays:
        raise ContractError("average lagging needs at least one written target token")
    ratio = src_len / tgt_len
    tau = len(delays)
    if cutoff:
        for i, d in enumerate(delays, 1):
            if d >= src_len:
                tau = i
                break
    return sum(delays[i - 1] - (i - 1) * ratio for i in range(1, tau + 1)) / tau


def corpus_al(logs: Sequence[ActionLog], src_lens: Sequence[int], tgt_lens: Sequence[int]) -> float:
    """Mean AL over sentences with a non-empty output."""
    vals = [average_lagging(log, s, t) for log, s, t in zip(logs, src_lens, tgt_lens) if t > 0]
    return sum(vals) / len(vals) if vals else 0.0


def format_k(k: int | None) -> str:
    return "full" if k is None else str(k)


def parse_k_field(text: str) -> int | None:
    return None if text == "full" else int(text)


@dataclass
class GridResult:
    """BLEU/AL over ``(k_s2p, k_p2t)`` for one pivot configuration (None = full sentence)."""
    label: str
    k_s2p: list[int | None]
    k_p2t: list[int | None]
    bleu: list[list[float]]
    al: list[list[float]]

    def __post_init__(self):
        for name, m in (("bleu", self.bleu), ("al", self.al)):
            if len(m) != len(self.k_s2p) or any(len(row) != len(self.k_p2t) for row in m):
                raise ContractError(f"{name} matrix does not match the k axes")

    def cell(self, k_s2p: int | None, k_p2t: int | None) -> tuple[float, float]:
        i, j = self.k_s2p.index(k_s2p), self.k_p2t.index(k_p2t)
        return self.bleu[i][j], self.al[i][j]

    @property
    def num_cells(self) -> int:
        return len(self.k_s2p) * len(self.k_p2t)


@dataclass
class DirectResult:
    """BLEU/AL of a direct source-to-target model for each k."""
    label: str
    ks: list[int | None]
    bleu: list[float]
    al: list[float]

    def cell(self, k: int | None) -> tuple[float, float]:
        i = self.ks.index(k)
        return self.bleu[i], self.al[i]


def _require(models: dict, stage: str):
    m = models.get(stage)
    if m is None:
        raise ConfigurationError(f"missing checkpoint for stage '{stage}'")
    return m


def run_direct(label: str, model: TransformerModel | None, sources: Sequence[Sequence[int]],
               references: Sequence[Sequence[int]], ks: Sequence[int | None], max_steps: int = 64,
               smoothing: bool = True) -> DirectResult:
    """Direct wait-k decoding for every k (None = full sentence)."""
    model = _require({"direct": model}, "direct")
    bleus, als = [], []
    for k in ks:
        hyps = batch_greedy_decode(model, [sources], k=k, max_steps=max_steps)
        logs = [run_lockstep(ReplaySession(h, 1, k, max_steps), [s])[1][0] for h, s in zip(hyps, sources)]
        bleus.append(bleu(hyps, references, smoothing).bleu)
        als.append(corpus_al(logs, [len(s) for s in sources], [len(h) for h in hyps]))
    return DirectResult(label, list(ks), bleus, als)


def run_grid(label: str, models: dict, sources: Sequence[Sequence[int]], references: Sequence[Sequence[int]],
             k_values: Sequence[int | None], k_p2t_values: Sequence[int | None] | None = None,
             max_steps: int = 64, smoothing: bool = True) -> GridResult:
    """Cascade BLEU/AL for every ``(k_s2p, k_p2t)`` pair.

    ``models`` maps "s2p" to a list of source-to-pivot models and "p2t" to
    the pivot-to-target model.  Outputs equal the tick-scheduled pipeline;
    decoding is batched and the action logs are replayed for AL.
    """
    s2p = _require(models, "s2p")
    if any(m is None for m in s2p):
        raise ConfigurationError("missing checkpoint for stage 's2p'")
    p2t = _require(models, "p2t")
    config = PipelineConfig(list(s2p), p2t, max_steps)
    k_p2t_values = list(k_values if k_p2t_values is None else k_p2t_values)
    bleu_m, al_m = [], []
    for ks in k_values:
        pivots = [batch_greedy_decode(m, [sources], k=ks, max_steps=max_steps) for m in config.s2p]
        brow, arow = [], []
        for kp in k_p2t_values:
            hyps = batch_greedy_decode(p2t, pivots, k=kp, max_steps=max_steps)
            logs = [replay_pipeline([p[i] for p in pivots], hyps[i], sources[i], ks, kp, max_steps).source_log
                    for i in range(len(sources))]
            brow.append(bleu(hyps, references, smoothing).bleu)
            arow.append(corpus_al(logs, [len(s) for s in sources], [len(h) for h in hyps]))
        bleu_m.append(brow)
        al_m.append(arow)
    return GridResult(label, list(k_values), k_p2t_values, bleu_m, al_m)


# -- reports ---------------------------------------------------------------------
CSV_HEADER = ["config", "k_s2p", "k_p2t", "bleu", "al"]


def report_rows(results: Sequence) -> list[list[str]]:
    rows = []
    for r in results:
        if isinstance(r, GridResult):
            for i, ks in enumerate(r.k_s2p):
                for j, kp in enumerate(r.k_p2t):
                    rows.append([r.label, format_k(ks), format_k(kp), repr(r.bleu[i][j]), repr(r.al[i][j])])
        elif isinstance(r, DirectResult):
            for k, b, a in zip(r.ks, r.bleu, r.al):
                rows.append([r.label, "none", format_k(k), repr(b), repr(a)])
        elif isinstance(r, tuple) and len(r) == 2 and isinstance(r[1], BleuReport):
            rows.append([r[0], "full", "full", repr(r[1].bleu), ""])
        else:
            raise ContractError(f"cannot report object of type {type(r).__name__}")
    return rows


def _md_table(header: list[str], rows: list[list[float]], row_labels: list[str]) -> list[str]:
    lines = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    for label, row in zip(row_labels, rows):
        best = max(row) if row else None
        cells = [f"**{v:.2f}**" if v == best else f"{v:.2f}" for v in row]
        lines.append("| " + " | ".join([label] + cells) + " |")
    return lines


def markdown_report(results: Sequence, title: str = "Results") -> str:
    lines = [f"# {title}", ""]
    for r in results:
        if isinstance(r, GridResult):
            lines += [f"## {r.label}: BLEU (rows: S2P k, columns: P2T k)", ""]
            lines += _md_table(["S2P \\ P2T"] + [format_k(k) for k in r.k_p2t], r.bleu,
                               [format_k(k) for k in r.k_s2p])
            lines += ["", f"## {r.label}: average lagging", ""]
            lines += [("| " + " | ".join(["S2P \\ P2T"] + [format_k(k) for k in r.k_p2t]) + " |"),
                      "|" + "---|" * (len(r.k_p2t) + 1)]
            for ks, row in zip(r.k_s2p, r.al):
                lines.append("| " + " | ".join([format_k(ks)] + [f"{v:.2f}" for v in row]) + " |")
            lines.append("")
        elif isinstance(r, DirectResult):
            lines += [f"## {r.label}: direct model", ""]
            lines += _md_table(["metric"] + [format_k(k) for k in r.ks], [r.bleu], ["BLEU"])
            lines.append("| AL | " + " | ".join(f"{v:.2f}" for v in r.al) + " |")
            lines.append("")
        elif isinstance(r, tuple) and len(r) == 2 and isinstance(r[1], BleuReport):
            lines += [f"- {r[0]}: BLEU {r[1].bleu:.2f}", ""]
        else:
            raise ContractError(f"cannot report object of type {type(r).__name__}")
    return "\n".join(lines) + "\n"


def emit_report(results: Sequence, csv_path: str | Path, md_path: str | Path | None = None,
                title: str = "Results") -> list[list[str]]:
    """Write the CSV (and optionally markdown) report; returns the CSV data rows."""
    if not results:
        raise ContractError("emit_report needs at least one result")
    rows = report_rows(results)
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        w.writerows(rows)
    if md_path is not None:
        Path(md_path).write_text(markdown_report(results, title))
    return rows


def read_report_csv(path: str | Path) -> list:
    """Rebuild GridResult/DirectResult objects from a report CSV."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != CSV_HEADER:
            raise ParseError(f"expected header {','.join(CSV_HEADER)}", 1)
        grids: dict[str, dict] = {}
        directs: dict[str, dict] = {}
        order: list[tuple[str, str]] = []
        for lineno, row in enumerate(reader, 2):
            if len(row) != len(CSV_HEADER):
                raise ParseError(f"expected {len(CSV_HEADER)} fields, got {len(row)}", lineno)
            label, ks, kp, b, a = row
            try:
                kp_v = parse_k_field(kp)
                b_v = float(b)
                a_v = float(a) if a else float("nan")
                ks_v = None if ks in ("none",) else parse_k_field(ks)
            except ValueError:
                raise ParseError(f"malformed row {row}", lineno) from None
            if ks == "none":
                d = directs.setdefault(label, {"ks": [], "bleu": [], "al": []})
                if (label, "direct") not in order:
                    order.append((label, "direct"))
                d["ks"].append(kp_v)
                d["bleu"].append(b_v)
                d["al"].append(a_v)
            else:
                g = grids.setdefault(label, {"cells": {}, "ks": [], "kp": []})
                if (label, "grid") not in order:
                    order.append((label, "grid"))
                if ks_v not in g["ks"]:
                    g["ks"].append(ks_v)
                if kp_v not in g["kp"]:
                    g["kp"].append(kp_v)
                g["cells"][(ks_v, kp_v)] = (b_v, a_v)
    out = []
    for label, kind in order:
        if kind == "direct":
            d = directs[label]
            out.append(DirectResult(label, d["ks"], d["bleu"], d["al"]))
        else:
            g = grids[label]
            try:
                bl = [[g["cells"][(i, j)][0] for j in g["kp"]] for i in g["ks"]]
                al = [[g["cells"][(i, j)][1] for j in g["kp"]] for i in g["ks"]]
            except KeyError as e:
                raise ParseError(f"grid '{label}' is missing cell {e.args[0]}") from None
            out.append(GridResult(label, g["ks"], g["kp"], bl, al))
    return out
