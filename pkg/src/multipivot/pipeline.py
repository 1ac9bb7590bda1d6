"""Cascaded source -> pivot(s) -> target translation.

Each source-to-pivot (s2p) model translates the source into one pivot
language; a pivot-to-target (p2t) model reads all pivots.  In simultaneous
mode the stages run on a shared clock:

* every tick reads at most one source token and hands it to every s2p model;
* s2p models then write every token their wait-k schedule allows; those
  tokens reach the p2t queues at the end of the tick;
* the p2t model performs at most one lockstep READ (one item from every
  pivot queue that has not ended, only once all of them have an item) and
  then writes whatever its own schedule allows.

A finished pivot is forwarded as an end marker, so the p2t model learns the
pivot length exactly as a streaming decoder would.
"""
from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

from .errors import ConfigurationError, ContractError, MultipivotError
from .inference import batch_greedy_decode, translate
from .model import TransformerModel
from .waitk import READ, WRITE, ActionLog, ModelSession, ReplaySession, WaitKSession
from .vocab import EOS

END = -1


def effective_wait_k(k_s2p: int | None, k_p2t: int | None) -> int:
    """Source tokens read before the first target WRITE on a long enough source."""
    if k_s2p is None or k_p2t is None:
        raise ContractError("effective wait-k is undefined when a stage decodes full sentences")
    if k_s2p < 1 or k_p2t < 1:
        raise ContractError("wait-k values must be >= 1")
    return k_s2p + k_p2t


@dataclass
class PipelineConfig:
    s2p: list[TransformerModel]
    p2t: TransformerModel
    max_steps: int = 64

    def __post_init__(self):
        if not self.s2p:
            raise ConfigurationError("pipeline needs at least one source-to-pivot model")
        if self.p2t.config.num_encoders != len(self.s2p):
            raise ConfigurationError(
                f"pivot-to-target model has {self.p2t.config.num_encoders} encoder(s) "
                f"but {len(self.s2p)} source-to-pivot model(s) were given")
        src_vocab = self.s2p[0].src_vocab
        for i, m in enumerate(self.s2p):
            if m.config.num_encoders != 1:
                raise ConfigurationError(f"source-to-pivot model {i} must have a single encoder")
            if m.config.src_vocab_size != self.s2p[0].config.src_vocab_size or (
                    src_vocab is not None and m.src_vocab is not None and m.src_vocab != src_vocab):
                raise ConfigurationError(f"source-to-pivot model {i} has a different source vocabulary")
            if m.config.tgt_vocab_size != self.p2t.config.src_vocab_size:
                raise ConfigurationError(
                    f"source-to-pivot model {i} writes {m.config.tgt_vocab_size} ids but the "
                    f"pivot-to-target model reads {self.p2t.config.src_vocab_size}")
            if m.tgt_vocab is not None and self.p2t.src_vocab is not None and m.tgt_vocab != self.p2t.src_vocab:
                raise ConfigurationError(f"pivot vocabulary of model {i} does not match the pivot-to-target model")

    @property
    def num_pivots(self) -> int:
        return len(self.s2p)


@dataclass(frozen=True)
class TraceEvent:
    tick: int
    stage: str          # "src", "s2p{i}" or "p2t"
    kind: str           # READ or WRITE
    token: int


@dataclass
class PipelineRun:
    target: list[int]
    pivots: list[list[int]]
    source_log: ActionLog
    trace: list[TraceEvent] = field(default_factory=list)
    effective_k: int | None = None

    def stage_log(self, stage: str) -> ActionLog:
        """Actions of one stage ("src" reads, "s2p{i}" or "p2t") from the trace."""
        log = ActionLog()
        for ev in self.trace:
            if ev.stage == stage:
                (log.read if ev.kind == READ else log.write)(ev.tick, ev.token)
        return log

    def reads_before_first_write(self) -> int | None:
        d = self.source_log.delays()
        return d[0] if d else None


def full_sentence_pipeline(config: PipelineConfig, source: Sequence[int]) -> PipelineRun:
    """Translate the whole source into every pivot, then the pivots into the target."""
    pivots = [translate(m, [source], config.max_steps) for m in config.s2p]
    target = translate(config.p2t, pivots, config.max_steps)
    log = ActionLog()
    for t, tok in enumerate(source, 1):
        log.read(t, int(tok))
    for t, tok in enumerate(target, len(source) + 1):
        log.write(t, tok)
    return PipelineRun(target, pivots, log, effective_k=None)


def _run_ticks(s2p: list[WaitKSession], p2t: WaitKSession, source: Iterable[int],
               record_trace: bool) -> PipelineRun:
    n = len(s2p)
    queues = [deque() for _ in range(n)]
    pending: list[list[int]] = [[] for _ in range(n)]
    pivots: list[list[int]] = [[] for _ in range(n)]
    forwarded_end = [False] * n
    src = iter(source)
    src_ended = False
    log = ActionLog()
    trace: list[TraceEvent] = []
    tick = 0
    # generous bound: every tick either reads, writes or moves a queue forward
    limit = 10 * (sum(s.max_steps for s in s2p) + p2t.max_steps + 64)

    def p2t_writes():
        while p2t.can_write():
            tok = p2t.write()
            log.write(tick, tok)
            if record_trace:
                trace.append(TraceEvent(tick, "p2t", WRITE, tok))

    while not p2t.done:
        tick += 1
        if tick > limit:
            raise MultipivotError("pipeline scheduler made no progress")
        if not src_ended:
            try:
                tok = int(next(src))
            except StopIteration:
                src_ended = True
                for s in s2p:
                    if not s.ended[0]:
                        s.end(0)
            else:
                log.read(tick, tok)
                if record_trace:
                    trace.append(TraceEvent(tick, "src", READ, tok))
                for s in s2p:
                    if not s.done:
                        s.feed(0, tok)
        for i, s in enumerate(s2p):
            while s.can_write():
                tok = s.write()
                if record_trace:
                    trace.append(TraceEvent(tick, f"s2p{i}", WRITE, tok))
                if tok != EOS:
                    pending[i].append(tok)
                    pivots[i].append(tok)
            if s.done and not forwarded_end[i]:
                # EOS or truncation: tell the p2t stage this pivot is complete
                pending[i].append(END)
                forwarded_end[i] = True
        p2t_writes()
        if not p2t.done and not p2t.can_write():
            open_streams = [i for i in range(n) if not p2t.ended[i]]
            if open_streams and all(queues[i] for i in open_streams):
                for i in open_streams:
                    item = queues[i].popleft()
                    if item == END:
                        p2t.end(i)
                    else:
                        p2t.feed(i, item)
                        if record_trace:
                            trace.append(TraceEvent(tick, "p2t", READ, item))
                p2t_writes()
        for i in range(n):
            queues[i].extend(pending[i])
            pending[i].clear()
    return PipelineRun(list(p2t.output), pivots, log, trace)


def simultaneous_pipeline(config: PipelineConfig, source: Iterable[int], k_s2p: int | None,
                          k_p2t: int | None, record_trace: bool = True) -> PipelineRun:
    """Streamed cascade with wait-``k_s2p`` pivot models and a wait-``k_p2t`` target model."""
    s2p = [ModelSession(m, k_s2p, config.max_steps) for m in config.s2p]
    p2t = ModelSession(config.p2t, k_p2t, config.max_steps)
    run = _run_ticks(s2p, p2t, source, record_trace)
    if k_s2p is not None and k_p2t is not None:
        run.effective_k = effective_wait_k(k_s2p, k_p2t)
    return run


def replay_pipeline(pivots: Sequence[Sequence[int]], target: Sequence[int], source: Sequence[int],
                    k_s2p: int | None, k_p2t: int | None, max_steps: int = 64) -> PipelineRun:
    """Run the scheduler with precomputed outputs to recover the action log."""
    s2p = [ReplaySession(p, 1, k_s2p, max_steps) for p in pivots]
    p2t = ReplaySession(target, len(pivots), k_p2t, max_steps)
    return _run_ticks(s2p, p2t, source, False)


def batch_pipeline(config: PipelineConfig, sources: Sequence[Sequence[int]], k_s2p: int | None,
                   k_p2t: int | None, batch_size: int = 256) -> tuple[list[list[int]], list[list[list[int]]]]:
    """Targets and pivots for many sources with batched decoding.

    The outputs equal :func:`simultaneous_pipeline` because each stage's
    decisions depend only on how many tokens of its inputs are visible.
    """
    pivots = [batch_greedy_decode(m, [sources], k=k_s2p, max_steps=config.max_steps, batch_size=batch_size)
              for m in config.s2p]
    targets = batch_greedy_decode(config.p2t, pivots, k=k_p2t, max_steps=config.max_steps,
                                  batch_size=batch_size)
    return targets, [[p[i] for p in pivots] for i in range(len(sources))]


def parse_k(value) -> int | None:
    """Parse a wait-k value: a positive integer, or "full"/None for full-sentence."""
    if value is None or (isinstance(value, str) and value.strip().lower() == "full"):
        return None
    try:
        k = int(value)
    except (TypeError, ValueError):
        raise ConfigurationError(f"invalid wait-k value {value!r} (expected a positive integer or 'full')") from None
    if isinstance(value, float) or k < 1:
        raise ConfigurationError(f"invalid wait-k value {value!r} (expected a positive integer or 'full')")
    return k


def load_pipeline(path: str | Path, loader: Callable[[Path], TransformerModel] = TransformerModel.load
                  ) -> tuple[PipelineConfig, dict]:
    """Read a pipeline description::

        {"s2p": ["s2p_pa.ckpt", "s2p_pb.ckpt"], "p2t": "p2t_multi.ckpt",
         "k_s2p": 4, "k_p2t": "full", "pivots": ["pa", "pb"], "max_steps": 64}

    Relative checkpoint paths resolve against the file's directory.  Returns
    the config and the remaining settings; a k of "full" (or null) becomes None.
    """
    path = Path(path)
    try:
        spec = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ConfigurationError(f"{path}: invalid JSON ({e.msg} at line {e.lineno})") from None
    if not isinstance(spec, dict) or "s2p" not in spec or "p2t" not in spec:
        raise ConfigurationError(f"{path}: pipeline file needs 's2p' and 'p2t' entries")
    s2p_paths = spec["s2p"] if isinstance(spec["s2p"], list) else [spec["s2p"]]

    def resolve(p: str) -> Path:
        q = Path(p)
        return q if q.is_absolute() else path.parent / q

    s2p = [loader(resolve(p)) for p in s2p_paths]
    p2t = loader(resolve(spec["p2t"]))
    settings = {"k_s2p": parse_k(spec.get("k_s2p", "full")), "k_p2t": parse_k(spec.get("k_p2t", "full")),
                "pivots": list(spec.get("pivots", [f"pivot{i}" for i in range(len(s2p))]))}
    if len(settings["pivots"]) != len(s2p):
        raise ConfigurationError(f"{path}: 'pivots' names {len(settings['pivots'])} languages "
                                 f"for {len(s2p)} source-to-pivot models")
    return PipelineConfig(s2p, p2t, int(spec.get("max_steps", 64))), settings
