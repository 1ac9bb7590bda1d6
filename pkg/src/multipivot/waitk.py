"""Fixed wait-k simultaneous decoding.

Before writing target token ``i`` (1-based) the decoder must have read
``min(k + i - 1, len)`` tokens of every source.  Several sources are read in
lockstep: one READ event takes the next token from every stream that has not
ended yet.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigurationError, ContractError
from .inference import DecoderSession, EncoderSession
from .model import TransformerModel
from .vocab import BOS, EOS

READ = "READ"
WRITE = "WRITE"


def visible_prefix(k: int, i: int, src_len: int) -> int:
    """Source tokens visible when writing target token ``i`` under wait-``k``."""
    if k < 1 or i < 1:
        raise ContractError(f"wait-k needs k >= 1 and i >= 1 (got k={k}, i={i})")
    if src_len < 0:
        raise ContractError("source length must be >= 0")
    return min(k + i - 1, src_len)


@dataclass(frozen=True)
class WaitKSchedule:
    k: int
    src_len: int | None = None

    def __post_init__(self):
        if self.k < 1:
            raise ContractError("k must be >= 1")

    def reads_before_write(self, i: int) -> int:
        if self.src_len is None:
            return visible_prefix(self.k, i, self.k + i - 1)
        return visible_prefix(self.k, i, self.src_len)


@dataclass(frozen=True)
class Action:
    kind: str
    time: int
    token: int | None = None


@dataclass
class ActionLog:
    actions: list[Action] = field(default_factory=list)

    def read(self, time: int, token: int) -> None:
        self.actions.append(Action(READ, time, token))

    def write(self, time: int, token: int) -> None:
        self.actions.append(Action(WRITE, time, token))

    @property
    def num_reads(self) -> int:
        return sum(a.kind == READ for a in self.actions)

    @property
    def num_writes(self) -> int:
        return sum(a.kind == WRITE and a.token != EOS for a in self.actions)

    def pattern(self) -> str:
        return "".join("R" if a.kind == READ else "W" for a in self.actions)

    def delays(self) -> list[int]:
        """Number of READs preceding each non-EOS WRITE."""
        out, reads = [], 0
        for a in self.actions:
            if a.kind == READ:
                reads += 1
            elif a.token != EOS:
                out.append(reads)
        return out

    def __len__(self) -> int:
        return len(self.actions)


class WaitKSession:
    """READ/WRITE bookkeeping for ``n_streams`` lockstep sources.

    ``k=None`` means full-sentence: every stream must end before the first
    WRITE.  Subclasses supply :meth:`_on_read` and :meth:`_next_token`.
    """

    def __init__(self, n_streams: int, k: int | None, max_steps: int):
        if k is not None and k < 1:
            raise ContractError("k must be >= 1")
        self.n_streams = n_streams
        self.k = k
        self.max_steps = max_steps
        self.reads = [0] * n_streams
        self.ended = [False] * n_streams
        self.output: list[int] = []
        self.done = False
        self.truncated = False

    def required(self) -> float:
        i = len(self.output) + 1
        return float("inf") if self.k is None else self.k + i - 1

    def can_write(self) -> bool:
        if self.done:
            return False
        need = self.required()
        return all(e or r >= need for e, r in zip(self.ended, self.reads))

    def visible(self) -> list[int]:
        need = self.required()
        return [int(min(need, r)) for r in self.reads]

    def feed(self, stream: int, token: int) -> None:
        if self.ended[stream]:
            raise ContractError(f"stream {stream} already ended")
        self.reads[stream] += 1
        self._on_read(stream, token)

    def end(self, stream: int) -> None:
        self.ended[stream] = True

    def write(self) -> int:
        if not self.can_write():
            raise ContractError("WRITE not permitted by the wait-k schedule")
        if all(self.ended) and not any(self.reads):
            tok = EOS
        elif len(self.output) >= self.max_steps:
            self.done = self.truncated = True
            return EOS
        else:
            tok = self._next_token(self.visible())
        if tok == EOS:
            self.done = True
        else:
            self.output.append(tok)
            if len(self.output) >= self.max_steps and self._truncate_at_limit():
                self.done = self.truncated = True
        return tok

    def _truncate_at_limit(self) -> bool:
        return True

    def _on_read(self, stream: int, token: int) -> None:
        raise NotImplementedError

    def _next_token(self, visible: list[int]) -> int:
        raise NotImplementedError


class ModelSession(WaitKSession):
    """Greedy wait-k decoding with a causal-encoder model."""

    def __init__(self, model: TransformerModel, k: int | None, max_steps: int = 64):
        cfg = model.config
        if not cfg.causal_encoder:
            raise ConfigurationError(
                "simultaneous decoding needs a causal encoder (prefix states must not change)")
        super().__init__(cfg.num_encoders, k, max_steps)
        self.model = model
        self.encoders = [EncoderSession(model, s) for s in range(cfg.num_encoders)]
        self.decoder = DecoderSession(model)
        self._prev = BOS

    def _on_read(self, stream: int, token: int) -> None:
        row = self.encoders[stream].append(int(token))
        self.decoder.add_source_row(stream, row)

    def _next_token(self, visible: list[int]) -> int:
        logits = self.decoder.step(self._prev, visible)
        tok = int(np.argmax(logits))
        self._prev = tok
        return tok


class ReplaySession(WaitKSession):
    """Wait-k schedule that emits a precomputed output (for latency accounting)."""

    def __init__(self, tokens: Sequence[int], n_streams: int, k: int | None, max_steps: int = 64):
        super().__init__(n_streams, k, max_steps)
        self._tokens = list(tokens)

    def _on_read(self, stream: int, token: int) -> None:
        pass

    def _next_token(self, visible: list[int]) -> int:
        i = len(self.output)
        return self._tokens[i] if i < len(self._tokens) else EOS


def run_lockstep(session: WaitKSession, streams: Sequence[Iterable[int]]) -> tuple[list[int], list[ActionLog]]:
    """Drive ``session`` against token streams; return output and per-stream logs."""
    if len(streams) != session.n_streams:
        raise ContractError(f"session expects {session.n_streams} streams, got {len(streams)}")
    its = [iter(s) for s in streams]
    logs = [ActionLog() for _ in streams]
    t = 0
    while not session.done:
        if session.can_write():
            t += 1
            tok = session.write()
            for log in logs:
                log.write(t, tok)
            continue
        t += 1
        for s, it in enumerate(its):
            if session.ended[s]:
                continue
            try:
                tok = next(it)
            except StopIteration:
                session.end(s)
                continue
            session.feed(s, int(tok))
            logs[s].read(t, int(tok))
    return list(session.output), logs


def simultaneous_greedy_decode(model: TransformerModel, source_stream: Iterable[int], k: int,
                               max_steps: int = 64) -> tuple[list[int], ActionLog]:
    """Wait-k greedy decoding of one streamed source."""
    if model.config.num_encoders != 1:
        raise ContractError("use multi_source_simultaneous_decode for multi-encoder models")
    out, logs = run_lockstep(ModelSession(model, k, max_steps), [source_stream])
    return out, logs[0]


def multi_source_simultaneous_decode(model: TransformerModel, source_streams: Sequence[Iterable[int]],
                                     k: int, max_steps: int = 64) -> tuple[list[int], list[ActionLog]]:
    """Wait-k greedy decoding with one lockstep stream per encoder."""
    if len(source_streams) != model.config.num_encoders:
        raise ContractError(
            f"model has {model.config.num_encoders} encoders but {len(source_streams)} streams were given")
    return run_lockstep(ModelSession(model, k, max_steps), source_streams)
