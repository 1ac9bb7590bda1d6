"""Token-at-a-time inference with cached encoder rows and decoder states.

:class:`EncoderSession` appends one source token at a time; with a causal
encoder each new row only attends to rows already computed, so earlier rows
never change.  :class:`DecoderSession` advances one target position per call,
attending to a caller-chosen number of rows of every source.  Full-sentence
decoding of causal models goes through the same two classes, so streaming and
full-sentence outputs agree bit for bit when all of the source is visible.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autograd as ag
from .autograd import no_grad, softmax_np
from .errors import ConfigurationError, ContractError, LengthError
from .model import TransformerModel, fuse_attention, pad_sequences
from .vocab import BOS, EOS


def _ln(x: np.ndarray, p: dict, prefix: str) -> np.ndarray:
    with no_grad():
        return ag.layer_norm(ag.Tensor(x), p[f"{prefix}.g"], p[f"{prefix}.b"]).data


def _ff(x: np.ndarray, p: dict, prefix: str) -> np.ndarray:
    hid = np.maximum(x @ p[f"{prefix}.w1"].data + p[f"{prefix}.b1"].data, 0.0)
    return hid @ p[f"{prefix}.w2"].data + p[f"{prefix}.b2"].data


class _Cache:
    """Growable (n, H, d) key/value rows."""

    def __init__(self, capacity: int, heads: int, d: int):
        self.k = np.zeros((capacity, heads, d))
        self.v = np.zeros((capacity, heads, d))
        self.n = 0

    def append(self, k: np.ndarray, v: np.ndarray) -> None:
        if self.n == len(self.k):
            grow = max(8, len(self.k))
            self.k = np.concatenate([self.k, np.zeros((grow,) + self.k.shape[1:])])
            self.v = np.concatenate([self.v, np.zeros((grow,) + self.v.shape[1:])])
        self.k[self.n] = k
        self.v[self.n] = v
        self.n += 1


def _attend(q: np.ndarray, cache: _Cache, upto: int, scale: float) -> np.ndarray:
    """Single-query multi-head attention over the first ``upto`` cached rows."""
    if upto == 0:
        return np.zeros(q.shape[0] * q.shape[1])
    k = cache.k[:upto]                                  # (t, H, d)
    scores = np.einsum("hd,thd->ht", q, k) * scale      # (H, t)
    probs = softmax_np(scores, axis=-1)
    return np.einsum("ht,thd->hd", probs, cache.v[:upto]).reshape(-1)


class EncoderSession:
    """Incremental causal encoder for one source slot."""

    def __init__(self, model: TransformerModel, source_index: int = 0):
        cfg = model.config
        if not cfg.causal_encoder:
            raise ConfigurationError("incremental encoding needs a causal (unidirectional) encoder")
        self.model = model
        self.prefix = cfg.encoder_prefix(source_index)
        self.caches = [_Cache(16, cfg.heads, cfg.head_dim) for _ in range(cfg.layers)]
        self.rows: list[np.ndarray] = []

    def __len__(self) -> int:
        return len(self.rows)

    @property
    def states(self) -> np.ndarray:
        h = self.model.config.hidden_size
        return np.stack(self.rows) if self.rows else np.zeros((0, h))

    def append(self, token: int) -> np.ndarray:
        m = self.model
        cfg, p = m.config, m.params
        pos = len(self.rows)
        if pos >= cfg.max_len:
            raise LengthError(f"source longer than max_len {cfg.max_len}")
        if not 0 <= token < cfg.src_vocab_size:
            raise IndexError(f"source token id {token} outside [0, {cfg.src_vocab_size})")
        H, d = cfg.heads, cfg.head_dim
        scale = 1.0 / math.sqrt(d)
        x = p[f"{self.prefix}.embed"].data[token] * math.sqrt(cfg.hidden_size) + m._pe[pos]
        for l, cache in enumerate(self.caches):
            pre = f"{self.prefix}.layer{l}.self"
            y = _ln(x, p, f"{self.prefix}.layer{l}.ln1")
            q = (y @ p[f"{pre}.wq"].data + p[f"{pre}.bq"].data).reshape(H, d)
            cache.append((y @ p[f"{pre}.wk"].data + p[f"{pre}.bk"].data).reshape(H, d),
                         (y @ p[f"{pre}.wv"].data + p[f"{pre}.bv"].data).reshape(H, d))
            ctx = _attend(q, cache, cache.n, scale)
            x = x + ctx @ p[f"{pre}.wo"].data + p[f"{pre}.bo"].data
            x = x + _ff(_ln(x, p, f"{self.prefix}.layer{l}.ln2"), p, f"{self.prefix}.layer{l}.ff")
        row = _ln(x, p, f"{self.prefix}.ln_f")
        self.rows.append(row)
        return row


class DecoderSession:
    """Incremental decoder over ``num_encoders`` growing sources."""

    def __init__(self, model: TransformerModel):
        cfg = model.config
        self.model = model
        self.n_sources = cfg.num_encoders
        self.cross = [[_Cache(16, cfg.heads, cfg.head_dim) for _ in range(cfg.num_encoders)]
                      for _ in range(cfg.layers)]
        self.selfc = [_Cache(16, cfg.heads, cfg.head_dim) for _ in range(cfg.layers)]
        self.rows_added = [0] * cfg.num_encoders
        self.position = 0

    def add_source_row(self, source: int, row: np.ndarray) -> None:
        cfg, p = self.model.config, self.model.params
        H, d = cfg.heads, cfg.head_dim
        for l in range(cfg.layers):
            pre = f"dec.layer{l}.cross"
            self.cross[l][source].append((row @ p[f"{pre}.wk"].data + p[f"{pre}.bk"].data).reshape(H, d),
                                         (row @ p[f"{pre}.wv"].data + p[f"{pre}.bv"].data).reshape(H, d))
        self.rows_added[source] += 1

    def step(self, token: int, visible: Sequence[int] | None = None) -> np.ndarray:
        """Feed the token at the current position; return next-token logits.

        ``visible[s]`` limits attention to the first rows of source ``s``.
        """
        m = self.model
        cfg, p = m.config, m.params
        if visible is None:
            visible = self.rows_added
        if len(visible) != self.n_sources:
            raise ContractError(f"expected {self.n_sources} visibility counts, got {len(visible)}")
        visible = [min(v, n) for v, n in zip(visible, self.rows_added)]
        if not any(visible):
            raise ContractError("decode step needs at least one visible encoder row")
        if self.position > cfg.max_len:
            raise LengthError(f"target longer than max_len {cfg.max_len}")
        H, d = cfg.heads, cfg.head_dim
        scale = 1.0 / math.sqrt(d)
        x = p["dec.embed"].data[token] * math.sqrt(cfg.hidden_size) + m._pe[self.position]
        with no_grad():
            for l in range(cfg.layers):
                pre = f"dec.layer{l}"
                y = _ln(x, p, f"{pre}.ln1")
                cache = self.selfc[l]
                q = (y @ p[f"{pre}.self.wq"].data + p[f"{pre}.self.bq"].data).reshape(H, d)
                cache.append((y @ p[f"{pre}.self.wk"].data + p[f"{pre}.self.bk"].data).reshape(H, d),
                             (y @ p[f"{pre}.self.wv"].data + p[f"{pre}.self.bv"].data).reshape(H, d))
                ctx = _attend(q, cache, cache.n, scale)
                x = x + ctx @ p[f"{pre}.self.wo"].data + p[f"{pre}.self.bo"].data
                y = _ln(x, p, f"{pre}.ln2")
                q = (y @ p[f"{pre}.cross.wq"].data + p[f"{pre}.cross.bq"].data).reshape(H, d)
                wo, bo = p[f"{pre}.cross.wo"].data, p[f"{pre}.cross.bo"].data
                ctxs = [(_attend(q, self.cross[l][s], visible[s], scale) @ wo + bo)[None]
                        for s in range(self.n_sources)]
                x = x + fuse_attention(ctxs, m.gate(l)).data[0]
                x = x + _ff(_ln(x, p, f"{pre}.ln3"), p, f"{pre}.ff")
            x = _ln(x, p, "dec.ln_f")
        self.position += 1
        return x @ p["out.w"].data + p["out.b"].data


# -- full-sentence helpers ------------------------------------------------------
def encode(model: TransformerModel, tokens: Sequence[int], source_index: int = 0) -> np.ndarray:
    """Encoder states (len(tokens), h) for one source sentence."""
    cfg = model.config
    if len(tokens) > cfg.max_len:
        raise LengthError(f"source length {len(tokens)} exceeds max_len {cfg.max_len}")
    if cfg.causal_encoder:
        session = EncoderSession(model, source_index)
        for t in tokens:
            session.append(int(t))
        return session.states
    if not len(tokens):
        return np.zeros((0, cfg.hidden_size))
    with no_grad():
        ids, lens = pad_sequences([list(tokens)])
        return model.encode_batch(ids, lens, source_index).data[0]


def _session_for(model: TransformerModel, enc: Sequence[np.ndarray]) -> DecoderSession:
    if len(enc) != model.config.num_encoders:
        raise ContractError(f"model expects {model.config.num_encoders} encoder states, got {len(enc)}")
    session = DecoderSession(model)
    for s, states in enumerate(enc):
        for row in states:
            session.add_source_row(s, row)
    return session


def decode_step(model: TransformerModel, enc: Sequence[np.ndarray], prefix: Sequence[int],
                visible=None) -> np.ndarray:
    """Next-token logits after ``prefix`` (which starts with BOS).

    ``visible`` limits the encoder rows each prefix position may attend to:
    None (all rows), an int (same limit everywhere), or per-position lists of
    per-source counts.
    """
    if not prefix or prefix[0] != BOS:
        raise ContractError("decoder prefix must start with BOS")
    if all(len(e) == 0 for e in enc):
        raise ContractError("decode_step needs non-empty encoder states")
    session = _session_for(model, enc)
    logits = None
    for pos, tok in enumerate(prefix):
        if visible is None:
            vis = None
        elif isinstance(visible, int):
            vis = [visible] * len(enc)
        else:
            vis = visible[pos]
        logits = session.step(int(tok), vis)
    return logits


@dataclass
class DecodeResult:
    tokens: list[int]
    truncated: bool

    def __iter__(self):
        return iter((self.tokens, self.truncated))


def greedy_decode(model: TransformerModel, enc: Sequence[np.ndarray], max_steps: int = 64) -> DecodeResult:
    """Full-sentence greedy decoding; ties go to the lowest token id."""
    if all(len(e) == 0 for e in enc):
        raise ContractError("greedy_decode needs non-empty encoder states")
    session = _session_for(model, enc)
    out: list[int] = []
    tok = BOS
    while len(out) < max_steps:
        nxt = int(np.argmax(session.step(tok)))
        if nxt == EOS:
            return DecodeResult(out, False)
        out.append(nxt)
        tok = nxt
    return DecodeResult(out, True)


def translate(model: TransformerModel, sources: Sequence[Sequence[int]], max_steps: int = 64) -> list[int]:
    """Full-sentence translation of one example (one id sequence per source slot)."""
    if all(len(s) == 0 for s in sources):
        return []
    enc = [encode(model, s, i) for i, s in enumerate(sources)]
    return greedy_decode(model, enc, max_steps).tokens


def batch_greedy_decode(model: TransformerModel, sources: Sequence[Sequence[Sequence[int]]],
                        k: int | None = None, max_steps: int | None = None,
                        batch_size: int = 256) -> list[list[int]]:
    """Greedy wait-k (or full-sentence, ``k=None``) decoding of many examples at once.

    Uses the batched forward pass with the same visibility rule as streaming
    decoding: target position ``p`` sees ``min(k + p, len)`` rows per source.
    """
    cfg = model.config
    n = len(sources[0])
    limit = cfg.max_len if max_steps is None else min(max_steps, cfg.max_len)
    results: list[list[int]] = [[] for _ in range(n)]
    with no_grad():
        for start in range(0, n, batch_size):
            idx = list(range(start, min(n, start + batch_size)))
            enc, lens = [], []
            for s, slot in enumerate(sources):
                ids, ln = pad_sequences([list(slot[i]) for i in idx])
                enc.append(model.encode_batch(ids, ln, s))
                lens.append(ln)
            B = len(idx)
            alive = np.array([any(lens[s][b] > 0 for s in range(len(sources))) for b in range(B)])
            prefix = np.full((B, 1), BOS, dtype=np.int64)
            done = ~alive
            for _ in range(limit + 1):
                if done.all():
                    break
                logits = model.decode_batch(enc, lens, prefix, k).data[:, -1]
                nxt = np.argmax(logits, axis=1)
                for b in np.flatnonzero(~done):
                    if nxt[b] == EOS or len(results[idx[b]]) >= limit:
                        done[b] = True
                    else:
                        results[idx[b]].append(int(nxt[b]))
                if prefix.shape[1] > limit:
                    break
                prefix = np.concatenate([prefix, nxt[:, None]], axis=1)
    return results
