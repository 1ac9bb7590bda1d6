"""Encoder-decoder transformer with one or more encoders and gated context fusion.

The graph-building forward pass here is used for training and for batched
evaluation.  Token-by-token streaming inference lives in :mod:`.inference`.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ConfigurationError, ContractError, LengthError, ParseError
from .vocab import BOS, EOS, PAD, Vocab

NEG_INF = -1e30
CHECKPOINT_MAGIC = b"multipivot-checkpoint v1\n"


@dataclass(frozen=True)
class ModelConfig:
    src_vocab_size: int
    tgt_vocab_size: int
    num_encoders: int = 1
    layers: int = 2
    heads: int = 4
    hidden_size: int = 64
    ff_size: int = 256
    dropout: float = 0.1
    max_len: int = 64
    causal_encoder: bool = True
    share_encoder_across_sources: bool = True
    seed: int = 0

    def __post_init__(self):
        for name in ("src_vocab_size", "tgt_vocab_size", "num_encoders", "layers",
                     "heads", "hidden_size", "ff_size", "max_len"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be positive")
        if self.hidden_size % self.heads:
            raise ConfigurationError(
                f"hidden_size {self.hidden_size} not divisible by heads {self.heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigurationError("dropout must lie in [0, 1)")

    @property
    def head_dim(self) -> int:
        return self.hidden_size // self.heads

    @property
    def num_encoder_stacks(self) -> int:
        return 1 if self.share_encoder_across_sources else self.num_encoders

    def encoder_prefix(self, source_index: int) -> str:
        if not 0 <= source_index < self.num_encoders:
            raise ContractError(f"source index {source_index} outside [0, {self.num_encoders})")
        return "enc0" if self.share_encoder_across_sources else f"enc{source_index}"

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class GateParams:
    """Per-dimension fusion gate: ``W`` is (2h, h), ``b`` is (h,)."""

    W: Tensor
    b: Tensor


def sinusoid_table(length: int, h: int) -> np.ndarray:
    pos = np.arange(length)[:, None]
    i = np.arange(h)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / h)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


def _xavier(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def init_params(cfg: ModelConfig) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(cfg.seed)
    h, ff = cfg.hidden_size, cfg.ff_size
    p: dict[str, np.ndarray] = {}

    def attn(prefix):
        for n in ("q", "k", "v", "o"):
            p[f"{prefix}.w{n}"] = _xavier(rng, h, h)
            p[f"{prefix}.b{n}"] = np.zeros(h)

    def norm(prefix):
        p[f"{prefix}.g"] = np.ones(h)
        p[f"{prefix}.b"] = np.zeros(h)

    def feedforward(prefix):
        p[f"{prefix}.w1"] = _xavier(rng, h, ff)
        p[f"{prefix}.b1"] = np.zeros(ff)
        p[f"{prefix}.w2"] = _xavier(rng, ff, h)
        p[f"{prefix}.b2"] = np.zeros(h)

    for e in range(cfg.num_encoder_stacks):
        p[f"enc{e}.embed"] = rng.normal(0.0, h ** -0.5, size=(cfg.src_vocab_size, h))
        for l in range(cfg.layers):
            pre = f"enc{e}.layer{l}"
            norm(f"{pre}.ln1")
            attn(f"{pre}.self")
            norm(f"{pre}.ln2")
            feedforward(f"{pre}.ff")
        norm(f"enc{e}.ln_f")

    p["dec.embed"] = rng.normal(0.0, h ** -0.5, size=(cfg.tgt_vocab_size, h))
    for l in range(cfg.layers):
        pre = f"dec.layer{l}"
        norm(f"{pre}.ln1")
        attn(f"{pre}.self")
        norm(f"{pre}.ln2")
        attn(f"{pre}.cross")
        if cfg.num_encoders == 2:
            p[f"{pre}.gate.W"] = _xavier(rng, 2 * h, h)
            p[f"{pre}.gate.b"] = np.zeros(h)
        elif cfg.num_encoders > 2:
            for s in range(cfg.num_encoders):
                p[f"{pre}.gate{s}.W"] = _xavier(rng, 2 * h, h)
                p[f"{pre}.gate{s}.b"] = np.zeros(h)
        norm(f"{pre}.ln3")
        feedforward(f"{pre}.ff")
    norm("dec.ln_f")
    p["out.w"] = _xavier(rng, h, cfg.tgt_vocab_size)
    p["out.b"] = np.zeros(cfg.tgt_vocab_size)
    return p


def fuse_attention(contexts: Sequence, gate) -> Tensor:
    """Combine per-source attention readouts into one context.

    ``gate`` is a :class:`GateParams` for two sources, a list of them (one per
    source) for more, and ignored for a single source.  Contexts share their
    shape ``(..., h)``.
    """
    contexts = [ag.as_tensor(c) for c in contexts]
    if not contexts:
        raise ag.ShapeError("fuse_attention needs at least one context")
    shape = contexts[0].shape
    if any(c.shape != shape for c in contexts):
        raise ag.ShapeError(f"context shapes differ: {[c.shape for c in contexts]}")
    if len(contexts) == 1:
        return contexts[0]
    h = shape[-1]
    gates = [gate] if isinstance(gate, GateParams) else list(gate)
    expected = 1 if len(contexts) == 2 else len(contexts)
    if len(gates) != expected:
        raise ag.ShapeError(f"{len(contexts)} contexts need {expected} gate(s), got {len(gates)}")
    for g in gates:
        if g.W.shape != (2 * h, h) or g.b.shape != (h,):
            raise ag.ShapeError(
                f"gate shapes {g.W.shape}, {g.b.shape} do not match hidden size {h}")

    if len(contexts) == 2:
        a1, a2 = contexts
        w = ag.sigmoid(ag.concat([a1, a2], axis=-1) @ gates[0].W + gates[0].b)
        # a2 + w*(a1 - a2): exact when a1 == a2
        return a2 + w * (a1 - a2)

    # experimental N > 2: softmax across sources of per-dimension gate logits
    n = len(contexts)
    total = contexts[0]
    for c in contexts[1:]:
        total = total + c
    logits = []
    for i, c in enumerate(contexts):
        others = (total - c) * (1.0 / (n - 1))
        logits.append(ag.concat([c, others], axis=-1) @ gates[i].W + gates[i].b)
    weights = ag.softmax(ag.stack(logits, axis=0), axis=0)
    return ag.tsum(weights * ag.stack(contexts, axis=0), axis=0)


def _additive_mask(visible: np.ndarray) -> tuple[np.ndarray, np.ndarray | None]:
    """(B, Tq, Tk) boolean visibility -> additive mask and optional empty-row filter."""
    mask = np.where(visible, 0.0, NEG_INF)[:, None]
    any_visible = visible.any(axis=-1)
    empty = None if any_visible.all() else any_visible[:, None, :, None].astype(np.float64)
    return mask, empty


def pad_sequences(seqs: Sequence[Sequence[int]], min_width: int = 1) -> tuple[np.ndarray, np.ndarray]:
    lengths = np.array([len(s) for s in seqs], dtype=np.int64)
    width = max(min_width, int(lengths.max()) if len(seqs) else 0)
    out = np.full((len(seqs), width), PAD, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = s
    return out, lengths


class TransformerModel:
    """Parameters plus the differentiable forward pass."""

    def __init__(self, config: ModelConfig, params: dict[str, np.ndarray] | None = None,
                 src_vocab: Vocab | None = None, tgt_vocab: Vocab | None = None):
        self.config = config
        arrays = init_params(config) if params is None else params
        self.params: dict[str, Tensor] = {
            k: Tensor(np.array(v, dtype=np.float64), requires_grad=True) for k, v in arrays.items()
        }
        self.src_vocab = src_vocab
        self.tgt_vocab = tgt_vocab
        if src_vocab is not None and len(src_vocab) != config.src_vocab_size:
            raise ConfigurationError("source vocabulary size does not match config")
        if tgt_vocab is not None and len(tgt_vocab) != config.tgt_vocab_size:
            raise ConfigurationError("target vocabulary size does not match config")
        self._pe = sinusoid_table(config.max_len + 2, config.hidden_size)

    # -- parameter bookkeeping ------------------------------------------------
    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def num_parameters(self) -> int:
        return sum(t.size for t in self.params.values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        if set(state) != set(self.params):
            raise ConfigurationError("state dict keys do not match model parameters")
        for k, v in state.items():
            if v.shape != self.params[k].shape:
                raise ConfigurationError(f"shape mismatch for {k}: {v.shape} vs {self.params[k].shape}")
            self.params[k].data = np.array(v, dtype=np.float64)

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def copy(self) -> "TransformerModel":
        return TransformerModel(self.config, self.state_dict(), self.src_vocab, self.tgt_vocab)

    def gate(self, layer: int):
        n = self.config.num_encoders
        pre = f"dec.layer{layer}"
        if n == 1:
            return None
        if n == 2:
            return GateParams(self.params[f"{pre}.gate.W"], self.params[f"{pre}.gate.b"])
        return [GateParams(self.params[f"{pre}.gate{s}.W"], self.params[f"{pre}.gate{s}.b"])
                for s in range(n)]

    def single_source(self) -> "TransformerModel":
        """The same model with one encoder slot and no fusion gate."""
        if not self.config.share_encoder_across_sources:
            raise ConfigurationError("single_source view requires a shared encoder")
        cfg = replace(self.config, num_encoders=1)
        state = {k: v for k, v in self.state_dict().items() if ".gate" not in k}
        return TransformerModel(cfg, state, self.src_vocab, self.tgt_vocab)

    # -- forward pieces ---------------------------------------------------------
    def _attention(self, prefix: str, q_in: Tensor, kv_in: Tensor, mask: np.ndarray,
                   empty_rows: np.ndarray | None = None) -> Tensor:
        """Multi-head attention; ``mask`` is additive (B, 1, Tq, Tk).

        ``empty_rows`` (B, 1, Tq, 1) zeroes the readout of queries that see no key.
        """
        p = self.params
        cfg = self.config
        B, Tq, h = q_in.shape
        Tk = kv_in.shape[1]
        H, d = cfg.heads, cfg.head_dim
        q = ag.linear(q_in, p[f"{prefix}.wq"], p[f"{prefix}.bq"]) * (1.0 / math.sqrt(d))
        q = q.reshape(B, Tq, H, d).transpose(0, 2, 1, 3)
        k = ag.linear(kv_in, p[f"{prefix}.wk"], p[f"{prefix}.bk"]).reshape(B, Tk, H, d).transpose(0, 2, 3, 1)
        v = ag.linear(kv_in, p[f"{prefix}.wv"], p[f"{prefix}.bv"]).reshape(B, Tk, H, d).transpose(0, 2, 1, 3)
        probs = ag.softmax(q @ k + mask, axis=-1)
        if empty_rows is not None:
            probs = probs * empty_rows
        ctx = (probs @ v).transpose(0, 2, 1, 3).reshape(B, Tq, h)
        return ag.linear(ctx, p[f"{prefix}.wo"], p[f"{prefix}.bo"])

    def _ln(self, prefix: str, x: Tensor) -> Tensor:
        return ag.layer_norm(x, self.params[f"{prefix}.g"], self.params[f"{prefix}.b"])

    def _ff(self, prefix: str, x: Tensor) -> Tensor:
        p = self.params
        hid = ag.relu(ag.linear(x, p[f"{prefix}.w1"], p[f"{prefix}.b1"]))
        return ag.linear(hid, p[f"{prefix}.w2"], p[f"{prefix}.b2"])

    def _embed(self, table: str, ids: np.ndarray, rng) -> Tensor:
        T = ids.shape[1]
        x = ag.embedding(self.params[table], ids) * math.sqrt(self.config.hidden_size) + self._pe[:T]
        return ag.dropout(x, self.config.dropout, rng)

    def _check_ids(self, ids: np.ndarray, lengths: np.ndarray, vocab_size: int, what: str):
        if lengths.size and lengths.max() > self.config.max_len:
            raise LengthError(f"{what} length {int(lengths.max())} exceeds max_len {self.config.max_len}")
        if ids.size and (ids.min() < 0 or ids.max() >= vocab_size):
            raise IndexError(f"{what} token id outside [0, {vocab_size})")

    def encode_batch(self, ids: np.ndarray, lengths: np.ndarray, source_index: int = 0,
                     rng: np.random.Generator | None = None) -> Tensor:
        """Encode padded ``ids`` (B, L) into states (B, L, h)."""
        cfg = self.config
        self._check_ids(ids, lengths, cfg.src_vocab_size, "source")
        enc = cfg.encoder_prefix(source_index)
        B, L = ids.shape
        key_ok = np.arange(L)[None, :] < lengths[:, None]
        visible = np.broadcast_to(key_ok[:, None, :], (B, L, L))
        if cfg.causal_encoder:
            visible = visible & np.tril(np.ones((L, L), dtype=bool))[None]
        mask, empty = _additive_mask(visible)
        x = self._embed(f"{enc}.embed", ids, rng)
        for l in range(cfg.layers):
            pre = f"{enc}.layer{l}"
            y = self._ln(f"{pre}.ln1", x)
            x = x + ag.dropout(self._attention(f"{pre}.self", y, y, mask, empty), cfg.dropout, rng)
            x = x + ag.dropout(self._ff(f"{pre}.ff", self._ln(f"{pre}.ln2", x)), cfg.dropout, rng)
        return self._ln(f"{enc}.ln_f", x)

    def decode_batch(self, enc_states: Sequence[Tensor], src_lengths: Sequence[np.ndarray],
                     tgt_in: np.ndarray, k: int | None = None,
                     rng: np.random.Generator | None = None) -> Tensor:
        """Teacher-forced decoder logits (B, T, V).

        Decoder position ``p`` (0-based) attends to the first ``k + p`` rows of
        every source (all rows when ``k`` is None), matching wait-k decoding.
        """
        cfg = self.config
        if len(enc_states) != cfg.num_encoders:
            raise ContractError(f"model expects {cfg.num_encoders} sources, got {len(enc_states)}")
        B, T = tgt_in.shape
        if T > cfg.max_len + 1:
            raise LengthError(f"target prefix length {T} exceeds max_len {cfg.max_len}")
        self_mask = np.where(np.tril(np.ones((T, T), dtype=bool)), 0.0, NEG_INF)[None, None]
        cross_masks = []
        for enc, lens in zip(enc_states, src_lengths):
            L = enc.shape[1]
            vis = np.arange(L)[None, None, :] < lens[:, None, None]
            if k is not None:
                vis = vis & (np.arange(L)[None, :] < (k + np.arange(T))[:, None])[None]
            cross_masks.append(_additive_mask(np.broadcast_to(vis, (B, T, L))))

        x = self._embed("dec.embed", tgt_in, rng)
        for l in range(cfg.layers):
            pre = f"dec.layer{l}"
            y = self._ln(f"{pre}.ln1", x)
            x = x + ag.dropout(self._attention(f"{pre}.self", y, y, self_mask), cfg.dropout, rng)
            y = self._ln(f"{pre}.ln2", x)
            ctxs = [self._attention(f"{pre}.cross", y, enc, mask, empty)
                    for enc, (mask, empty) in zip(enc_states, cross_masks)]
            x = x + ag.dropout(fuse_attention(ctxs, self.gate(l)), cfg.dropout, rng)
            x = x + ag.dropout(self._ff(f"{pre}.ff", self._ln(f"{pre}.ln3", x)), cfg.dropout, rng)
        x = self._ln("dec.ln_f", x)
        return ag.linear(x, self.params["out.w"], self.params["out.b"])

    def forward_loss(self, sources: Sequence[Sequence[Sequence[int]]], targets: Sequence[Sequence[int]],
                     k: int | None = None, rng: np.random.Generator | None = None,
                     label_smoothing: float = 0.0) -> Tensor:
        """Teacher-forced loss: mean over sentences of per-token cross-entropy.

        ``sources`` holds one list of id sequences per encoder slot, aligned
        with ``targets``.  Each target is scored on its tokens plus EOS.
        """
        cfg = self.config
        if len(sources) != cfg.num_encoders:
            raise ContractError(f"model expects {cfg.num_encoders} sources, got {len(sources)}")
        counts = {len(s) for s in sources} | {len(targets)}
        if len(counts) != 1:
            raise ContractError(f"misaligned batch: example counts {sorted(counts)}")
        B = len(targets)
        enc_states, src_lengths = [], []
        for s, seqs in enumerate(sources):
            ids, lens = pad_sequences(seqs)
            enc_states.append(self.encode_batch(ids, lens, s, rng))
            src_lengths.append(lens)
        tgt, tlens = pad_sequences(targets)
        self._check_ids(tgt, tlens, cfg.tgt_vocab_size, "target")
        T = tgt.shape[1] + 1
        tgt_in = np.full((B, T), PAD, dtype=np.int64)
        tgt_in[:, 0] = BOS
        tgt_in[:, 1:] = tgt
        tgt_out = np.full((B, T), PAD, dtype=np.int64)
        tgt_out[:, :-1] = tgt
        tgt_out[np.arange(B), tlens] = EOS
        valid = np.arange(T)[None, :] <= tlens[:, None]
        weights = (valid / (tlens[:, None] + 1.0) / B).reshape(-1)

        logits = self.decode_batch(enc_states, src_lengths, tgt_in, k, rng)
        V = cfg.tgt_vocab_size
        return ag.cross_entropy_logits(logits.reshape(B * T, V), tgt_out.reshape(-1),
                                       label_smoothing, weights)

    # -- persistence ------------------------------------------------------------
    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for k in sorted(self.params):
            h.update(k.encode())
            h.update(self.params[k].data.tobytes())
        return h.hexdigest()[:16]

    def save(self, path: str | Path, meta: dict | None = None) -> None:
        Path(path).write_bytes(checkpoint_bytes(self, meta))

    @classmethod
    def load(cls, path: str | Path) -> "TransformerModel":
        return model_from_bytes(Path(path).read_bytes())


def checkpoint_bytes(model: TransformerModel, meta: dict | None = None) -> bytes:
    """Serialize config, vocabularies and float64 parameters (little endian)."""
    names = sorted(model.params)
    header = {
        "config": model.config.to_dict(),
        "src_vocab": None if model.src_vocab is None else model.src_vocab.tokens,
        "tgt_vocab": None if model.tgt_vocab is None else model.tgt_vocab.tokens,
        "params": [{"name": n, "shape": list(model.params[n].shape)} for n in names],
        "meta": meta or {},
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8") + b"\n"
    body = b"".join(model.params[n].data.astype("<f8").tobytes() for n in names)
    return CHECKPOINT_MAGIC + head + body


def model_from_bytes(blob: bytes) -> TransformerModel:
    if not blob.startswith(CHECKPOINT_MAGIC):
        raise ParseError("not a multipivot checkpoint")
    rest = blob[len(CHECKPOINT_MAGIC):]
    try:
        nl = rest.index(b"\n")
        header = json.loads(rest[:nl].decode("utf-8"))
        body = rest[nl + 1:]
        cfg = ModelConfig.from_dict(header["config"])
        params, offset = {}, 0
        for entry in header["params"]:
            n = int(np.prod(entry["shape"])) if entry["shape"] else 1
            arr = np.frombuffer(body, dtype="<f8", count=n, offset=offset).reshape(entry["shape"])
            params[entry["name"]] = arr.astype(np.float64)
            offset += 8 * n
    except (ValueError, KeyError, TypeError) as e:
        raise ParseError(f"corrupt checkpoint: {e}") from None
    if offset != len(body):
        raise ParseError("checkpoint body length does not match header")
    src = None if header["src_vocab"] is None else Vocab(header["src_vocab"])
    tgt = None if header["tgt_vocab"] is None else Vocab(header["tgt_vocab"])
    return TransformerModel(cfg, params, src, tgt)


def checkpoint_meta(path: str | Path) -> dict:
    blob = Path(path).read_bytes()
    rest = blob[len(CHECKPOINT_MAGIC):]
    return json.loads(rest[: rest.index(b"\n")].decode("utf-8")).get("meta", {})
