"""Adam training with dev-BLEU early stopping and checkpoint averaging."""
from __future__ import annotations

import csv
import hashlib
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autograd as ag
from .corpus import Seq2SeqData, batch_iterator
from .errors import ConfigurationError, ContractError, TrainingError
from .evaluation import bleu
from .inference import batch_greedy_decode
from .model import TransformerModel

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr: float = 1e-3                 # peak learning rate
    warmup: int = 400
    batch_size: int = 64
    label_smoothing: float = 0.1
    eval_every: int = 200
    patience: int = 10
    avg_last: int = 10
    max_steps: int = 4000
    seed: int = 0
    # wait-k values sampled per batch; None trains full-sentence attention
    train_k: list[int | None] = field(default_factory=lambda: [None])
    eval_k: int | None = None
    clip_norm: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-9
    dev_limit: int | None = 500
    max_decode_steps: int = 64

    def __post_init__(self):
        for name in ("patience", "avg_last", "eval_every", "batch_size", "max_steps"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be >= 1")
        if self.lr < 0 or self.warmup < 0:
            raise ConfigurationError("lr and warmup must be >= 0")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ConfigurationError("label_smoothing must be in [0, 1)")
        if not self.train_k:
            raise ConfigurationError("train_k needs at least one value")
        self.train_k = [None if k is None else int(k) for k in self.train_k]
        if any(k is not None and k < 1 for k in self.train_k):
            raise ConfigurationError("train_k values must be >= 1 or null")

    def learning_rate(self, step: int) -> float:
        """Linear warmup to ``lr`` then inverse-square-root decay (step >= 1)."""
        if self.warmup == 0:
            return self.lr / math.sqrt(step)
        return self.lr * min(step / self.warmup, math.sqrt(self.warmup / step))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown training option(s): {', '.join(sorted(unknown))}")
        return cls(**d)


@dataclass
class Checkpoint:
    step: int
    params: dict[str, np.ndarray]
    dev_bleu: float


@dataclass
class TrainResult:
    model: TransformerModel            # average of the last ``avg_last`` checkpoints
    checkpoints: list[Checkpoint]
    curve: list[tuple[int, float, float]]   # (step, mean train loss since last eval, dev BLEU)
    steps: int
    stopped_early: bool

    @property
    def best_bleu(self) -> float:
        return max((c.dev_bleu for c in self.checkpoints), default=0.0)


class Adam:
    def __init__(self, params: Sequence[ag.Tensor], beta1: float, beta2: float, eps: float):
        self.params = list(params)
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0

    def step(self, lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def clip_gradients(params: Sequence[ag.Tensor], max_norm: float) -> float:
    """Scale gradients to global norm ``max_norm``; returns the norm before clipping."""
    total = math.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in params if p.grad is not None))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad *= scale
    return total


def average_checkpoints(checkpoints: Sequence) -> dict[str, np.ndarray]:
    """Elementwise mean of parameter snapshots (Checkpoint objects or dicts)."""
    snaps = [c.params if isinstance(c, Checkpoint) else c for c in checkpoints]
    if not snaps:
        raise ContractError("average_checkpoints needs at least one checkpoint")
    keys = set(snaps[0])
    for s in snaps[1:]:
        if set(s) != keys:
            raise ContractError("checkpoints have different parameter names")
        for k in keys:
            if np.shape(s[k]) != np.shape(snaps[0][k]):
                raise ContractError(f"shape mismatch for {k}: {np.shape(s[k])} vs {np.shape(snaps[0][k])}")
    out = {}
    for k in snaps[0]:
        acc = np.zeros(np.shape(snaps[0][k]))
        for s in snaps:
            acc += s[k]
        out[k] = acc / len(snaps)
    return out


def dev_bleu(model: TransformerModel, dev: Seq2SeqData, k: int | None = None, max_steps: int = 64) -> float:
    hyps = batch_greedy_decode(model, dev.sources, k=k, max_steps=max_steps)
    return bleu(hyps, dev.targets).bleu


def _batch_hash(batch) -> str:
    h = hashlib.sha256()
    for a in batch.sources + [batch.target]:
        h.update(np.ascontiguousarray(a).tobytes())
    return h.hexdigest()[:12]


def train(model: TransformerModel, train_data: Seq2SeqData, dev_data: Seq2SeqData,
          config: TrainConfig, checkpoint_dir: str | Path | None = None) -> TrainResult:
    """Train ``model`` in place; return the checkpoint-averaged model and history.

    Every ``eval_every`` steps the dev set is greedy-decoded, BLEU computed and
    a checkpoint kept.  Training stops once dev BLEU has failed to exceed its
    running maximum ``patience`` times in a row, or at ``max_steps``.
    """
    if len(train_data.sources) != model.config.num_encoders:
        raise ConfigurationError(f"model has {model.config.num_encoders} encoder(s), "
                                 f"training data has {len(train_data.sources)} source side(s)")
    if len(dev_data.sources) != len(train_data.sources):
        raise ConfigurationError("dev and training data have different source counts")
    if config.dev_limit is not None and len(dev_data) > config.dev_limit:
        dev_data = dev_data.select(range(config.dev_limit))
    rng = np.random.default_rng(config.seed)
    params = model.parameters()
    opt = Adam(params, config.beta1, config.beta2, config.eps)
    checkpoints: list[Checkpoint] = []
    curve: list[tuple[int, float, float]] = []
    best = -math.inf
    stale = 0
    step = 0
    epoch = 0
    losses: list[float] = []
    stopped_early = False
    if checkpoint_dir is not None:
        Path(checkpoint_dir).mkdir(parents=True, exist_ok=True)

    while step < config.max_steps and not stopped_early:
        for batch in batch_iterator(train_data, config.batch_size, seed=config.seed, epoch=epoch):
            step += 1
            k = config.train_k[int(rng.integers(len(config.train_k)))] if len(config.train_k) > 1 \
                else config.train_k[0]
            model.zero_grad()
            loss = model.forward_loss(batch.source_lists(), batch.target_lists(), k=k, rng=rng,
                                      label_smoothing=config.label_smoothing)
            value = float(loss.data)
            if not math.isfinite(value):
                raise TrainingError(f"non-finite loss {value} at step {step} (batch {_batch_hash(batch)})")
            ag.backward(loss)
            clip_gradients(params, config.clip_norm)
            opt.step(config.learning_rate(step))
            losses.append(value)

            if step % config.eval_every == 0:
                score = dev_bleu(model, dev_data, config.eval_k, config.max_decode_steps)
                mean_loss = float(np.mean(losses))
                losses = []
                curve.append((step, mean_loss, score))
                checkpoints.append(Checkpoint(step, model.state_dict(), score))
                if checkpoint_dir is not None:
                    model.save(Path(checkpoint_dir) / f"step{step:07d}.ckpt",
                               {"step": step, "dev_bleu": score})
                log.info("step %d loss %.4f dev BLEU %.2f", step, mean_loss, score)
                if score > best:
                    best = score
                    stale = 0
                else:
                    stale += 1
                    if stale >= config.patience:
                        stopped_early = True
                        break
            if step >= config.max_steps:
                break
        epoch += 1

    if not checkpoints:
        score = dev_bleu(model, dev_data, config.eval_k, config.max_decode_steps)
        curve.append((step, float(np.mean(losses)) if losses else float("nan"), score))
        checkpoints.append(Checkpoint(step, model.state_dict(), score))
    averaged = TransformerModel(model.config, average_checkpoints(checkpoints[-config.avg_last:]),
                                model.src_vocab, model.tgt_vocab)
    return TrainResult(averaged, checkpoints, curve, step, stopped_early)


def write_curve(curve: Sequence[tuple[int, float, float]], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "loss", "dev_bleu"])
        for step, loss, score in curve:
            w.writerow([step, repr(loss), repr(score)])
