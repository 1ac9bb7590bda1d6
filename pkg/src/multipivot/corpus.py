"""Synthetic N-way parallel corpora, TSV ingestion and batching.

The synthetic generator draws target sentences uniformly and derives the other
languages from them deterministically:

* each pivot collapses some groups of target tokens onto one representative
  (a many-to-one, lossy map); the groups differ per pivot so that all pivots
  together still identify every target token;
* optionally all pivots share a word order that differs from the target
  (keyed reversal of fixed-size chunks);
* the source relabels tokens through a permutation and applies keyed
  window-2 swaps on top of the pivot word order, so the source is an
  invertible function of the target.
"""
from __future__ import annotations

import csv
import hashlib
import itertools
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import ContractError, ParseError, SpecError
from .vocab import Vocab

SPLITS = ("train", "dev", "test")


@dataclass
class ParallelCorpus:
    """Examples aligned across ``languages`` (source, pivots..., target)."""

    languages: tuple[str, ...]
    examples: list[tuple[list[str], ...]]
    split: str = "train"

    def __post_init__(self):
        self.languages = tuple(self.languages)
        n = len(self.languages)
        for i, ex in enumerate(self.examples):
            if len(ex) != n:
                raise ContractError(f"example {i} has {len(ex)} sides, expected {n}")

    def __len__(self) -> int:
        return len(self.examples)

    def __eq__(self, other) -> bool:
        return (isinstance(other, ParallelCorpus) and self.languages == other.languages
                and self.split == other.split
                and [tuple(map(list, e)) for e in self.examples]
                == [tuple(map(list, e)) for e in other.examples])

    @property
    def source(self) -> str:
        return self.languages[0]

    @property
    def target(self) -> str:
        return self.languages[-1]

    @property
    def pivots(self) -> tuple[str, ...]:
        return self.languages[1:-1]

    def side(self, lang: str) -> list[list[str]]:
        i = self.languages.index(lang)
        return [list(ex[i]) for ex in self.examples]

    def subset(self, n: int) -> "ParallelCorpus":
        return ParallelCorpus(self.languages, self.examples[:n], self.split)


@dataclass
class SynthSpec:
    """Parameters of a synthetic N-way corpus.

    ``confusions`` holds, per pivot, a list of disjoint groups of target token
    indices that the pivot merges (each group maps to its first member).
    """

    vocab_size: int = 48
    min_len: int = 4
    max_len: int = 12
    sizes: dict[str, int] = field(default_factory=lambda: {"train": 20000, "dev": 500, "test": 1000})
    seed: int = 0
    source: str = "src"
    target: str = "tgt"
    pivots: list[str] = field(default_factory=lambda: ["pa", "pb"])
    confusions: list[list[list[int]]] = field(default_factory=list)
    # source transform: relabelling permutation seed, and ids that trigger a pair swap
    permute_source: bool = True
    swap_class: list[int] = field(default_factory=list)
    # pivot word order: chunk size for keyed reversal (0 = target order), trigger ids
    reorder_window: int = 0
    reorder_class: list[int] = field(default_factory=list)

    @classmethod
    def default(cls, seed: int = 0, vocab_size: int = 48, confused: int = 24,
                reorder_window: int = 0, **kw) -> "SynthSpec":
        """Two pivots with interleaved pairwise confusions over the first ``confused`` ids.

        Pivot A merges (0,1), (2,3), ...; pivot B merges (1,2), (3,4), ...
        Every id is then identified by its pair of representatives.
        """
        a = [[i, i + 1] for i in range(0, confused - 1, 2)]
        b = [[i, i + 1] for i in range(1, confused - 1, 2)]
        return cls(vocab_size=vocab_size, seed=seed, confusions=[a, b],
                   swap_class=list(range(0, vocab_size, 4)),
                   reorder_window=reorder_window,
                   reorder_class=list(range(1, vocab_size, 5)) if reorder_window else [], **kw)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        return cls(**d)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    # -- derived maps ------------------------------------------------------
    def representatives(self) -> list[list[int]]:
        """Per pivot, the representative id of every target id."""
        reps = []
        for groups in self.confusions:
            rep = list(range(self.vocab_size))
            for g in groups:
                for t in g:
                    rep[t] = g[0]
            reps.append(rep)
        return reps

    def permutation(self) -> list[int]:
        if not self.permute_source:
            return list(range(self.vocab_size))
        rng = np.random.default_rng([self.seed, 7919])
        return [int(x) for x in rng.permutation(self.vocab_size)]

    def validate(self) -> None:
        if self.vocab_size < 2 or not 1 <= self.min_len <= self.max_len:
            raise SpecError("need vocab_size >= 2 and 1 <= min_len <= max_len")
        if len(self.confusions) != len(self.pivots):
            raise SpecError(f"{len(self.pivots)} pivots but {len(self.confusions)} confusion partitions")
        for p, groups in enumerate(self.confusions):
            seen: set[int] = set()
            for g in groups:
                if len(g) < 2:
                    raise SpecError(f"pivot {p}: confusion group {g} needs at least two ids")
                for t in g:
                    if not 0 <= t < self.vocab_size:
                        raise SpecError(f"pivot {p}: id {t} outside vocabulary")
                    if t in seen:
                        raise SpecError(f"pivot {p}: id {t} appears in two groups")
                    seen.add(t)
        if self.pivots:
            signature = list(zip(*self.representatives()))
            if len(set(signature)) != self.vocab_size:
                clash = _first_clash(signature)
                raise SpecError(
                    f"confusion partitions are not complementary: ids {clash} are merged in every pivot")
        if self.reorder_window < 0:
            raise SpecError("reorder_window must be >= 0")


def _first_clash(signature):
    seen = {}
    for t, sig in enumerate(signature):
        if sig in seen:
            return (seen[sig], t)
        seen[sig] = t
    return None


# -- deterministic transforms -------------------------------------------------
def keyed_pair_swap(seq: Sequence[int], trigger: set[int]) -> list[int]:
    """Swap non-overlapping pairs that contain a trigger id (an involution)."""
    out = list(seq)
    for i in range(0, len(out) - 1, 2):
        if out[i] in trigger or out[i + 1] in trigger:
            out[i], out[i + 1] = out[i + 1], out[i]
    return out


def keyed_chunk_reverse(seq: Sequence[int], window: int, trigger: set[int]) -> list[int]:
    """Reverse non-overlapping chunks that contain a trigger id (an involution)."""
    if window <= 1:
        return list(seq)
    out = []
    for i in range(0, len(seq), window):
        chunk = list(seq[i:i + window])
        if any(t in trigger for t in chunk):
            chunk.reverse()
        out.extend(chunk)
    return out


class SynthLanguages:
    """Token-level maps between the synthetic languages of one spec."""

    def __init__(self, spec: SynthSpec):
        spec.validate()
        self.spec = spec
        self.reps = spec.representatives()
        self.perm = spec.permutation()
        self.swap_trigger = set(spec.swap_class)
        self.reorder_trigger = set(spec.reorder_class)

    def pivot_order(self, target_ids: Sequence[int]) -> list[int]:
        return keyed_chunk_reverse(target_ids, self.spec.reorder_window, self.reorder_trigger)

    def source_ids(self, target_ids: Sequence[int]) -> list[int]:
        swapped = keyed_pair_swap(self.pivot_order(target_ids), self.swap_trigger)
        return [self.perm[t] for t in swapped]

    def pivot_ids(self, p: int, target_ids: Sequence[int]) -> list[int]:
        return [self.reps[p][t] for t in self.pivot_order(target_ids)]

    def render(self, lang: str, ids: Sequence[int]) -> list[str]:
        return [f"s{i}" for i in ids] if lang == self.spec.source else [f"t{i}" for i in ids]


def generate_synthetic_nway(spec: SynthSpec) -> dict[str, ParallelCorpus]:
    """Generate train/dev/test corpora; identical output for identical specs."""
    langs = SynthLanguages(spec)
    languages = (spec.source, *spec.pivots, spec.target)
    out = {}
    for s_idx, split in enumerate(SPLITS):
        n = spec.sizes.get(split, 0)
        rng = np.random.default_rng([spec.seed, s_idx])
        lengths = rng.integers(spec.min_len, spec.max_len + 1, size=n)
        examples = []
        for length in lengths:
            tgt = [int(t) for t in rng.integers(0, spec.vocab_size, size=int(length))]
            sides = [langs.render(spec.source, langs.source_ids(tgt))]
            for p, name in enumerate(spec.pivots):
                sides.append(langs.render(name, langs.pivot_ids(p, tgt)))
            sides.append(langs.render(spec.target, tgt))
            examples.append(tuple(sides))
        out[split] = ParallelCorpus(languages, examples, split)
    return out


def _parse_ids(tokens: Sequence[str]) -> list[int]:
    return [int(t[1:]) for t in tokens]


def oracle_recover(spec: SynthSpec, pivot_sentences: dict[int, Sequence[str]]) -> list[str] | None:
    """Brute-force recovery of the target from the given pivots.

    Enumerates every target sentence consistent with the observed pivots
    (per-position candidate sets, checked by re-applying the forward
    transforms) and returns it when it is unique, else None.
    """
    langs = SynthLanguages(spec)
    obs = {p: _parse_ids(s) for p, s in pivot_sentences.items()}
    lengths = {len(s) for s in obs.values()}
    if len(lengths) != 1:
        return None
    (n,) = lengths
    cands = []
    for pos in range(n):
        c = [t for t in range(spec.vocab_size)
             if all(langs.reps[p][t] == obs[p][pos] for p in obs)]
        if not c:
            return None
        cands.append(c)
    found = None
    for combo in itertools.product(*cands):
        # combo is in pivot word order; reordering is an involution
        tgt = langs.pivot_order(combo)
        if all(langs.pivot_ids(p, tgt) == obs[p] for p in obs):
            if found is not None and found != tgt:
                return None
            found = tgt
    return None if found is None else langs.render(spec.target, found)


def oracle_accuracy(spec: SynthSpec, corpus: ParallelCorpus, pivots: Sequence[int]) -> float:
    """Fraction of examples whose target the oracle recovers exactly."""
    if not len(corpus):
        return 1.0
    ok = 0
    for ex in corpus.examples:
        got = oracle_recover(spec, {p: ex[1 + p] for p in pivots})
        ok += got == list(ex[-1])
    return ok / len(corpus)


# -- files ----------------------------------------------------------------------
def write_tsv(corpus: ParallelCorpus, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        f.write("\t".join(corpus.languages) + "\n")
        for ex in corpus.examples:
            f.write("\t".join(" ".join(side) for side in ex) + "\n")


def load_tsv(path: str | Path, columns: Sequence[str] | None = None, split: str | None = None) -> ParallelCorpus:
    """Read a UTF-8 TSV whose header names one language per column.

    ``columns`` selects (and orders) a subset of the header's languages.
    """
    path = Path(path)
    with open(path, encoding="utf-8", newline="") as f:
        reader = csv.reader(f, delimiter="\t", quoting=csv.QUOTE_NONE)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(f"{path}: empty file", 1) from None
        width = len(header)
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != width:
                raise ParseError(f"{path}: expected {width} columns, found {len(row)}", lineno)
            rows.append([cell.split() for cell in row])
    if columns is None:
        columns = header
    missing = [c for c in columns if c not in header]
    if missing:
        raise ParseError(f"{path}: columns {missing} not in header {header}", 1)
    idx = [header.index(c) for c in columns]
    examples = [tuple(row[i] for i in idx) for row in rows]
    return ParallelCorpus(tuple(columns), examples, split or path.stem)


def load_or_generate(spec: SynthSpec, cache_dir: str | Path) -> dict[str, ParallelCorpus]:
    """Generate the corpus once and cache it under ``cache_dir/<spec digest>``."""
    root = Path(cache_dir) / f"corpus-{spec.digest()}"
    if all((root / f"{s}.tsv").exists() for s in SPLITS):
        return {s: load_tsv(root / f"{s}.tsv", split=s) for s in SPLITS}
    data = generate_synthetic_nway(spec)
    root.mkdir(parents=True, exist_ok=True)
    for s, corpus in data.items():
        write_tsv(corpus, root / f"{s}.tsv")
    (root / "spec.json").write_text(json.dumps(spec.to_dict(), indent=2, sort_keys=True))
    return data


# -- batching -------------------------------------------------------------------
@dataclass
class Seq2SeqData:
    """Id-encoded examples: one list of sequences per source slot, plus targets."""

    sources: list[list[list[int]]]
    targets: list[list[int]]

    def __post_init__(self):
        if any(len(s) != len(self.targets) for s in self.sources):
            raise ContractError("source slots and targets differ in example count")

    def __len__(self) -> int:
        return len(self.targets)

    def select(self, idx: Sequence[int]) -> "Seq2SeqData":
        return Seq2SeqData([[s[i] for i in idx] for s in self.sources], [self.targets[i] for i in idx])


def encode_corpus(corpus: ParallelCorpus, source_langs: Sequence[str], target_lang: str,
                  src_vocab: Vocab, tgt_vocab: Vocab) -> Seq2SeqData:
    sources = [[src_vocab.encode(s) for s in corpus.side(lang)] for lang in source_langs]
    targets = [tgt_vocab.encode(s) for s in corpus.side(target_lang)]
    return Seq2SeqData(sources, targets)


@dataclass
class Batch:
    indices: np.ndarray
    sources: list[np.ndarray]        # (B, L_s), PAD-completed
    source_lengths: list[np.ndarray]
    target: np.ndarray               # (B, T), PAD-completed
    target_lengths: np.ndarray

    def __len__(self) -> int:
        return len(self.indices)

    def source_lists(self) -> list[list[list[int]]]:
        return [[row[:n].tolist() for row, n in zip(ids, lens)]
                for ids, lens in zip(self.sources, self.source_lengths)]

    def target_lists(self) -> list[list[int]]:
        return [row[:n].tolist() for row, n in zip(self.target, self.target_lengths)]


def batch_iterator(data: Seq2SeqData, batch_size: int, seed: int = 0, epoch: int = 0,
                   bucket_batches: int = 20) -> Iterator[Batch]:
    """Seeded, length-bucketed batches covering every example once.

    Examples are shuffled, cut into pools of ``bucket_batches`` batches,
    sorted by length inside each pool, batched, and the batch order shuffled.
    """
    from .model import pad_sequences

    if batch_size < 1:
        raise ContractError("batch size must be >= 1")
    if not len(data):
        raise ContractError("cannot batch an empty corpus")
    rng = np.random.default_rng([seed, epoch])
    order = rng.permutation(len(data))
    lengths = np.array([max([len(data.targets[i])] + [len(s[i]) for s in data.sources])
                        for i in range(len(data))])
    pool = batch_size * bucket_batches
    batches = []
    for start in range(0, len(order), pool):
        chunk = order[start:start + pool]
        chunk = chunk[np.argsort(lengths[chunk], kind="stable")]
        batches.extend(chunk[i:i + batch_size] for i in range(0, len(chunk), batch_size))
    for b in rng.permutation(len(batches)):
        idx = batches[b]
        srcs, slens = [], []
        for slot in data.sources:
            ids, lens = pad_sequences([slot[i] for i in idx])
            srcs.append(ids)
            slens.append(lens)
        tgt, tlens = pad_sequences([data.targets[i] for i in idx])
        yield Batch(idx, srcs, slens, tgt, tlens)
