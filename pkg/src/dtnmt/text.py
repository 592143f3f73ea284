"""Corpus ingestion, BPE segmentation, vocabularies and batching.

Segmentation convention: merges are learned and applied inside words only,
and the word-final subword carries the ``</w>`` suffix.  ``"aaa"`` under the
single rule ``(a, a)`` segments to ``["aa", "a</w>"]``.  De-segmentation
concatenates subwords and turns each ``</w>`` into a word boundary.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np
import torch

from .errors import ContractError, MissingArtifact
from .numeric import Rng

EOW = "</w>"

PAD, BOS, EOS, UNK = 0, 1, 2, 3
SPECIALS = ("<pad>", "<s>", "</s>", "<unk>")
NON_CONTENT = frozenset({PAD, BOS, EOS})

SPLITS = ("train", "valid1", "valid2", "test")


# --------------------------------------------------------------------------- BPE


@dataclass(frozen=True)
class BpeModel:
    merges: tuple[tuple[str, str], ...] = ()

    @property
    def ranks(self) -> dict[tuple[str, str], int]:
        return {pair: i for i, pair in enumerate(self.merges)}

    def save(self, path) -> None:
        Path(path).write_text("".join(f"{a} {b}\n" for a, b in self.merges), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "BpeModel":
        path = Path(path)
        if not path.exists():
            raise MissingArtifact(f"BPE model not found: {path}")
        merges = []
        for line in path.read_text(encoding="utf-8").splitlines():
            if line.strip():
                a, b = line.split(" ")
                merges.append((a, b))
        return cls(tuple(merges))


def _merge_word(symbols: tuple[str, ...], pair: tuple[str, str]) -> tuple[str, ...]:
    out = []
    i = 0
    while i < len(symbols):
        if i + 1 < len(symbols) and symbols[i] == pair[0] and symbols[i + 1] == pair[1]:
            out.append(symbols[i] + symbols[i + 1])
            i += 2
        else:
            out.append(symbols[i])
            i += 1
    return tuple(out)


def learn_bpe(lines: Iterable[str], num_merges: int) -> BpeModel:
    """Greedy BPE: most frequent adjacent pair per step, ties to the smallest pair."""
    word_freq = Counter(w for line in lines for w in line.split())
    if not word_freq:
        raise ContractError("cannot learn BPE from an empty corpus")
    words = {tuple(w): c for w, c in word_freq.items()}
    merges: list[tuple[str, str]] = []
    for _ in range(num_merges):
        pairs: Counter = Counter()
        for sym, c in words.items():
            for a, b in zip(sym, sym[1:]):
                pairs[a, b] += c
        if not pairs:
            break
        best = min(pairs.items(), key=lambda kv: (-kv[1], kv[0]))[0]
        merges.append(best)
        words = {_merge_word(sym, best): c for sym, c in words.items()}
    return BpeModel(tuple(merges))


def _segment_word(word: str, ranks: dict[tuple[str, str], int]) -> list[str]:
    symbols = tuple(word)
    while len(symbols) > 1:
        candidates = [(ranks[p], p) for p in zip(symbols, symbols[1:]) if p in ranks]
        if not candidates:
            break
        symbols = _merge_word(symbols, min(candidates)[1])
    out = list(symbols)
    out[-1] += EOW
    return out


def apply_bpe(sentence: str, model: BpeModel) -> list[str]:
    ranks = model.ranks
    return [sub for word in sentence.split() for sub in _segment_word(word, ranks)]


def desegment(tokens: Iterable[str]) -> str:
    return "".join(tokens).replace(EOW, " ").strip()


# ------------------------------------------------------------------------- vocab


class Vocab:
    """Dense token <-> id map with the four specials pinned to ids 0-3."""

    def __init__(self, tokens: Sequence[str], freqs: Sequence[int] | None = None):
        tokens = list(tokens)
        if tuple(tokens[:4]) != SPECIALS:
            tokens = list(SPECIALS) + [t for t in tokens if t not in SPECIALS]
        if len(set(tokens)) != len(tokens):
            raise ContractError("duplicate tokens in vocabulary")
        self.tokens = tokens
        self.freqs = list(freqs) if freqs is not None else [0] * len(tokens)
        if len(self.freqs) != len(self.tokens):
            raise ContractError("frequency list does not match tokens")
        self.index = {t: i for i, t in enumerate(tokens)}

    def __len__(self):
        return len(self.tokens)

    def __eq__(self, other):
        return isinstance(other, Vocab) and self.tokens == other.tokens

    def id(self, token: str) -> int:
        return self.index.get(token, UNK)

    def token(self, i: int) -> str:
        return self.tokens[i]

    def encode(self, subwords: Iterable[str]) -> list[int]:
        return [self.id(t) for t in subwords]

    def decode(self, ids: Iterable[int]) -> str:
        """Ids to de-segmented text; specials other than UNK are dropped."""
        toks = []
        for i in ids:
            i = int(i)
            if i == EOS:
                break
            if i in NON_CONTENT:
                continue
            # an UNK has lost its boundary marker; render it as a whole word
            toks.append(self.tokens[i] + EOW if i == UNK else self.tokens[i])
        return desegment(toks)

    def save(self, path) -> None:
        Path(path).write_text(
            "".join(f"{t}\t{i}\t{f}\n" for i, (t, f) in enumerate(zip(self.tokens, self.freqs))),
            encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocab":
        path = Path(path)
        if not path.exists():
            raise MissingArtifact(f"vocabulary not found: {path}")
        rows = [line.split("\t") for line in path.read_text(encoding="utf-8").splitlines() if line]
        rows.sort(key=lambda r: int(r[1]))
        if [int(r[1]) for r in rows] != list(range(len(rows))):
            raise ContractError(f"vocabulary ids in {path} are not dense")
        return cls([r[0] for r in rows], [int(r[2]) for r in rows])


def build_vocab(segmented: Iterable[Sequence[str]], min_count: int = 1) -> Vocab:
    counts = Counter(t for sent in segmented for t in sent)
    kept = sorted((t for t, c in counts.items() if c >= min_count and t not in SPECIALS),
                  key=lambda t: (-counts[t], t))
    return Vocab(list(SPECIALS) + kept, [0] * 4 + [counts[t] for t in kept])


@dataclass
class Codec:
    """BPE model plus vocabulary for one language side."""

    bpe: BpeModel
    vocab: Vocab

    def encode(self, line: str) -> list[int]:
        # a literal "<unk>" word is what decode() writes for UNK; map it back
        ids = []
        for word in line.split():
            if word == SPECIALS[UNK]:
                ids.append(UNK)
            else:
                ids.extend(self.vocab.encode(apply_bpe(word, self.bpe)))
        return ids

    def decode(self, ids: Iterable[int]) -> str:
        return self.vocab.decode(ids)


# ------------------------------------------------------------------------ corpus


@dataclass
class ParallelCorpus:
    src: list[list[int]]
    tgt: list[list[int]]
    split: str = "train"

    def __post_init__(self):
        if len(self.src) != len(self.tgt):
            raise ContractError(f"{len(self.src)} source vs {len(self.tgt)} target sentences")
        for s, t in zip(self.src, self.tgt):
            if not s or not t:
                raise ContractError("empty sentence in parallel corpus")

    def __len__(self):
        return len(self.src)

    def check_ids(self, src_size: int, tgt_size: int) -> None:
        for side, size in ((self.src, src_size), (self.tgt, tgt_size)):
            if any(i < 0 or i >= size for s in side for i in s):
                raise ContractError("token id outside vocabulary")

    def with_src(self, src: list[list[int]], split: str | None = None) -> "ParallelCorpus":
        return ParallelCorpus(src, self.tgt, split or self.split)

    def num_src_tokens(self) -> int:
        return sum(len(s) for s in self.src)


def read_lines(path) -> list[str]:
    path = Path(path)
    if not path.exists():
        raise MissingArtifact(f"corpus file not found: {path}")
    return path.read_text(encoding="utf-8").splitlines()


def write_lines(path, lines: Iterable[str]) -> None:
    Path(path).write_text("".join(line + "\n" for line in lines), encoding="utf-8")


def load_corpus(prefix, src_codec: Codec, tgt_codec: Codec, split: str = "train") -> ParallelCorpus:
    """Load ``<prefix>.src`` / ``<prefix>.tgt``."""
    src = [src_codec.encode(line) for line in read_lines(f"{prefix}.src")]
    tgt = [tgt_codec.encode(line) for line in read_lines(f"{prefix}.tgt")]
    return ParallelCorpus(src, tgt, split)


# ----------------------------------------------------------------------- batches


@dataclass
class Batch:
    """``src`` is tokens+EOS, ``tgt`` is BOS+tokens+EOS; both right-padded with PAD."""

    src: torch.Tensor
    tgt: torch.Tensor
    src_lengths: list[int]
    tgt_lengths: list[int]
    indices: list[int] = field(default_factory=list)

    def __len__(self):
        return self.src.shape[0]

    @property
    def prev_tokens(self) -> torch.Tensor:
        return self.tgt[:, :-1]

    @property
    def gold(self) -> torch.Tensor:
        return self.tgt[:, 1:]


def pad_sequences(seqs: Sequence[Sequence[int]], pad: int = PAD) -> torch.Tensor:
    width = max(len(s) for s in seqs)
    out = torch.full((len(seqs), width), pad, dtype=torch.long)
    for i, s in enumerate(seqs):
        out[i, :len(s)] = torch.as_tensor(list(s), dtype=torch.long)
    return out


def frame_source(tokens: Sequence[int]) -> list[int]:
    return list(tokens) + [EOS]


def frame_target(tokens: Sequence[int]) -> list[int]:
    return [BOS] + list(tokens) + [EOS]


def make_batch(src: Sequence[Sequence[int]], tgt: Sequence[Sequence[int]],
               indices: Sequence[int] = ()) -> Batch:
    s = [frame_source(x) for x in src]
    t = [frame_target(y) for y in tgt]
    return Batch(pad_sequences(s), pad_sequences(t), [len(x) for x in s], [len(y) for y in t],
                 list(indices))


def epoch_order(n: int, rng: Rng | None) -> np.ndarray:
    return np.arange(n) if rng is None else rng.permutation(n)


def batch_iter(corpus: ParallelCorpus, batch_size: int, rng: Rng | None = None) -> Iterator[Batch]:
    """One epoch over ``corpus`` in a seeded order (corpus order if ``rng`` is None)."""
    if batch_size < 1:
        raise ContractError("batch_size must be >= 1")
    order = epoch_order(len(corpus), rng)
    for start in range(0, len(order), batch_size):
        idx = [int(i) for i in order[start:start + batch_size]]
        yield make_batch([corpus.src[i] for i in idx], [corpus.tgt[i] for i in idx], idx)
