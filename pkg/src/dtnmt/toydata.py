"""Synthetic token-reversal translation corpus.

Each source word has a fixed target-language counterpart; the target
sentence is the source sentence translated word by word and reversed.

Source sentences are walks on a sparse random successor graph: every word
can be followed by only ``branching`` others.  That gives the toy language
some redundancy, so a corrupted word can in principle be recovered from its
neighbours.  ``branching=0`` draws words independently instead.
"""

from __future__ import annotations

import string
from pathlib import Path

from .numeric import Rng
from .text import write_lines

DEFAULT_SIZES = {"train": 2000, "valid1": 200, "valid2": 200, "test": 200}


def make_lexicon(vocab_size: int, rng: Rng) -> list[tuple[str, str]]:
    """``vocab_size`` distinct (source word, target word) pairs."""
    src_letters = string.ascii_lowercase[:12]
    tgt_letters = string.ascii_lowercase[12:24]

    def words(letters, r):
        seen, out = set(), []
        while len(out) < vocab_size:
            n = int(r.gen.integers(2, 5))
            w = "".join(letters[int(i)] for i in r.gen.integers(0, len(letters), n))
            if w not in seen:
                seen.add(w)
                out.append(w)
        return out

    return list(zip(words(src_letters, rng.substream("src")), words(tgt_letters, rng.substream("tgt"))))


def make_successors(vocab_size: int, branching: int, rng: Rng) -> list[list[int]]:
    return [sorted(int(j) for j in rng.gen.choice(vocab_size, branching, replace=False))
            for _ in range(vocab_size)]


def make_reversal_corpus(out_dir, seed: int = 0, vocab_size: int = 50, min_len: int = 4,
                         max_len: int = 8, sizes: dict[str, int] | None = None,
                         branching: int = 3) -> dict[str, str]:
    """Write ``<split>.src`` / ``<split>.tgt`` files; returns split -> path prefix."""
    sizes = dict(DEFAULT_SIZES if sizes is None else sizes)
    if not 0 <= branching <= vocab_size:
        raise ValueError("branching must lie in [0, vocab_size]")
    rng = Rng(seed).substream("toydata")
    lexicon = make_lexicon(vocab_size, rng.substream("lexicon"))
    succ = make_successors(vocab_size, branching, rng.substream("grammar")) if branching else None
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    prefixes = {}
    for split, n in sizes.items():
        r = rng.substream(split)
        src_lines, tgt_lines = [], []
        for _ in range(n):
            length = int(r.gen.integers(min_len, max_len + 1))
            if succ is None:
                idx = [int(i) for i in r.gen.integers(0, vocab_size, length)]
            else:
                idx = [int(r.gen.integers(0, vocab_size))]
                while len(idx) < length:
                    nxt = succ[idx[-1]]
                    idx.append(nxt[int(r.gen.integers(0, len(nxt)))])
            src_lines.append(" ".join(lexicon[i][0] for i in idx))
            tgt_lines.append(" ".join(lexicon[i][1] for i in reversed(idx)))
        write_lines(out / f"{split}.src", src_lines)
        write_lines(out / f"{split}.tgt", tgt_lines)
        prefixes[split] = str(out / split)
    return prefixes
