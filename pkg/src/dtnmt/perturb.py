"""Adversarial token generation and synthetic-noise test sets.

Both work on subword ids.  Replacement picks the most cosine-similar other
token: for adversarial samples the query row comes from the attacked matrix
E' and keys from the original E; for noisy test sets both come from E.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch

from .errors import ContractError
from .numeric import Rng
from .text import NON_CONTENT, ParallelCorpus, Vocab, write_lines

NOISE_RATIOS = (0.10, 0.15, 0.20, 0.25, 0.30)
NOISE_TYPES = ("rd", "rp")


@dataclass(frozen=True)
class PerturbationPolicy:
    p_np: float = 0.7
    p_rp: float = 0.8
    p_rd: float = 0.2

    def __post_init__(self):
        for v in (self.p_np, self.p_rp, self.p_rd):
            if not 0.0 <= v <= 1.0:
                raise ContractError("perturbation probabilities must lie in [0, 1]")
        if abs(self.p_rp + self.p_rd - 1.0) > 1e-12:
            raise ContractError("p_rp + p_rd must equal 1")

    @classmethod
    def from_adv_percent(cls, percent: float, p_rp: float = 0.8) -> "PerturbationPolicy":
        return cls(p_np=1.0 - percent / 100.0, p_rp=p_rp, p_rd=1.0 - p_rp)

    @property
    def adv_percent(self) -> float:
        return 100.0 * (1.0 - self.p_np)


@dataclass(frozen=True)
class NoiseSpec:
    kind: str
    ratio: float

    def __post_init__(self):
        if self.kind not in NOISE_TYPES:
            raise ContractError(f"noise type must be one of {NOISE_TYPES}, got {self.kind!r}")
        if not 0.0 < self.ratio < 1.0:
            raise ContractError("noise ratio must lie in (0, 1)")

    @property
    def name(self) -> str:
        return f"{self.kind}{round(self.ratio * 100)}"

    @classmethod
    def parse(cls, name: str) -> "NoiseSpec":
        return cls(name[:2].lower(), int(name[2:]) / 100.0)


def default_noise_family() -> list[NoiseSpec]:
    return [NoiseSpec(k, r) for k in NOISE_TYPES for r in NOISE_RATIOS]


def _as_array(m) -> np.ndarray:
    if isinstance(m, torch.Tensor):
        m = m.detach().cpu().numpy()
    return np.asarray(m, dtype=np.float64)


def _unit_rows(m: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(m, axis=1, keepdims=True)
    return np.divide(m, norms, out=np.zeros_like(m), where=norms > 0)


def neighbor_table(e_query, e_key, exclusions: Iterable[int] = NON_CONTENT) -> np.ndarray:
    """Nearest neighbour of every token (-1 for excluded tokens)."""
    q, k = _as_array(e_query), _as_array(e_key)
    if q.shape != k.shape:
        raise ContractError(f"embedding shapes differ: {q.shape} vs {k.shape}")
    excl = sorted(set(int(i) for i in exclusions))
    if len(excl) + 1 >= q.shape[0]:
        raise ContractError("every replacement candidate is excluded")
    sim = _unit_rows(q) @ _unit_rows(k).T
    sim[:, excl] = -np.inf
    np.fill_diagonal(sim, -np.inf)
    table = sim.argmax(axis=1)
    table[excl] = -1
    return table


def nearest_neighbor(token: int, e_query, e_key, exclusions: Iterable[int] = NON_CONTENT) -> int:
    """argmax over v not excluded and v != token of cos(e_query[token], e_key[v]); ties to lowest id."""
    q, k = _as_array(e_query), _as_array(e_key)
    exclusions = set(int(i) for i in exclusions)
    if token in exclusions:
        raise ContractError(f"token {token} is excluded from perturbation")
    if q.shape != k.shape:
        raise ContractError(f"embedding shapes differ: {q.shape} vs {k.shape}")
    qn = q[token] / np.linalg.norm(q[token])
    best, best_sim = -1, -np.inf
    for v in range(k.shape[0]):
        if v == token or v in exclusions:
            continue
        nv = np.linalg.norm(k[v])
        sim = float(qn @ k[v]) / nv if nv > 0 else 0.0
        if sim > best_sim:
            best, best_sim = v, sim
    if best < 0:
        raise ContractError("every replacement candidate is excluded")
    return best


class EmbeddingPair:
    """Original matrix E and attacked matrix E' with a cached neighbour table."""

    def __init__(self, original, attacked=None, exclusions: Iterable[int] = NON_CONTENT):
        self.original = _as_array(original)
        self.attacked = self.original if attacked is None else _as_array(attacked)
        if self.original.shape != self.attacked.shape:
            raise ContractError("E and E' differ in shape")
        self.exclusions = frozenset(int(i) for i in exclusions)
        perturbable = [i for i in range(self.original.shape[0]) if i not in self.exclusions]
        for m in (self.original, self.attacked):
            if np.any(np.linalg.norm(m[perturbable], axis=1) == 0):
                raise ContractError("zero-norm embedding row among perturbable tokens")
        self._table: np.ndarray | None = None

    @property
    def table(self) -> np.ndarray:
        if self._table is None:
            self._table = neighbor_table(self.attacked, self.original, self.exclusions)
        return self._table

    def neighbor(self, token: int) -> int:
        return int(self.table[token])

    @property
    def moved(self) -> bool:
        return not np.array_equal(self.original, self.attacked)


def _apply(sentence: Sequence[int], decide) -> tuple[list[int], list[str]]:
    """Run ``decide(token) -> (action, replacement)`` over content tokens.

    If every content token would be deleted, the last deletion is undone.
    """
    out: list[int | None] = []
    actions: list[str] = []
    for tok in sentence:
        tok = int(tok)
        if tok in NON_CONTENT:
            out.append(tok)
            actions.append("special")
            continue
        action, new = decide(tok)
        actions.append(action)
        out.append(None if action == "delete" else new)
    content = [i for i, a in enumerate(actions) if a != "special"]
    if content and all(actions[i] == "delete" for i in content):
        last = content[-1]
        out[last] = int(sentence[last])
        actions[last] = "keep"
    return [t for t in out if t is not None], actions


def adversarialize_with_actions(sentence: Sequence[int], policy: PerturbationPolicy,
                                pair: EmbeddingPair, rng: Rng) -> tuple[list[int], list[str]]:
    def decide(tok):
        if rng.random() < policy.p_np:
            return "keep", tok
        if rng.random() < policy.p_rp:
            return "replace", pair.neighbor(tok)
        return "delete", None

    return _apply(sentence, decide)


def adversarialize(sentence: Sequence[int], policy: PerturbationPolicy, pair: EmbeddingPair,
                   vocab: Vocab | None, rng: Rng) -> list[int]:
    if vocab is not None and any(not 0 <= int(t) < len(vocab) for t in sentence):
        raise ContractError("token id outside vocabulary")
    return adversarialize_with_actions(sentence, policy, pair, rng)[0]


def adversarialize_many(sentences: Sequence[Sequence[int]], keys: Sequence[int],
                        policy: PerturbationPolicy, pair: EmbeddingPair, rng: Rng) -> list[list[int]]:
    """Perturb each sentence from its own substream keyed by ``keys[i]``."""
    return [adversarialize_with_actions(s, policy, pair, rng.substream("sent", k))[0]
            for s, k in zip(sentences, keys)]


def noise_with_actions(sentence: Sequence[int], spec: NoiseSpec, table: np.ndarray,
                       rng: Rng) -> tuple[list[int], list[str]]:
    def decide(tok):
        if rng.random() >= spec.ratio:
            return "keep", tok
        if spec.kind == "rd":
            return "delete", None
        return "replace", int(table[tok])

    return _apply(sentence, decide)


def make_noisy_testset(corpus: ParallelCorpus, spec: NoiseSpec, embedding, vocab: Vocab | None,
                       rng: Rng) -> ParallelCorpus:
    """Perturb every source token independently with probability ``spec.ratio``."""
    table = neighbor_table(embedding, embedding) if spec.kind == "rp" else None
    if vocab is not None:
        corpus.check_ids(len(vocab), 1 << 62)
    r = rng.substream("noise", spec.name)
    src = [noise_with_actions(s, spec, table, r.substream("sent", i))[0] for i, s in enumerate(corpus.src)]
    return corpus.with_src(src, split=f"{corpus.split}.{spec.name}")


def noisy_path(base, spec: NoiseSpec, side: str = "src") -> Path:
    """``test`` + rd15 -> ``test.rd15.src``."""
    base = Path(base)
    return base.with_name(f"{base.name}.{spec.name}.{side}")


def write_noisy_testset(base, spec: NoiseSpec, noisy: ParallelCorpus, src_vocab: Vocab,
                        tgt_vocab: Vocab) -> tuple[Path, Path]:
    src_path, tgt_path = noisy_path(base, spec, "src"), noisy_path(base, spec, "tgt")
    write_lines(src_path, [src_vocab.decode(s) for s in noisy.src])
    write_lines(tgt_path, [tgt_vocab.decode(t) for t in noisy.tgt])
    return src_path, tgt_path
