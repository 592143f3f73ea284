"""Training objectives and sentence-level metrics.

Metrics return a score in [0, 1]; the MRT cost of a candidate is the negated
metric, so every risk lies in [-1, 0].
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import torch

from .errors import ContractError
from .numeric import as_tensor
from .text import PAD

NGRAM_ORDER = 4
CHRF_ORDER = 6
CHRF_BETA = 2


def _words(s) -> list[str]:
    return s.split() if isinstance(s, str) else [str(t) for t in s]


def _chars(s) -> str:
    return "".join(_words(s))


def ngram_counts(words: Sequence[str], n: int) -> Counter:
    return Counter(tuple(words[i:i + n]) for i in range(len(words) - n + 1))


def bleu_stats(hyp, ref) -> list[int]:
    """[hyp_len, ref_len, correct_1, total_1, ..., correct_4, total_4]."""
    h, r = _words(hyp), _words(ref)
    stats = [len(h), len(r)]
    for n in range(1, NGRAM_ORDER + 1):
        hc, rc = ngram_counts(h, n), ngram_counts(r, n)
        stats += [sum(min(c, rc[g]) for g, c in hc.items()), sum(hc.values())]
    return stats


def bleu_from_stats(stats: Sequence[int]) -> float:
    """BLEU with exponential ("exp", NIST-style) smoothing over the orders present.

    A zero match count at order n is replaced by 1 / (2^k * total_n), where k
    counts the zero-match orders seen so far.  Orders with no hypothesis
    n-grams at all are dropped from the geometric mean.
    """
    hyp_len, ref_len = stats[0], stats[1]
    if hyp_len == 0:
        return 0.0
    logs = []
    smooth = 1.0
    for n in range(NGRAM_ORDER):
        correct, total = stats[2 + 2 * n], stats[3 + 2 * n]
        if total == 0:
            break
        if correct == 0:
            smooth *= 2.0
            logs.append(math.log(1.0 / (smooth * total)))
        else:
            logs.append(math.log(correct / total))
    bp = 1.0 if hyp_len >= ref_len else math.exp(1.0 - ref_len / hyp_len)
    return bp * math.exp(sum(logs) / len(logs))


def sentence_bleu(hyp, ref) -> float:
    if not _words(ref):
        raise ContractError("reference must be non-empty")
    return bleu_from_stats(bleu_stats(hyp, ref))


def chrf_stats(hyp, ref, order: int = CHRF_ORDER) -> list[int]:
    """Per order: hyp n-grams, ref n-grams, matched n-grams (whitespace removed)."""
    h, r = _chars(hyp), _chars(ref)
    stats = []
    for n in range(1, order + 1):
        hc = Counter(h[i:i + n] for i in range(len(h) - n + 1))
        rc = Counter(r[i:i + n] for i in range(len(r) - n + 1))
        stats += [sum(hc.values()), sum(rc.values()), sum((hc & rc).values())]
    return stats


def chrf_from_stats(stats: Sequence[int], beta: float = CHRF_BETA) -> float:
    prec = rec = 0.0
    used = 0
    for i in range(len(stats) // 3):
        nh, nr, nm = stats[3 * i: 3 * i + 3]
        if nh > 0 and nr > 0:
            prec += nm / nh
            rec += nm / nr
            used += 1
    if used == 0:
        return 0.0
    prec, rec = prec / used, rec / used
    if prec + rec == 0:
        return 0.0
    b2 = beta ** 2
    return (1 + b2) * prec * rec / (b2 * prec + rec)


def chrf(hyp, ref) -> float:
    if not _chars(ref):
        raise ContractError("reference must be non-empty")
    return chrf_from_stats(chrf_stats(hyp, ref))


MetricFn = Callable[[object, object], float]

METRICS: dict[str, MetricFn] = {"bleu": sentence_bleu, "chrf": chrf}


def get_metric(key: str) -> MetricFn:
    try:
        return METRICS[key]
    except KeyError:
        raise ContractError(f"unknown metric {key!r}; choose from {sorted(METRICS)}") from None


# ---------------------------------------------------------------------- MRT


@dataclass
class DualLossConfig:
    lam: float = 0.8
    alpha: float = 5e-3
    objective: str = "mrt"
    metric: str = "bleu"
    k: int = 16

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ContractError("lambda must lie in [0, 1]")
        if self.alpha <= 0:
            raise ContractError("alpha must be positive")
        if self.objective not in ("nll", "mrt"):
            raise ContractError(f"objective must be 'nll' or 'mrt', got {self.objective!r}")
        if self.objective == "mrt":
            get_metric(self.metric)
            if self.k < 1:
                raise ContractError("MRT needs K >= 1")


def q_distribution(logprobs, alpha: float) -> torch.Tensor:
    """P^alpha renormalised over the candidate set, computed in log space."""
    lp = as_tensor(logprobs)
    if lp.numel() == 0:
        raise ContractError("empty candidate set")
    return torch.softmax(alpha * lp, dim=-1)


def mrt_risk(samples, ref, metric: MetricFn, alpha: float,
             render: Callable[[Sequence[int]], object] | None = None) -> torch.Tensor:
    """Expected cost sum_i Q_i * (-metric(candidate_i, ref)).

    Costs are constants; the gradient reaches the model only through the
    candidates' log-probabilities inside Q.
    """
    if len(samples.candidates) == 0:
        raise ContractError("empty sample set")
    render = render or (lambda c: c)
    costs = torch.tensor([-metric(render(c), ref) for c in samples.candidates])
    return (q_distribution(samples.logprobs, alpha) * costs).sum()


def nll_loss(model, batch, label_smoothing: float = 0.0) -> torch.Tensor:
    """Token-level cross-entropy averaged over non-PAD target positions."""
    logits = model(batch.src, batch.prev_tokens)
    lp = torch.log_softmax(logits, dim=-1)
    gold = batch.gold
    keep = gold.ne(PAD)
    nll = -lp.gather(-1, gold[..., None]).squeeze(-1)
    if label_smoothing > 0:
        allowed = torch.isfinite(lp)
        smooth = -lp.masked_fill(~allowed, 0.0).sum(-1) / allowed.sum(-1)
        nll = (1.0 - label_smoothing) * nll + label_smoothing * smooth
    return nll.masked_fill(~keep, 0.0).sum() / keep.sum()


def dual_loss(l1, l2, lam: float):
    """-lam * L1 + (1 - lam) * L2."""
    if not 0.0 <= lam <= 1.0:
        raise ContractError("lambda must lie in [0, 1]")
    return -lam * l1 + (1.0 - lam) * l2


# ------------------------------------------------------------------ corpus level


def corpus_bleu(hyps: Iterable, refs: Iterable) -> float:
    total = [0] * (2 + 2 * NGRAM_ORDER)
    for h, r in zip(hyps, refs):
        total = [a + b for a, b in zip(total, bleu_stats(h, r))]
    return bleu_from_stats(total)


def corpus_chrf(hyps: Iterable, refs: Iterable) -> float:
    total = [0] * (3 * CHRF_ORDER)
    for h, r in zip(hyps, refs):
        total = [a + b for a, b in zip(total, chrf_stats(h, r))]
    return chrf_from_stats(total)


CORPUS_METRICS = {"bleu": corpus_bleu, "chrf": corpus_chrf}
