"""Constrained embedding attack on a dual system.

Only the shared source-language matrix moves.  The combined loss rewards
damage to the forward model and penalises damage to the backward model,
so the matrix drifts in directions the backward model tolerates.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import torch

from .errors import ContractError
from .evaluation import corpus_metric
from .model import DualSystem, greedy_batch, rescore, sample_batch
from .numeric import AdamState, Rng, adam_step, backward, check_finite
from .objectives import dual_loss, get_metric, mrt_risk, nll_loss
from .text import ParallelCorpus, epoch_order, make_batch

log = logging.getLogger(__name__)


@dataclass
class AttackConfig:
    max_epochs: int = 15
    k: int = 16
    metric: str = "bleu"
    lam: float = 0.8
    alpha: float = 5e-3
    lr: float = 1e-4
    objective: str = "mrt"
    patience: int = 3
    batch_size: int = 16
    score_metric: str = "bleu"

    def __post_init__(self):
        if self.max_epochs < 1:
            raise ContractError("max_epochs must be >= 1")
        if not 0.0 <= self.lam <= 1.0:
            raise ContractError("lambda must lie in [0, 1]")
        if self.objective not in ("nll", "mrt"):
            raise ContractError(f"objective must be 'nll' or 'mrt', got {self.objective!r}")
        if self.objective == "mrt":
            get_metric(self.metric)
            if self.k < 1:
                raise ContractError("MRT needs K >= 1")
        if self.patience < 0 or self.batch_size < 1:
            raise ContractError("patience must be >= 0 and batch_size >= 1")


@dataclass
class TraceRow:
    epoch: int
    dual_loss: float | None
    forward_score: float | None
    backward_score: float | None

    def line(self) -> str:
        def fmt(v):
            return "nan" if v is None else f"{v:.6f}"
        return f"{self.epoch}\t{fmt(self.dual_loss)}\t{fmt(self.forward_score)}\t{fmt(self.backward_score)}"


@dataclass
class AttackResult:
    original: torch.Tensor
    attacked: torch.Tensor
    trace: list[TraceRow] = field(default_factory=list)
    converged: bool = False

    def trace_lines(self) -> list[str]:
        return ["epoch\tdual_loss\tforward_score\tbackward_score"] + [r.line() for r in self.trace]


def track_degradation(dual: DualSystem, dev: ParallelCorpus, metric: str = "bleu") -> tuple[float, float]:
    """Greedy-decode both directions on ``dev``; corpus score for each."""
    if len(dev) == 0:
        raise ContractError("empty dev corpus")
    dual.eval()
    fwd = greedy_batch(dual.forward, dev.src)
    bwd = greedy_batch(dual.backward, dev.tgt)
    tv, sv = dual.tgt_vocab, dual.src_vocab
    f = corpus_metric([tv.decode(h) for h in fwd], [tv.decode(r) for r in dev.tgt], metric)
    b = corpus_metric([sv.decode(h) for h in bwd], [sv.decode(r) for r in dev.src], metric)
    return f, b


def pair_losses(dual: DualSystem, xs: Sequence[list[int]], ys: Sequence[list[int]],
                cfg: AttackConfig, rng: Rng | None = None):
    """(L1, L2) for a group of pairs under the configured objective."""
    if cfg.objective == "nll":
        return nll_loss(dual.forward, make_batch(xs, ys)), nll_loss(dual.backward, make_batch(ys, xs))
    if rng is None:
        raise ContractError("MRT losses need an rng for sampling")
    metric = get_metric(cfg.metric)
    sv, tv = dual.src_vocab, dual.tgt_vocab
    fwd = rescore(dual.forward, sample_batch(dual.forward, xs, cfg.k, rng))
    bwd = rescore(dual.backward, sample_batch(dual.backward, ys, cfg.k, rng))
    l1 = torch.stack([mrt_risk(s, tv.decode(y), metric, cfg.alpha, tv.decode) for s, y in zip(fwd, ys)]).mean()
    l2 = torch.stack([mrt_risk(s, sv.decode(x), metric, cfg.alpha, sv.decode) for s, x in zip(bwd, xs)]).mean()
    return l1, l2


def attack_embedding(dual: DualSystem, corpus: ParallelCorpus, cfg: AttackConfig, rng: Rng,
                     dev: ParallelCorpus | None = None) -> AttackResult:
    """Update the shared embedding until the dual loss stalls or ``max_epochs``.

    The pair set is walked in mini-batches of ``batch_size`` (one optimizer
    step each); MRT candidates are drawn fresh every epoch.
    """
    if not dual.in_attack_mode():
        raise ContractError("attack needs attack-mode freeze flags (only the shared embedding trainable)")
    dual.eval()
    shared = dual.shared
    original = shared.detach().clone()
    state = AdamState(lr=cfg.lr)
    result = AttackResult(original=original, attacked=original)
    if dev is not None:
        result.trace.append(TraceRow(0, None, *track_degradation(dual, dev, cfg.score_metric)))

    best, stale = math.inf, 0
    if cfg.patience == 0:
        result.converged = True
    epoch = 0
    while not result.converged and epoch < cfg.max_epochs:
        epoch += 1
        order = epoch_order(len(corpus), rng.substream("batch", epoch))
        sample_rng = rng.substream("sample", epoch)
        total, steps = 0.0, 0
        for start in range(0, len(order), cfg.batch_size):
            idx = [int(i) for i in order[start:start + cfg.batch_size]]
            l1, l2 = pair_losses(dual, [corpus.src[i] for i in idx], [corpus.tgt[i] for i in idx],
                                 cfg, sample_rng)
            loss = dual_loss(l1, l2, cfg.lam)
            check_finite(loss.detach(), "dual loss")
            grad = backward(loss, [shared])
            adam_step([shared], grad, state)
            total += float(loss.detach())
            steps += 1
        mean = total / max(steps, 1)
        scores = track_degradation(dual, dev, cfg.score_metric) if dev is not None else (None, None)
        result.trace.append(TraceRow(epoch, mean, *scores))
        log.info("attack epoch %d: dual loss %.6f fwd %s bwd %s", epoch, mean, *scores)
        if mean < best - 1e-12:
            best, stale = mean, 0
        else:
            stale += 1
            if stale >= cfg.patience:
                result.converged = True
    result.attacked = shared.detach().clone()
    return result
