"""Numeric core: float64 tensors, reverse-mode gradients, Adam and seeded RNG.

Tensors are ``torch.float64`` tensors and the autograd graph recorded by torch
is the tape; ``backward`` below is the contract-checked entry point into it.
The optimizer, the finite-difference checker and the random streams are
implemented here so their behaviour is pinned independently of torch's.
"""

from __future__ import annotations

import copy
import zlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
import torch

from .errors import ContractError, NumericError

DTYPE = torch.float64
PROB_FLOOR = 1e-12

torch.set_default_dtype(DTYPE)


def as_tensor(v) -> torch.Tensor:
    if isinstance(v, torch.Tensor):
        return v if v.dtype == DTYPE else v.to(DTYPE)
    return torch.as_tensor(np.asarray(v, dtype=np.float64))


def check_finite(t: torch.Tensor, what: str = "tensor") -> torch.Tensor:
    if not bool(torch.isfinite(t).all()):
        raise NumericError(f"non-finite values in {what}")
    return t


def softmax(v, dim: int = -1) -> torch.Tensor:
    """Max-shifted softmax along ``dim``."""
    t = check_finite(as_tensor(v), "softmax input")
    if t.numel() == 0:
        raise ContractError("softmax of an empty vector")
    shifted = t - t.max(dim=dim, keepdim=True).values.detach()
    e = shifted.exp()
    return e / e.sum(dim=dim, keepdim=True)


def log_softmax(v, dim: int = -1) -> torch.Tensor:
    t = check_finite(as_tensor(v), "log_softmax input")
    shifted = t - t.max(dim=dim, keepdim=True).values.detach()
    return shifted - shifted.exp().sum(dim=dim, keepdim=True).log()


def cross_entropy(pred, target: int) -> torch.Tensor:
    """-log(pred[target]), with the probability floored at 1e-12."""
    p = as_tensor(pred)
    if not 0 <= target < p.shape[-1]:
        raise ContractError(f"target {target} outside a {p.shape[-1]}-way distribution")
    return -torch.clamp(p[..., target], min=PROB_FLOOR).log()


def backward(root: torch.Tensor, leaves: Sequence[torch.Tensor]) -> list[torch.Tensor]:
    """Gradients of a scalar ``root`` for every leaf.

    Leaves that are frozen or not on any path to ``root`` get zeros.
    """
    if root.numel() != 1:
        raise ContractError(f"backward needs a scalar root, got shape {tuple(root.shape)}")
    check_finite(root.detach(), "loss")
    live = [i for i, leaf in enumerate(leaves) if leaf.requires_grad]
    out = [torch.zeros_like(leaf) for leaf in leaves]
    if live and root.requires_grad:
        grads = torch.autograd.grad(root.reshape(()), [leaves[i] for i in live], allow_unused=True)
        for i, g in zip(live, grads):
            if g is not None:
                out[i] = g
    return out


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-8
    step: int = 0
    m: list[torch.Tensor] = field(default_factory=list)
    v: list[torch.Tensor] = field(default_factory=list)

    def clone(self) -> "AdamState":
        return copy.deepcopy(self)


def adam_step(params: Sequence[torch.Tensor], grads: Sequence[torch.Tensor], state: AdamState,
              lr: float | None = None) -> tuple[Sequence[torch.Tensor], AdamState]:
    """One bias-corrected Adam update, applied to ``params`` in place."""
    if len(params) != len(grads):
        raise ContractError("params and grads differ in length")
    if not state.m:
        state.m = [torch.zeros_like(p) for p in params]
        state.v = [torch.zeros_like(p) for p in params]
    if len(state.m) != len(params):
        raise ContractError("optimizer state does not match the parameter list")
    for p, g, m in zip(params, grads, state.m):
        if p.shape != g.shape or p.shape != m.shape:
            raise ContractError(f"shape mismatch in adam_step: {tuple(p.shape)} vs {tuple(g.shape)}")
    lr = state.lr if lr is None else lr
    state.step += 1
    bc1 = 1.0 - state.beta1 ** state.step
    bc2 = 1.0 - state.beta2 ** state.step
    with torch.no_grad():
        for p, g, m, v in zip(params, grads, state.m, state.v):
            m.mul_(state.beta1).add_(g, alpha=1.0 - state.beta1)
            v.mul_(state.beta2).addcmul_(g, g, value=1.0 - state.beta2)
            p.sub_(lr * (m / bc1) / ((v / bc2).sqrt() + state.eps))
    return params, state


def grad_check(f: Callable[[torch.Tensor], torch.Tensor], x, h: float = 1e-5) -> float:
    """Max over coordinates of |analytic - central difference| / max(1, |analytic|)."""
    x0 = as_tensor(x).detach().clone().reshape(-1)
    xv = x0.clone().requires_grad_(True)
    y = f(xv)
    analytic = backward(y, [xv])[0].detach()
    numeric = torch.zeros_like(x0)
    with torch.no_grad():
        for i in range(x0.numel()):
            xp = x0.clone()
            xp[i] += h
            xm = x0.clone()
            xm[i] -= h
            numeric[i] = (f(xp) - f(xm)).reshape(()) / (2 * h)
    err = (analytic - numeric).abs() / torch.clamp(analytic.abs(), min=1.0)
    return float(err.max()) if err.numel() else 0.0


def flat_params(params: Iterable[torch.Tensor]) -> torch.Tensor:
    return torch.cat([p.detach().reshape(-1) for p in params])


class Rng:
    """Seeded counter-based (Philox) random stream with named substreams.

    ``Rng(7).substream("sample")`` is independent of ``Rng(7).substream("perturb")``
    and neither depends on how much the other has been consumed.
    """

    def __init__(self, seed: int, path: tuple[str, ...] = ()):
        self.seed = int(seed)
        self.path = tuple(path)
        key = tuple(zlib.crc32(p.encode("utf-8")) for p in self.path)
        self._seq = np.random.SeedSequence(entropy=self.seed & 0xFFFFFFFFFFFFFFFF, spawn_key=key)
        self.gen = np.random.Generator(np.random.Philox(self._seq))

    def substream(self, *names) -> "Rng":
        return Rng(self.seed, self.path + tuple(str(n) for n in names))

    def __repr__(self):
        return f"Rng(seed={self.seed}, path={'/'.join(self.path) or '-'})"

    def random(self, size=None):
        return self.gen.random(size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self.gen.normal(loc, scale, size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.gen.uniform(low, high, size)

    def permutation(self, n: int) -> np.ndarray:
        return self.gen.permutation(n)

    def int_seed(self) -> int:
        return int(self._seq.generate_state(1, np.uint64)[0] >> np.uint64(1))

    def torch_generator(self) -> torch.Generator:
        g = torch.Generator()
        g.manual_seed(self.int_seed())
        return g
