"""Tiny transformer encoder-decoder and the dual (forward/backward) system.

The dual system owns one source-language embedding matrix.  It is the
forward model's encoder embedding and, at the same time, the backward
model's decoder input embedding and output projection.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ContractError, MissingArtifact
from .numeric import DTYPE, Rng
from .text import BOS, EOS, PAD, Vocab, frame_source, pad_sequences


@dataclass
class ModelConfig:
    d_model: int = 64
    num_layers: int = 2
    num_heads: int = 2
    ffn_dim: int = 128
    dropout: float = 0.1
    max_len: int = 64

    def __post_init__(self):
        for name in ("d_model", "num_layers", "num_heads", "ffn_dim", "max_len"):
            if getattr(self, name) < 1:
                raise ContractError(f"{name} must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ContractError("dropout must lie in [0, 1)")
        if self.d_model % self.num_heads:
            raise ContractError("d_model must be divisible by num_heads")


def sinusoid_table(length: int, dim: int) -> torch.Tensor:
    pos = torch.arange(length, dtype=DTYPE)[:, None]
    i = torch.arange(0, dim, 2, dtype=DTYPE)
    angle = pos / torch.pow(torch.tensor(10000.0, dtype=DTYPE), i / dim)
    table = torch.zeros(length, dim, dtype=DTYPE)
    table[:, 0::2] = torch.sin(angle)
    table[:, 1::2] = torch.cos(angle[:, : dim // 2])
    return table


class Attention(nn.Module):
    def __init__(self, d: int, heads: int, dropout: float):
        super().__init__()
        self.heads = heads
        self.dropout = dropout
        self.q = nn.Linear(d, d)
        self.k = nn.Linear(d, d)
        self.v = nn.Linear(d, d)
        self.o = nn.Linear(d, d)

    def forward(self, x, mem, blocked):
        # blocked: bool, broadcastable to (B, Tq, Tk); True means "may not attend"
        B, Tq, d = x.shape
        Tk = mem.shape[1]
        dh = d // self.heads
        q = self.q(x).view(B, Tq, self.heads, dh).transpose(1, 2)
        k = self.k(mem).view(B, Tk, self.heads, dh).transpose(1, 2)
        v = self.v(mem).view(B, Tk, self.heads, dh).transpose(1, 2)
        scores = q @ k.transpose(-1, -2) / math.sqrt(dh)
        scores = scores.masked_fill(blocked[:, None], float("-inf"))
        attn = F.dropout(torch.softmax(scores, dim=-1), self.dropout, self.training)
        return self.o((attn @ v).transpose(1, 2).reshape(B, Tq, d))


class FeedForward(nn.Module):
    def __init__(self, d: int, width: int, dropout: float):
        super().__init__()
        self.fc1 = nn.Linear(d, width)
        self.fc2 = nn.Linear(width, d)
        self.dropout = dropout

    def forward(self, x):
        return self.fc2(F.dropout(F.relu(self.fc1(x)), self.dropout, self.training))


class EncoderLayer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.ln1 = nn.LayerNorm(cfg.d_model)
        self.attn = Attention(cfg.d_model, cfg.num_heads, cfg.dropout)
        self.ln2 = nn.LayerNorm(cfg.d_model)
        self.ffn = FeedForward(cfg.d_model, cfg.ffn_dim, cfg.dropout)
        self.dropout = cfg.dropout

    def forward(self, x, pad):
        h = self.ln1(x)
        x = x + F.dropout(self.attn(h, h, pad[:, None, :]), self.dropout, self.training)
        return x + F.dropout(self.ffn(self.ln2(x)), self.dropout, self.training)


class DecoderLayer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.ln1 = nn.LayerNorm(cfg.d_model)
        self.self_attn = Attention(cfg.d_model, cfg.num_heads, cfg.dropout)
        self.ln2 = nn.LayerNorm(cfg.d_model)
        self.cross_attn = Attention(cfg.d_model, cfg.num_heads, cfg.dropout)
        self.ln3 = nn.LayerNorm(cfg.d_model)
        self.ffn = FeedForward(cfg.d_model, cfg.ffn_dim, cfg.dropout)
        self.dropout = cfg.dropout

    def forward(self, x, self_blocked, memory, src_pad):
        h = self.ln1(x)
        x = x + F.dropout(self.self_attn(h, h, self_blocked), self.dropout, self.training)
        x = x + F.dropout(self.cross_attn(self.ln2(x), memory, src_pad[:, None, :]),
                          self.dropout, self.training)
        return x + F.dropout(self.ffn(self.ln3(x)), self.dropout, self.training)


class Seq2Seq(nn.Module):
    """Pre-LN transformer with sinusoidal positions and a tied output projection.

    Logits for PAD and BOS are pinned to -inf, so they are never predicted.
    """

    def __init__(self, cfg: ModelConfig, src_vocab_size: int, tgt_vocab_size: int,
                 encoder_embed: nn.Parameter | None = None,
                 decoder_embed: nn.Parameter | None = None):
        super().__init__()
        self.cfg = cfg
        d = cfg.d_model
        self.encoder_embed = encoder_embed if encoder_embed is not None else \
            nn.Parameter(torch.empty(src_vocab_size, d, dtype=DTYPE))
        self.decoder_embed = decoder_embed if decoder_embed is not None else \
            nn.Parameter(torch.empty(tgt_vocab_size, d, dtype=DTYPE))
        if self.encoder_embed.shape != (src_vocab_size, d) or self.decoder_embed.shape != (tgt_vocab_size, d):
            raise ContractError("embedding shape does not match vocabulary and d_model")
        self.enc_layers = nn.ModuleList(EncoderLayer(cfg) for _ in range(cfg.num_layers))
        self.enc_ln = nn.LayerNorm(d)
        self.dec_layers = nn.ModuleList(DecoderLayer(cfg) for _ in range(cfg.num_layers))
        self.dec_ln = nn.LayerNorm(d)
        self.register_buffer("positions", sinusoid_table(cfg.max_len, d), persistent=False)
        never = torch.zeros(tgt_vocab_size, dtype=torch.bool)
        never[[PAD, BOS]] = True
        self.register_buffer("never_emit", never, persistent=False)
        self.embed_scale = math.sqrt(d)
        self.to(DTYPE)

    @property
    def src_vocab_size(self) -> int:
        return self.encoder_embed.shape[0]

    @property
    def tgt_vocab_size(self) -> int:
        return self.decoder_embed.shape[0]

    def _embed(self, table, ids):
        if ids.shape[1] > self.cfg.max_len:
            raise ContractError(f"sequence of length {ids.shape[1]} exceeds max_len {self.cfg.max_len}")
        x = F.embedding(ids, table) * self.embed_scale + self.positions[: ids.shape[1]]
        return F.dropout(x, self.cfg.dropout, self.training)

    def encode(self, src: torch.Tensor):
        pad = src.eq(PAD)
        x = self._embed(self.encoder_embed, src)
        for layer in self.enc_layers:
            x = layer(x, pad)
        return self.enc_ln(x), pad

    def decode(self, memory, src_pad, prev: torch.Tensor) -> torch.Tensor:
        T = prev.shape[1]
        causal = torch.ones(T, T, dtype=torch.bool).triu(1)
        blocked = causal[None] | prev.eq(PAD)[:, None, :]
        x = self._embed(self.decoder_embed, prev)
        for layer in self.dec_layers:
            x = layer(x, blocked, memory, src_pad)
        logits = self.dec_ln(x) @ self.decoder_embed.t()
        return logits.masked_fill(self.never_emit, float("-inf"))

    def forward(self, src, prev):
        memory, pad = self.encode(src)
        return self.decode(memory, pad, prev)


def count_parameters(cfg: ModelConfig, src_vocab_size: int, tgt_vocab_size: int) -> int:
    """Closed-form parameter count of one ``Seq2Seq``."""
    d, f, n = cfg.d_model, cfg.ffn_dim, cfg.num_layers
    attn = 4 * (d * d + d)
    ffn = d * f + f + f * d + d
    ln = 2 * d
    enc = n * (attn + ffn + 2 * ln) + ln
    dec = n * (2 * attn + ffn + 3 * ln) + ln
    return (src_vocab_size + tgt_vocab_size) * d + enc + dec


# -------------------------------------------------------------------- dual system


class DualSystem:
    """Forward (src->tgt) and backward (tgt->src) models over one shared matrix."""

    def __init__(self, cfg: ModelConfig, src_vocab: Vocab, tgt_vocab: Vocab):
        self.cfg = cfg
        self.src_vocab = src_vocab
        self.tgt_vocab = tgt_vocab
        self.forward = Seq2Seq(cfg, len(src_vocab), len(tgt_vocab))
        self.backward = Seq2Seq(cfg, len(tgt_vocab), len(src_vocab),
                                decoder_embed=self.forward.encoder_embed)

    @property
    def shared(self) -> nn.Parameter:
        return self.forward.encoder_embed

    def named_blocks(self) -> list[tuple[str, nn.Parameter]]:
        """All parameter blocks with their qualified names, aliases included."""
        out = []
        for prefix, model in (("forward", self.forward), ("backward", self.backward)):
            for name, p in model.named_parameters(remove_duplicate=False):
                out.append((f"{prefix}.{name}", p))
        return out

    def canonical_blocks(self) -> tuple[list[tuple[str, nn.Parameter]], dict[str, str]]:
        seen: dict[int, str] = {}
        blocks, aliases = [], {}
        for name, p in self.named_blocks():
            if id(p) in seen:
                aliases[name] = seen[id(p)]
            else:
                seen[id(p)] = name
                blocks.append((name, p))
        return blocks, aliases

    def parameters(self) -> list[nn.Parameter]:
        return [p for _, p in self.canonical_blocks()[0]]

    def set_trainable(self, names: Iterable[str] | None = None) -> None:
        """Freeze everything, then unfreeze ``names`` (all blocks when None)."""
        blocks, aliases = self.canonical_blocks()
        wanted = None if names is None else {aliases.get(n, n) for n in names}
        for name, p in blocks:
            p.requires_grad_(wanted is None or name in wanted)

    def set_attack_mode(self) -> None:
        self.set_trainable(["forward.encoder_embed"])

    def in_attack_mode(self) -> bool:
        return all(p.requires_grad == (p is self.shared) for p in self.parameters())

    def trainable(self) -> list[nn.Parameter]:
        return [p for p in self.parameters() if p.requires_grad]

    def eval(self) -> "DualSystem":
        self.forward.eval()
        self.backward.eval()
        return self

    def checksums(self, exclude_shared: bool = False) -> dict[str, str]:
        blocks, _ = self.canonical_blocks()
        return {name: block_digest(p) for name, p in blocks
                if not (exclude_shared and p is self.shared)}

    def state(self) -> dict[str, torch.Tensor]:
        return {name: p.detach().clone() for name, p in self.canonical_blocks()[0]}

    def load_state(self, state: dict[str, torch.Tensor]) -> None:
        with torch.no_grad():
            for name, p in self.canonical_blocks()[0]:
                p.copy_(state[name])


def block_digest(t: torch.Tensor) -> str:
    return hashlib.sha256(t.detach().contiguous().numpy().tobytes()).hexdigest()


def _init_block(name: str, p: torch.Tensor, rng: Rng, d_model: int) -> None:
    leaf = name.rsplit(".", 1)[-1]
    shape = tuple(p.shape)
    if leaf.endswith("_embed"):
        vals = rng.normal(0.0, d_model ** -0.5, shape)
    elif ".ln" in name or name.split(".")[1] in ("enc_ln", "dec_ln"):
        vals = np.ones(shape) if leaf == "weight" else np.zeros(shape)
    elif leaf == "weight":
        bound = math.sqrt(6.0 / (shape[0] + shape[1]))
        vals = rng.uniform(-bound, bound, shape)
    else:
        vals = np.zeros(shape)
    with torch.no_grad():
        p.copy_(torch.as_tensor(vals, dtype=DTYPE))


def init_dual(cfg: ModelConfig, src_vocab: Vocab, tgt_vocab: Vocab, rng: Rng) -> DualSystem:
    dual = DualSystem(cfg, src_vocab, tgt_vocab)
    init_rng = rng.substream("init")
    for name, p in dual.canonical_blocks()[0]:
        _init_block(name, p, init_rng, cfg.d_model)
    return dual


# ----------------------------------------------------------------- scoring/decoding


@dataclass
class SampleSet:
    """Deduplicated candidates for one input; each candidate ends with EOS.

    ``logprobs`` is a float array after sampling, or a live tensor after
    :func:`rescore`.
    """

    source: list[int]
    candidates: list[list[int]]
    logprobs: object
    counts: list[int]

    def __len__(self):
        return len(self.candidates)


def _strip_bos(y: Sequence[int]) -> list[int]:
    y = list(y)
    return y[1:] if y and y[0] == BOS else y


def sequence_log_probs(model, srcs: Sequence[Sequence[int]], ys: Sequence[Sequence[int]]) -> torch.Tensor:
    """Differentiable log P(y|x) for each pair; ``ys`` end with EOS (leading BOS optional)."""
    ys = [_strip_bos(y) for y in ys]
    if len(srcs) != len(ys) or not ys:
        raise ContractError("need equally many, and at least one, sources and targets")
    for x, y in zip(srcs, ys):
        if not x or not y:
            raise ContractError("empty sentence")
        if any(not 0 <= i < model.src_vocab_size for i in x) or \
                any(not 0 <= i < model.tgt_vocab_size for i in y):
            raise ContractError("token id outside vocabulary")
    src = pad_sequences([frame_source(x) for x in srcs])
    prev = pad_sequences([[BOS] + y[:-1] for y in ys])
    gold = pad_sequences(ys)
    logits = model(src, prev)
    lp = torch.log_softmax(logits, dim=-1).gather(-1, gold[..., None]).squeeze(-1)
    return lp.masked_fill(gold.eq(PAD), 0.0).sum(-1)


def log_prob(model, x: Sequence[int], y: Sequence[int]) -> torch.Tensor:
    return sequence_log_probs(model, [x], [y])[0]


def default_max_len(model, x: Sequence[int]) -> int:
    return max(1, min(model.cfg.max_len - 1, 2 * len(x) + 5))


@torch.no_grad()
def _decode_loop(model, srcs, pick, max_lens):
    """Shared autoregressive loop; ``pick(step, log_probs) -> token ids``."""
    src = pad_sequences([frame_source(x) for x in srcs])
    memory, pad = model.encode(src)
    n = len(srcs)
    limits = torch.as_tensor(max_lens)
    prev = torch.full((n, 1), BOS, dtype=torch.long)
    total = torch.zeros(n, dtype=DTYPE)
    done = torch.zeros(n, dtype=torch.bool)
    for step in range(int(limits.max()) + 1):
        lp = torch.log_softmax(model.decode(memory, pad, prev)[:, -1], dim=-1)
        tok = pick(step, lp)
        tok = torch.where(limits <= step, torch.full_like(tok, EOS), tok)
        tok = torch.where(done, torch.full_like(tok, PAD), tok)
        gained = lp.gather(-1, tok[:, None]).squeeze(-1)
        total = total + torch.where(done, torch.zeros_like(gained), gained)
        prev = torch.cat([prev, tok[:, None]], dim=1)
        done = done | tok.eq(EOS)
        if bool(done.all()):
            break
    seqs = []
    for row in prev[:, 1:].tolist():
        seqs.append(row[: row.index(EOS) + 1] if EOS in row else row + [EOS])
    return seqs, total


def greedy_batch(model, srcs: Sequence[Sequence[int]], max_len: int | None = None) -> list[list[int]]:
    """Greedy decoding; returns content tokens (EOS stripped). Ties go to the lowest id."""
    if not srcs:
        return []
    lens = [max_len if max_len is not None else default_max_len(model, x) for x in srcs]
    seqs, _ = _decode_loop(model, srcs, lambda step, lp: lp.argmax(-1), lens)
    return [s[:-1] for s in seqs]


def greedy_decode(model, x: Sequence[int], max_len: int | None = None) -> list[int]:
    return greedy_batch(model, [x], max_len)[0]


def sample_batch(model, srcs: Sequence[Sequence[int]], k: int, rng: Rng,
                 max_len: int | None = None) -> list[SampleSet]:
    """Draw ``k`` ancestral samples per source and deduplicate them."""
    if k < 1:
        raise ContractError("K must be >= 1")
    rep = [x for x in srcs for _ in range(k)]
    lens = [max_len if max_len is not None else default_max_len(model, x) for x in rep]

    def pick(step, lp):
        probs = lp.exp()
        cum = probs.cumsum(-1)
        u = torch.as_tensor(1.0 - rng.random(len(rep)), dtype=DTYPE)
        idx = (cum < (u * cum[:, -1])[:, None]).sum(-1)
        return idx.clamp(max=probs.shape[-1] - 1)

    seqs, total = _decode_loop(model, rep, pick, lens)
    out = []
    for i, x in enumerate(srcs):
        uniq: dict[tuple[int, ...], int] = {}
        lps, counts = [], []
        for j in range(i * k, (i + 1) * k):
            key = tuple(seqs[j])
            if key in uniq:
                counts[uniq[key]] += 1
            else:
                uniq[key] = len(lps)
                lps.append(float(total[j]))
                counts.append(1)
        out.append(SampleSet(list(x), [list(c) for c in uniq], np.array(lps), counts))
    return out


def sample_k(model, x: Sequence[int], k: int, rng: Rng, max_len: int | None = None) -> SampleSet:
    return sample_batch(model, [x], k, rng, max_len)[0]


def rescore(model, sets: Sequence[SampleSet]) -> list[SampleSet]:
    """Recompute candidate log-probabilities as live, differentiable tensors."""
    srcs = [s.source for s in sets for _ in s.candidates]
    ys = [c for s in sets for c in s.candidates]
    lp = sequence_log_probs(model, srcs, ys)
    out, start = [], 0
    for s in sets:
        out.append(SampleSet(s.source, s.candidates, lp[start:start + len(s)], s.counts))
        start += len(s)
    return out


# --------------------------------------------------------------------- checkpoints

MAGIC = b"DTNMTCK\x00"
FORMAT_VERSION = 1


def save_checkpoint(path, dual: DualSystem, meta: dict | None = None) -> str:
    """Write ``dual`` to ``path``; returns the sha256 of the file.

    Layout: magic, u32 version, u64 header length, JSON header, then each
    canonical block as little-endian float64 in header order.  Aliased
    blocks are listed in the header and stored once.
    """
    blocks, aliases = dual.canonical_blocks()
    entries, offset, payload = [], 0, []
    for name, p in blocks:
        raw = p.detach().contiguous().numpy().astype("<f8").tobytes()
        entries.append({"name": name, "shape": list(p.shape), "offset": offset, "nbytes": len(raw)})
        payload.append(raw)
        offset += len(raw)
    header = {
        "format_version": FORMAT_VERSION,
        "config": asdict(dual.cfg),
        "src_vocab": dual.src_vocab.tokens,
        "tgt_vocab": dual.tgt_vocab.tokens,
        "blocks": entries,
        "aliases": aliases,
        "tied_output_projection": {"forward": "forward.decoder_embed",
                                   "backward": aliases.get("backward.decoder_embed",
                                                           "backward.decoder_embed")},
        "meta": meta or {},
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    data = MAGIC + struct.pack("<IQ", FORMAT_VERSION, len(head)) + head + b"".join(payload)
    Path(path).write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def read_checkpoint_header(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise MissingArtifact(f"checkpoint not found: {path}")
    with open(path, "rb") as fh:
        if fh.read(len(MAGIC)) != MAGIC:
            raise ContractError(f"{path} is not a checkpoint")
        version, n = struct.unpack("<IQ", fh.read(12))
        if version != FORMAT_VERSION:
            raise ContractError(f"unsupported checkpoint version {version}")
        return json.loads(fh.read(n))


def load_checkpoint(path) -> tuple[DualSystem, dict]:
    header = read_checkpoint_header(path)
    raw = Path(path).read_bytes()
    base = len(MAGIC) + 12 + len(json.dumps(header, sort_keys=True, separators=(",", ":")).encode())
    dual = DualSystem(ModelConfig(**header["config"]), Vocab(header["src_vocab"]), Vocab(header["tgt_vocab"]))
    blocks, aliases = dual.canonical_blocks()
    if aliases != header["aliases"]:
        raise ContractError("checkpoint alias manifest does not match the model layout")
    by_name = {e["name"]: e for e in header["blocks"]}
    with torch.no_grad():
        for name, p in blocks:
            e = by_name[name]
            arr = np.frombuffer(raw, dtype="<f8", count=e["nbytes"] // 8, offset=base + e["offset"])
            p.copy_(torch.as_tensor(arr.reshape(e["shape"]).copy(), dtype=DTYPE))
    return dual, header["meta"]


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
