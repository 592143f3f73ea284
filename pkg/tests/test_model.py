import itertools
import math

import numpy as np
import pytest
import torch
from torch import nn

from dtnmt.errors import ContractError, MissingArtifact
from dtnmt.model import (DualSystem, ModelConfig, Seq2Seq, count_parameters, greedy_batch, greedy_decode,
                         init_dual, load_checkpoint, log_prob, read_checkpoint_header, rescore, sample_batch,
                         sample_k, save_checkpoint, sequence_log_probs)
from dtnmt.numeric import AdamState, Rng, adam_step, backward
from dtnmt.text import BOS, EOS, PAD, UNK, frame_source, pad_sequences

from conftest import small_vocab


def test_shared_matrix_is_aliased(tiny_dual):
    assert tiny_dual.forward.encoder_embed is tiny_dual.backward.decoder_embed
    with torch.no_grad():
        tiny_dual.forward.encoder_embed[5, 3] = 0.4242
    assert float(tiny_dual.backward.decoder_embed.detach()[5, 3]) == 0.4242


def test_init_is_seeded():
    cfg = ModelConfig(d_model=8, num_layers=1, num_heads=2, ffn_dim=16)
    sv, tv = small_vocab(3, "s"), small_vocab(3, "t")
    a = init_dual(cfg, sv, tv, Rng(4)).checksums()
    assert a == init_dual(cfg, sv, tv, Rng(4)).checksums()
    assert a != init_dual(cfg, sv, tv, Rng(5)).checksums()


def test_parameter_count_hand_computed():
    cfg = ModelConfig(d_model=8, num_layers=1, num_heads=2, ffn_dim=16)
    # attention 4*(8*8+8)=288; ffn 8*16+16+16*8+8=280; layer norm 16
    # encoder 288+280+2*16=600, plus final norm 16 -> 616
    # decoder 2*288+280+3*16=904, plus final norm 16 -> 920
    # embeddings (6+7)*8=104 (output projection tied to the decoder embedding)
    model = Seq2Seq(cfg, 6, 7)
    assert sum(p.numel() for p in model.parameters()) == 1640
    assert count_parameters(cfg, 6, 7) == 1640
    dual = DualSystem(cfg, small_vocab(2, "s"), small_vocab(3, "t"))
    # backward adds its own encoder embedding 7*8 and its layers; the source matrix is shared
    assert sum(p.numel() for p in dual.parameters()) == 1640 + 56 + 1536


def test_config_validation():
    with pytest.raises(ContractError):
        ModelConfig(d_model=10, num_heads=3)
    with pytest.raises(ContractError):
        ModelConfig(dropout=1.0)


def test_log_prob_single_eos(tiny_dual):
    m = tiny_dual.forward
    with torch.no_grad():
        lp = log_prob(m, [4, 5], [EOS])
        logits = m(pad_sequences([frame_source([4, 5])]), torch.tensor([[BOS]]))
        assert math.isclose(float(lp), float(torch.log_softmax(logits[0, 0], -1)[EOS]), rel_tol=1e-12)
        assert float(lp) <= 0
        assert float(lp) == float(log_prob(m, [4, 5], [BOS, EOS]))


def test_log_prob_rejects_bad_ids(tiny_dual):
    with pytest.raises(ContractError):
        log_prob(tiny_dual.forward, [99], [EOS])


def test_enumerated_mass_is_one():
    cfg = ModelConfig(d_model=8, num_layers=2, num_heads=2, ffn_dim=16, dropout=0.0)
    dual = init_dual(cfg, small_vocab(2, "s"), small_vocab(1, "t"), Rng(3)).eval()
    m = dual.forward
    x = [4, 5, 4]
    emittable = [EOS, UNK, 4]  # PAD and BOS are masked
    total = 0.0
    for n in range(3):
        for w in itertools.product([UNK, 4], repeat=n):
            total += math.exp(float(log_prob(m, x, list(w) + [EOS]).detach()))
    # continuation mass: every length-3 prefix without EOS
    for w in itertools.product([UNK, 4], repeat=3):
        total += math.exp(float(sequence_log_probs(m, [x], [list(w)])[0].detach()))
    assert len(emittable) == 3
    assert abs(total - 1.0) < 1e-9


def test_step_distributions_are_normalised(tiny_dual):
    logits = tiny_dual.forward(pad_sequences([[4, 5, EOS], [6, EOS]]), torch.tensor([[BOS, 4, 5], [BOS, 6, PAD]]))
    p = torch.softmax(logits, -1)
    assert float((p.sum(-1) - 1).abs().max().detach()) < 1e-9
    assert float(p[..., PAD].max().detach()) == 0.0 and float(p[..., BOS].max().detach()) == 0.0


class CopyModel(nn.Module):
    """Emits the source token at the current position, then EOS."""

    def __init__(self, vocab=8):
        super().__init__()
        self.cfg = ModelConfig(max_len=32)
        self.vocab = vocab

    def encode(self, src):
        return src, src.eq(PAD)

    def decode(self, memory, pad, prev):
        B, T = prev.shape
        logits = torch.zeros(B, T, self.vocab)
        for t in range(T):
            tok = memory[:, t] if t < memory.shape[1] else torch.full((B,), EOS)
            tok = torch.where(tok.eq(PAD), torch.full_like(tok, EOS), tok)
            logits[torch.arange(B), t, tok] = 10.0
        logits[..., [PAD, BOS]] = float("-inf")
        return logits


def test_greedy_copies_with_constructed_model():
    m = CopyModel()
    assert greedy_decode(m, [4, 7, 5, 6]) == [4, 7, 5, 6]
    assert greedy_batch(m, [[4, 5], [6, 6, 6]]) == [[4, 5], [6, 6, 6]]


def test_greedy_max_len_one():
    assert len(greedy_decode(CopyModel(), [4, 5, 6], max_len=1)) <= 1


def test_greedy_ties_go_to_lowest_id():
    m = CopyModel()
    m.decode = lambda memory, pad, prev: torch.zeros(prev.shape[0], prev.shape[1], 8).index_fill_(
        2, torch.tensor([PAD, BOS]), float("-inf"))
    assert greedy_decode(m, [4], max_len=3) == []  # EOS (id 2) is the lowest emittable id


def test_greedy_repeatable(tiny_dual):
    assert greedy_decode(tiny_dual.forward, [4, 5, 6]) == greedy_decode(tiny_dual.forward, [4, 5, 6])


class TwoTokenModel(nn.Module):
    """Uniform over tokens 4 and 5 at the first step, EOS after."""

    def __init__(self, sharp=False):
        super().__init__()
        self.cfg = ModelConfig(max_len=8)
        self.sharp = sharp

    def encode(self, src):
        return src, src.eq(PAD)

    def decode(self, memory, pad, prev):
        B, T = prev.shape
        logits = torch.full((B, T, 6), float("-inf"))
        logits[:, 0, 4] = 20.0 if self.sharp else 0.0
        logits[:, 0, 5] = 0.0
        logits[:, 1:, EOS] = 0.0
        return logits


def test_uniform_two_token_sampling():
    s = sample_k(TwoTokenModel(), [4], 1000, Rng(0))
    freq = dict(zip(map(tuple, s.candidates), s.counts))
    assert sum(s.counts) == 1000
    assert abs(freq[(4, EOS)] / 1000 - 0.5) < 0.05
    assert abs(freq[(5, EOS)] / 1000 - 0.5) < 0.05


def test_near_deterministic_sampling_collapses():
    s = sample_k(TwoTokenModel(sharp=True), [4], 16, Rng(1))
    assert len(s) == 1 and s.counts == [16]


def test_sample_set_invariants(tiny_dual):
    m = tiny_dual.forward
    sets = sample_batch(m, [[4, 5], [6]], 8, Rng(2))
    again = sample_batch(m, [[4, 5], [6]], 8, Rng(2))
    for s, t in zip(sets, again):
        assert s.candidates == t.candidates and np.array_equal(s.logprobs, t.logprobs)
        assert 1 <= len(s) <= 8
        for c, lp in zip(s.candidates, s.logprobs):
            assert c[-1] == EOS and EOS not in c[:-1]
            assert lp <= 0
            assert abs(lp - float(log_prob(m, s.source, c).detach())) < 1e-9


def test_rescore_is_live(tiny_dual):
    m = tiny_dual.forward
    s = sample_batch(m, [[4, 5]], 4, Rng(3))
    live = rescore(m, s)[0]
    assert live.logprobs.requires_grad
    np.testing.assert_allclose(live.logprobs.detach().numpy(), s[0].logprobs, rtol=0, atol=1e-9)


def test_samples_beat_random_sequences(tiny_dual):
    m = tiny_dual.forward
    rng = Rng(4)
    sets = sample_batch(m, [[4, 5, 6]], 200, rng)
    lp_sampled = np.average(sets[0].logprobs, weights=sets[0].counts)
    gen = rng.substream("uniform").gen
    rand = [list(gen.integers(3, 7, size=int(gen.integers(1, 6)))) + [EOS] for _ in range(200)]
    lp_random = float(sequence_log_probs(m, [[4, 5, 6]] * 200, rand).mean().detach())
    assert lp_sampled > lp_random


def test_attack_mode_freezes_everything_else(tiny_dual):
    tiny_dual.set_attack_mode()
    assert tiny_dual.in_attack_mode()
    assert tiny_dual.trainable() == [tiny_dual.shared]
    before = tiny_dual.checksums(exclude_shared=True)
    shared_before = tiny_dual.shared.detach().clone()
    logits = tiny_dual.forward(pad_sequences([[4, 5, EOS]]), torch.tensor([[BOS, 4]]))
    blogits = tiny_dual.backward(pad_sequences([[4, EOS]]), torch.tensor([[BOS, 5]]))
    loss = logits.logsumexp(-1).sum() + blogits.logsumexp(-1).sum()
    params = tiny_dual.parameters()
    adam_step(params, backward(loss, params), AdamState(lr=1e-2))
    assert tiny_dual.checksums(exclude_shared=True) == before
    assert not torch.equal(tiny_dual.shared, shared_before)
    assert torch.equal(tiny_dual.forward.encoder_embed, tiny_dual.backward.decoder_embed)


def test_set_trainable_resolves_aliases(tiny_dual):
    tiny_dual.set_trainable(["backward.decoder_embed"])
    assert tiny_dual.in_attack_mode()
    tiny_dual.set_trainable(None)
    assert all(p.requires_grad for p in tiny_dual.parameters())


def test_checkpoint_round_trip(tiny_dual, tmp_path):
    path = tmp_path / "m.ckpt"
    digest = save_checkpoint(path, tiny_dual, {"seed": 11})
    header = read_checkpoint_header(path)
    names = [b["name"] for b in header["blocks"]]
    assert "forward.encoder_embed" in names and "backward.decoder_embed" not in names
    assert header["aliases"] == {"backward.decoder_embed": "forward.encoder_embed"}
    dual, meta = load_checkpoint(path)
    assert meta == {"seed": 11}
    assert dual.checksums() == tiny_dual.checksums()
    assert dual.forward.encoder_embed is dual.backward.decoder_embed
    assert save_checkpoint(tmp_path / "again.ckpt", dual, {"seed": 11}) == digest


def test_checkpoint_errors(tmp_path):
    with pytest.raises(MissingArtifact):
        load_checkpoint(tmp_path / "none.ckpt")
    (tmp_path / "bad.ckpt").write_bytes(b"not a checkpoint")
    with pytest.raises(ContractError):
        load_checkpoint(tmp_path / "bad.ckpt")
