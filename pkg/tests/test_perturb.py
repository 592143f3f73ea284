import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dtnmt.errors import ContractError
from dtnmt.numeric import Rng
from dtnmt.perturb import (EmbeddingPair, NoiseSpec, PerturbationPolicy, adversarialize, adversarialize_many,
                           adversarialize_with_actions, default_noise_family, make_noisy_testset,
                           nearest_neighbor, neighbor_table, noise_with_actions, noisy_path)
from dtnmt.text import BOS, EOS, NON_CONTENT, PAD, ParallelCorpus

V, D = 50, 6


@pytest.fixture(scope="module")
def emb():
    return Rng(0).normal(size=(V, D))


def _sentences(n, length, seed=1):
    g = Rng(seed).gen
    return [list(map(int, g.integers(3, V, size=length))) for _ in range(n)]


def test_policy_validation():
    PerturbationPolicy()
    with pytest.raises(ContractError):
        PerturbationPolicy(p_rp=0.5, p_rd=0.2)
    with pytest.raises(ContractError):
        PerturbationPolicy(p_np=1.2)
    p = PerturbationPolicy.from_adv_percent(30)
    assert p.p_np == pytest.approx(0.7) and p.adv_percent == pytest.approx(30)


def test_noise_spec():
    assert NoiseSpec("rd", 0.15).name == "rd15"
    assert NoiseSpec.parse("rp30") == NoiseSpec("rp", 0.3)
    assert [s.name for s in default_noise_family()][:2] == ["rd10", "rd15"]
    assert len(default_noise_family()) == 10
    assert noisy_path("/x/test", NoiseSpec("rd", 0.15)).name == "test.rd15.src"
    for bad in (("rd", 0.0), ("rd", 1.0), ("ins", 0.1)):
        with pytest.raises(ContractError):
            NoiseSpec(*bad)


def test_nearest_neighbor_examples():
    e = np.array([[1.0, 0.0], [0.9, 0.1], [0.0, 1.0]])
    assert nearest_neighbor(0, e, e, exclusions=()) == 1
    # orthogonal query: all cosines tie at 0, lowest eligible id wins
    e2 = np.array([[1.0, 0.0], [0.0, 1.0], [0.0, -1.0], [0.0, 2.0]])
    assert nearest_neighbor(0, e2, e2, exclusions=()) == 1
    assert nearest_neighbor(0, e2, e2, exclusions=(1,)) == 2
    with pytest.raises(ContractError):
        nearest_neighbor(0, e, e, exclusions=(1, 2))
    with pytest.raises(ContractError):
        nearest_neighbor(1, e, e, exclusions=(1,))


def test_neighbor_table_matches_scan(emb):
    table = neighbor_table(emb, emb)
    for tok in range(V):
        if tok in NON_CONTENT:
            assert table[tok] == -1
        else:
            assert table[tok] == nearest_neighbor(tok, emb, emb)
            assert table[tok] != tok and table[tok] not in NON_CONTENT


def test_embedding_pair_validation(emb):
    with pytest.raises(ContractError):
        EmbeddingPair(emb, emb[:, :3])
    bad = emb.copy()
    bad[7] = 0
    with pytest.raises(ContractError):
        EmbeddingPair(bad)
    assert not EmbeddingPair(emb).moved and EmbeddingPair(emb, emb + 0.1).moved


def test_degenerate_policies(emb):
    pair = EmbeddingPair(emb)
    s = [BOS, 5, 6, 7, EOS]
    assert adversarialize(s, PerturbationPolicy(p_np=1.0), pair, None, Rng(0)) == s
    out = adversarialize(s, PerturbationPolicy(p_np=0.0, p_rp=0.0, p_rd=1.0), pair, None, Rng(0))
    assert out == [BOS, 7, EOS]  # floor keeps the last content token


def test_noise_floor(emb):
    out = make_noisy_testset(ParallelCorpus([[5]], [[6]]), NoiseSpec("rd", 0.999999), emb, None, Rng(0))
    assert out.src == [[5]]


def test_adversarial_statistics(emb):
    pair = EmbeddingPair(emb, emb + Rng(9).normal(scale=0.3, size=emb.shape))
    policy = PerturbationPolicy()
    rng = Rng(3)
    actions = []
    for i, s in enumerate(_sentences(1000, 12)):
        actions += adversarialize_with_actions(s, policy, pair, rng.substream("sent", i))[1]
    n = len(actions)
    perturbed = sum(a in ("replace", "delete") for a in actions)
    deleted = actions.count("delete")
    assert n >= 10_000
    assert abs(perturbed / n - 0.30) <= 0.02
    assert abs(deleted / perturbed - 0.20) <= 0.03


@pytest.mark.parametrize("ratio", [0.10, 0.15, 0.30])
@pytest.mark.parametrize("kind", ["rd", "rp"])
def test_noise_statistics(emb, kind, ratio):
    src = _sentences(2000, 10, seed=2)
    corpus = ParallelCorpus(src, [[4]] * len(src))
    spec = NoiseSpec(kind, ratio)
    table = neighbor_table(emb, emb)
    rng = Rng(5).substream("noise", spec.name)
    actions = []
    for i, s in enumerate(src):
        actions += noise_with_actions(s, spec, table, rng.substream("sent", i))[1]
    frac = sum(a != "keep" for a in actions) / len(actions)
    assert abs(frac - ratio) <= 0.01
    out = make_noisy_testset(corpus, spec, emb, None, Rng(5))
    assert out.tgt == corpus.tgt
    if kind == "rp":
        assert [len(s) for s in out.src] == [len(s) for s in src]
        changed = sum(a != b for x, y in zip(src, out.src) for a, b in zip(x, y))
        assert changed == sum(a == "replace" for a in actions)
    else:
        assert sum(len(s) for s in src) - sum(len(s) for s in out.src) == actions.count("delete")


def test_tiny_ratio_leaves_corpus_unchanged(emb):
    corpus = ParallelCorpus(_sentences(100, 8), [[4]] * 100)
    for kind in ("rd", "rp"):
        assert make_noisy_testset(corpus, NoiseSpec(kind, 1e-9), emb, None, Rng(0)).src == corpus.src


def test_noise_deterministic(emb):
    corpus = ParallelCorpus(_sentences(50, 8), [[4]] * 50)
    spec = NoiseSpec("rp", 0.2)
    assert make_noisy_testset(corpus, spec, emb, None, Rng(1)).src == \
        make_noisy_testset(corpus, spec, emb, None, Rng(1)).src
    assert make_noisy_testset(corpus, spec, emb, None, Rng(1)).src != \
        make_noisy_testset(corpus, spec, emb, None, Rng(2)).src


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(0, V - 1), min_size=1, max_size=15), st.integers(0, 1000),
       st.sampled_from(["adv", "rd", "rp"]))
def test_specials_never_perturbed(sentence, seed, mode):
    e = Rng(0).normal(size=(V, D))
    if mode == "adv":
        policy = PerturbationPolicy(p_np=0.2)
        out, actions = adversarialize_with_actions(sentence, policy, EmbeddingPair(e, e * 1.1 + 0.05), Rng(seed))
    else:
        out, actions = noise_with_actions(sentence, NoiseSpec(mode, 0.6), neighbor_table(e, e), Rng(seed))
    # specials survive in place and in order; nothing new becomes special
    specials_in = [t for t in sentence if t in (PAD, BOS, EOS)]
    assert [t for t in out if t in (PAD, BOS, EOS)] == specials_in
    assert all(a == "special" for t, a in zip(sentence, actions) if t in (PAD, BOS, EOS))
    if any(t not in NON_CONTENT for t in sentence):
        assert any(t not in NON_CONTENT for t in out)
    # replacements never map a token to itself
    kept = iter(out)
    for t, a in zip(sentence, actions):
        if a == "delete":
            continue
        o = next(kept)
        if a == "replace":
            assert o != t


def test_identity_pair_matches_testset_replacement(emb):
    pair = EmbeddingPair(emb, emb)
    assert np.array_equal(pair.table, neighbor_table(emb, emb))
    s = [5, 9, 13, 20]
    replace_all = PerturbationPolicy(p_np=0.0, p_rp=1.0, p_rd=0.0)
    adv = adversarialize(s, replace_all, pair, None, Rng(0))
    noisy = noise_with_actions(s, NoiseSpec("rp", 0.999999999), neighbor_table(emb, emb), Rng(0))[0]
    assert adv == noisy == [int(neighbor_table(emb, emb)[t]) for t in s]


def test_attacked_pair_uses_attacked_query(emb):
    moved = emb.copy()
    moved[5] = emb[9] * 2  # token 5 now points at token 9 in E
    assert EmbeddingPair(emb, moved).neighbor(5) == 9


def test_adversarialize_many_keys(emb):
    pair = EmbeddingPair(emb)
    policy = PerturbationPolicy(p_np=0.3)
    sents = _sentences(6, 8)
    full = adversarialize_many(sents, range(6), policy, pair, Rng(4))
    # per-sentence substreams: a subset with the same keys reproduces the same outputs
    part = adversarialize_many(sents[2:4], [2, 3], policy, pair, Rng(4))
    assert part == full[2:4]


def test_vocab_check(emb):
    from conftest import small_vocab

    with pytest.raises(ContractError):
        adversarialize([4, 99], PerturbationPolicy(), EmbeddingPair(emb), small_vocab(5, "s"), Rng(0))
