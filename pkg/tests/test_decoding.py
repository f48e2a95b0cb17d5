import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from decodesweep.backend import EOS, FixedTableBackend, TokenDistribution, train_ngram_backend
from decodesweep.decoding import (
    DecodingConfig,
    adaptive_contrastive_search_decode,
    apply_temperature,
    beam_decode,
    contrastive_decode,
    contrastive_search_decode,
    decode,
    fsd_decode,
    fsd_scores,
    greedy_decode,
    nucleus_set,
    sample_decode,
    sampling_distribution,
    top_indices,
    truncate_top_k,
    typical_mass_set,
)
from decodesweep.errors import CapabilityError, ConfigError, InputError

from oracles import best_sequence, joint_logprob, nucleus_oracle, random_table, shannon_entropy, typical_oracle

dists = st.lists(st.floats(0.0, 1.0), min_size=2, max_size=12).filter(lambda xs: sum(xs) > 1e-3).map(
    lambda xs: TokenDistribution(np.asarray(xs) / sum(xs))
)


# --- config keys ---------------------------------------------------------------


@pytest.mark.parametrize(
    "key",
    ["greedy", "beam[w=10]", "temp[t=0.9]", "topk[k=50]", "topp[p=0.95]", "typical[tau=0.9]",
     "cs[alpha=0.6,k=10]", "acs", "fsd[k=5,beta=0.5]", "cd[k=5,amateur=small]"],
)
def test_strategy_key_round_trip(key):
    cfg = DecodingConfig.parse(key)
    assert cfg.key == key
    assert DecodingConfig.parse(cfg.key) == cfg


def test_key_number_formatting():
    assert DecodingConfig("temperature", t=1.0).key == "temp[t=1]"
    assert DecodingConfig("top_p", p=0.1 + 0.2).key == "topp[p=0.30000000000000004]"
    assert DecodingConfig.parse("temp[t=1]").t == 1.0
    assert DecodingConfig("adaptive_contrastive_search", k=3).key == "acs[k=3]"


@pytest.mark.parametrize(
    "kwargs",
    [
        dict(strategy="beam", w=0),
        dict(strategy="beam"),
        dict(strategy="beam", w=3, k=2),
        dict(strategy="top_p", p=0.0),
        dict(strategy="top_p", p=1.2),
        dict(strategy="temperature", t=0.0),
        dict(strategy="contrastive_search", alpha=1.5, k=3),
        dict(strategy="typical", tau=0.0),
        dict(strategy="fsd", beta=-1.0),
        dict(strategy="top_k", k=2.5),
        dict(strategy="contrastive_decoding"),
        dict(strategy="nope"),
    ],
)
def test_config_validation(kwargs):
    with pytest.raises(ConfigError):
        DecodingConfig(**kwargs)


# --- truncation ops --------------------------------------------------------------


def test_truncate_top_k_examples():
    d = TokenDistribution([0.5, 0.3, 0.2])
    np.testing.assert_allclose(truncate_top_k(d, 2).probs, [0.625, 0.375, 0.0])
    assert truncate_top_k(d, 3) is d
    assert truncate_top_k(d, 10) is d
    assert truncate_top_k(d, 1).probs.tolist() == [1.0, 0.0, 0.0]


def test_top_k_tie_rule():
    d = TokenDistribution([0.25, 0.25, 0.25, 0.25])
    assert np.flatnonzero(truncate_top_k(d, 2).probs).tolist() == [0, 1]
    assert top_indices(np.array([0.1, 0.3, 0.3, 0.3]), 2).tolist() == [1, 2]


def test_nucleus_examples():
    d = TokenDistribution([0.5, 0.3, 0.2])
    assert nucleus_set(d, 0.7).tolist() == [0, 1]
    assert nucleus_set(d, 1.0).tolist() == [0, 1, 2]
    assert nucleus_set(TokenDistribution(np.full(10, 0.1)), 0.35).tolist() == [0, 1, 2, 3]


def test_nucleus_matches_rational_oracle(rng):
    for _ in range(500):
        n = rng.integers(2, 12)
        probs = rng.dirichlet(np.ones(n) * rng.choice([0.1, 1.0, 10.0]))
        p = float(rng.choice([0.6, 0.7, 0.8, 0.9, 0.95, rng.random()]))
        got = nucleus_set(TokenDistribution(probs), max(p, 1e-6)).tolist()
        assert got == nucleus_oracle(probs.tolist(), max(p, 1e-6))


def test_temperature_examples():
    np.testing.assert_allclose(apply_temperature([2.0, 0.0], 1.0).probs, [0.8807970779778823, 0.11920292202211755])
    assert apply_temperature([2.0, 0.0], 1.0).probs[0] == pytest.approx(math.exp(2) / (math.exp(2) + 1), rel=1e-14)
    assert apply_temperature([2.0, 0.0], 1e-4).probs.tolist() == [1.0, 0.0]
    logits = np.array([0.3, -1.2, 2.0])
    np.testing.assert_allclose(apply_temperature(logits, 1.0).probs, np.exp(logits) / np.exp(logits).sum())
    with pytest.raises(InputError):
        apply_temperature(logits, 0.0)


def test_typical_examples():
    uniform = TokenDistribution(np.full(8, 0.125))
    for tau in (0.1, 0.3, 0.5, 0.9, 1.0):
        assert typical_mass_set(uniform, tau).tolist() == list(range(math.ceil(tau * 8)))
    assert typical_mass_set(TokenDistribution([0.0, 1.0, 0.0]), 0.5).tolist() == [1]
    probs = [0.7, 0.2, 0.1]
    assert typical_oracle(probs, 0.2) == [0]
    assert typical_mass_set(TokenDistribution(probs), 0.2).tolist() == [0]
    assert shannon_entropy(probs) == pytest.approx(0.8018, abs=1e-4)


def test_typical_matches_oracle(rng):
    for _ in range(300):
        probs = rng.dirichlet(np.ones(rng.integers(2, 10)))
        tau = float(rng.uniform(0.05, 1.0))
        assert typical_mass_set(TokenDistribution(probs), tau).tolist() == typical_oracle(probs.tolist(), tau)


@settings(max_examples=200, deadline=None)
@given(dists, st.integers(1, 12), st.integers(1, 12))
def test_top_k_monotone_and_valid(dist, k1, k2):
    k1, k2 = sorted((k1, k2))
    s1 = set(np.flatnonzero(truncate_top_k(dist, k1).probs))
    out = truncate_top_k(dist, k2)
    assert s1 <= set(np.flatnonzero(out.probs))
    assert set(np.flatnonzero(out.probs)) <= set(np.flatnonzero(dist.probs))
    assert abs(out.probs.sum() - 1) <= 1e-9


@settings(max_examples=200, deadline=None)
@given(dists, st.floats(1e-6, 1.0), st.floats(1e-6, 1.0))
def test_nucleus_monotone_and_valid(dist, p1, p2):
    p1, p2 = sorted((p1, p2))
    s1, s2 = set(nucleus_set(dist, p1).tolist()), set(nucleus_set(dist, p2).tolist())
    assert s1 and s1 <= s2 <= set(np.flatnonzero(dist.probs).tolist())
    for cfg in (DecodingConfig("top_p", p=p2), DecodingConfig("typical", tau=p2)):
        probs = sampling_distribution(dist, cfg)
        assert abs(probs.sum() - 1) <= 1e-9 and probs.min() >= 0
        assert set(np.flatnonzero(probs)) <= set(np.flatnonzero(dist.probs))


# --- deterministic strategies -------------------------------------------------


def test_greedy_toy(toy):
    rec = greedy_decode(toy, [], 2)
    assert rec.continuation == (0, 0)  # A, then the A/B tie resolves to A
    assert math.exp(sum(rec.step_logprobs)) == pytest.approx(0.30)


def test_greedy_is_not_globally_optimal(toy):
    table = {(): [0.6, 0.4], (0,): [0.5, 0.5], (1,): [0.9, 0.1]}
    best, score = best_sequence(table, 2, 2)
    assert best == (1, 0) and math.exp(score) == pytest.approx(0.36)
    assert greedy_decode(toy, [], 2).continuation != best


def test_beam_toy(toy):
    rec = beam_decode(toy, [], 2, 2)
    assert rec.continuation == (1, 0)
    assert math.exp(sum(rec.step_logprobs)) == pytest.approx(0.36)


def test_beam_width_one_is_greedy(rng):
    for _ in range(20):
        table = random_table(rng, 4, 4, zero_frac=0.0)
        m = FixedTableBackend("r", list("abcd"), table)
        assert beam_decode(m, [], 1, 4).continuation == greedy_decode(m, [], 4).continuation


def test_beam_exhaustive_with_end_of_text(rng):
    tokens = ["a", "b", "c", EOS]
    for _ in range(15):
        table = random_table(rng, 4, 4)
        m = FixedTableBackend("r", tokens, table)
        rec = beam_decode(m, [], 4 ** 4, 4)
        best, score = best_sequence(table, 4, 4, eos=3)
        assert rec.continuation == best
        assert joint_logprob(table, rec.continuation) == score


def test_end_of_text_stops_generation():
    m = FixedTableBackend("e", ["a", EOS], {(): [0.4, 0.6]})
    for key in ("greedy", "cs[alpha=0.5,k=2]", "fsd[k=2,beta=0.1]", "acs"):
        rec = decode(m, [0], DecodingConfig.parse(key), max_new_tokens=10)
        assert rec.continuation == (1,)


def test_contrastive_search_alpha_zero_is_greedy(small_ngram):
    for prompt in ([1, 2], [7], [30, 31, 32]):
        g = greedy_decode(small_ngram, prompt, 12)
        for k in (1, 3, 10):
            assert contrastive_search_decode(small_ngram, prompt, 0.0, k, 12).continuation == g.continuation


def test_contrastive_search_k1_ignores_alpha(small_ngram):
    outs = {contrastive_search_decode(small_ngram, [5, 6], a, 1, 12).continuation for a in (0.2, 0.4, 0.6, 0.8, 1.0)}
    assert len(outs) == 1


def test_contrastive_search_identical_representations_pick_lowest_index():
    probs = [0.1, 0.4, 0.3, 0.2]
    m = FixedTableBackend("flat", list("abcd"), {(): probs}, representations=np.ones((4, 3)))
    rec = contrastive_search_decode(m, [2], 1.0, 3, 5)
    # top-3 candidates are {1, 2, 3}; all penalties equal
    assert rec.continuation == (1,) * 5


def test_contrastive_search_penalizes_repetition():
    # one-hot-ish representations: repeating a context token costs the full penalty
    probs = [0.5, 0.45, 0.05]
    m = FixedTableBackend("rep", list("abc"), {(): probs}, representations=np.eye(3))
    rec = contrastive_search_decode(m, [0], 0.5, 2, 1)
    # token 0: 0.5*0.5 - 0.5*1 = -0.25 ; token 1: 0.5*0.45 - 0 = 0.225
    assert rec.continuation == (1,)


def test_contrastive_search_requires_representations():
    m = FixedTableBackend("plain", ["A", "B"], {(): [0.5, 0.5]}, representations=None)
    with pytest.raises(CapabilityError):
        contrastive_search_decode(m, [0], 0.5, 2, 3)
    with pytest.raises(CapabilityError):
        adaptive_contrastive_search_decode(m, [0], 3)


def test_acs_alpha_trace_extremes():
    uniform = FixedTableBackend("u", list("abcd"), {(): [0.25] * 4})
    rec = adaptive_contrastive_search_decode(uniform, [0], 3)
    assert rec.trace == pytest.approx((1.0, 1.0, 1.0))
    onehot = FixedTableBackend("o", list("abcd"), {(): [0.0, 0.0, 1.0, 0.0]})
    rec = adaptive_contrastive_search_decode(onehot, [0], 3)
    assert rec.trace == (0.0, 0.0, 0.0)
    assert rec.continuation == greedy_decode(onehot, [0], 3).continuation


def test_acs_equals_fixed_alpha_on_constant_entropy_backend():
    base = [0.5, 0.3, 0.15, 0.05]
    # every row is a permutation of the same probabilities: constant entropy
    table = {(): base}
    for tok in range(4):
        table[(tok,)] = list(np.roll(base, tok + 1))
    m = FixedTableBackend("perm", list("abcd"), table)
    alpha = shannon_entropy(base) / math.log(4)
    for k in (2, 3, 4):
        acs = adaptive_contrastive_search_decode(m, [0], 10, k=k)
        assert acs.trace == pytest.approx((alpha,) * 10, rel=1e-12)
        cs = contrastive_search_decode(m, [0], acs.trace[0], k, 10)
        assert acs.continuation == cs.continuation


def test_fsd_beta_zero_is_greedy(small_ngram):
    for prompt in ([1, 2], [9, 9, 9]):
        assert fsd_decode(small_ngram, prompt, 5, 0.0, 12).continuation == greedy_decode(small_ngram, prompt, 12).continuation


def test_fsd_toy_scores():
    lm = np.array([0.5, 0.4, 0.1])
    anti = np.array([0.9, 0.05, 0.05])
    scores = fsd_scores(lm, anti, np.arange(3), 0.5)
    np.testing.assert_allclose(scores, [-0.20, 0.175, 0.025], atol=1e-15)
    assert int(np.argmax(scores)) == 1


def test_fsd_penalizes_repeated_token():
    # the LM prefers R (index 0) everywhere; a prefix full of R should push FSD elsewhere
    m = FixedTableBackend("lm", ["R", "X", "Y"], {(): [0.5, 0.4, 0.1]})
    prompt = [0] * 10
    rec = fsd_decode(m, prompt, k=3, beta=0.5, max_new_tokens=1)
    assert rec.continuation == (1,)
    assert greedy_decode(m, prompt, 1).continuation == (0,)


def test_contrastive_decoding_examples():
    expert = FixedTableBackend("expert", list("abc"), {(): [0.6, 0.3, 0.1]})
    amateur = FixedTableBackend("amateur", list("abc"), {(): [0.5, 0.1, 0.4]})
    assert contrastive_decode(expert, amateur, [0], k=2, max_new_tokens=1).continuation == (1,)
    # identical models: all differences 0, lowest index in the top-k set
    mid = FixedTableBackend("mid", list("abc"), {(): [0.2, 0.5, 0.3]})
    assert contrastive_decode(mid, mid, [0], k=2, max_new_tokens=3).continuation == (1, 1, 1)
    uniform = FixedTableBackend("uni", list("abc"), {(): [1 / 3] * 3})
    assert contrastive_decode(mid, uniform, [0], k=3, max_new_tokens=2).continuation == (1, 1)


def test_contrastive_decoding_vocab_mismatch():
    a = FixedTableBackend("a", list("abc"), {(): [0.6, 0.3, 0.1]})
    b = FixedTableBackend("b", list("abd"), {(): [0.6, 0.3, 0.1]})
    with pytest.raises(ConfigError):
        contrastive_decode(a, b, [0], 2, 1)
    with pytest.raises(ConfigError):
        decode(a, [0], DecodingConfig.parse("cd[k=2,amateur=missing]"), backends={"a": a})


# --- sampling -------------------------------------------------------------------


def test_top_k_one_sampling_is_greedy(small_ngram):
    g = greedy_decode(small_ngram, [3, 4], 16).continuation
    for seed in range(20):
        assert sample_decode(small_ngram, [3, 4], DecodingConfig("top_k", k=1), seed, 16).continuation == g


def test_sampling_reproducible_per_seed(small_ngram):
    for key in ("temp[t=0.7]", "topk[k=10]", "topp[p=0.9]", "typical[tau=0.9]"):
        cfg = DecodingConfig.parse(key)
        a = sample_decode(small_ngram, [3], cfg, 99, 24)
        b = sample_decode(small_ngram, [3], cfg, 99, 24)
        assert a == b
        others = {sample_decode(small_ngram, [3], cfg, s, 24).continuation for s in range(5)}
        assert len(others) > 1


def test_low_temperature_has_lower_step_entropy(small_ngram):
    dist = small_ngram.next_distribution([3])
    cold = sampling_distribution(dist, DecodingConfig("temperature", t=0.1))
    warm = sampling_distribution(dist, DecodingConfig("temperature", t=1.0))
    assert shannon_entropy(cold) < shannon_entropy(warm)
    np.testing.assert_allclose(warm, dist.probs, rtol=1e-10)


def test_sampling_config_mismatch(small_ngram):
    with pytest.raises(ConfigError):
        sample_decode(small_ngram, [1], DecodingConfig("greedy"), 0, 4)


# --- cross-strategy invariants -----------------------------------------------------

ALL_KEYS = ("greedy", "beam[w=3]", "cs[alpha=0.6,k=5]", "acs", "fsd[k=5,beta=0.5]", "cd[k=5,amateur=uni1]",
            "temp[t=0.7]", "topk[k=5]", "topp[p=0.9]", "typical[tau=0.9]")


@pytest.fixture(scope="module")
def pair(natural_docs):
    train, _ = natural_docs
    expert = train_ngram_backend(train[:200], 2, 0.05, name="big2")
    amateur = train_ngram_backend(train[:200], 1, 0.05, name="uni1")
    return expert, amateur


@pytest.mark.parametrize("key", ALL_KEYS)
def test_step_logprobs_replay(pair, key):
    expert, amateur = pair
    prompt = [4, 5, 6]
    rec = decode(expert, prompt, DecodingConfig.parse(key), seed=11, max_new_tokens=20,
                 backends={"uni1": amateur})
    assert len(rec.step_logprobs) == len(rec.continuation) == 20
    ctx = list(prompt)
    for tok, lp in zip(rec.continuation, rec.step_logprobs):
        assert lp == math.log(expert.next_distribution(ctx).probs[tok])
        ctx.append(tok)


@pytest.mark.parametrize("key", [k for k in ALL_KEYS if not DecodingConfig.parse(k).stochastic])
def test_deterministic_strategies_ignore_seed(pair, key):
    expert, amateur = pair
    outs = {
        decode(expert, [7, 8], DecodingConfig.parse(key), seed=s, max_new_tokens=12, backends={"uni1": amateur}).continuation
        for s in (0, 1, 2**63)
    }
    assert len(outs) == 1


def test_record_serialization_round_trip(pair):
    expert, amateur = pair
    rec = decode(expert, [1, 2], DecodingConfig.parse("acs"), max_new_tokens=5, dataset_id="d", prompt_id="p")
    from decodesweep.decoding import GenerationRecord

    again = GenerationRecord.from_dict(rec.to_dict(expert.vocab), expert.vocab)
    assert again == rec
