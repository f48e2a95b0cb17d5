import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from decodesweep.backend import FixedTableBackend, sequence_logprob
from decodesweep.errors import EvaluationError, InputError, RangeError
from decodesweep.metrics import (
    MetricReport,
    NormalizationPool,
    coherence_raw,
    diversity,
    divergence_frontier,
    frontier_area,
    hashed_text_embedding,
    mauve_lite,
    normalize_coherence,
    qtext,
    quantize,
)

from oracles import naive_diversity

unit = st.floats(0.0, 1.0)


# --- diversity ------------------------------------------------------------------


def test_diversity_examples():
    assert diversity("a b c d e f".split()) == 1.0
    assert diversity("a b a b a b".split()) == pytest.approx(2 / 15, abs=1e-12)
    assert diversity("x x x x x".split()) == pytest.approx(1 / 24, abs=1e-12)


def test_diversity_short_is_degenerate_zero():
    for n in range(5):
        assert diversity(["a"] * n) == 0.0


def test_diversity_matches_naive_counter(rng):
    for _ in range(300):
        n = int(rng.integers(5, 200))
        seq = rng.integers(0, int(rng.integers(1, 12)), size=n).tolist()
        assert diversity(seq) == naive_diversity(seq)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(0, 5), min_size=5, max_size=60), st.permutations(range(6)))
def test_diversity_relabeling_invariant(seq, perm):
    assert diversity(seq) == diversity([perm[t] for t in seq])
    assert 0 < diversity(seq) <= 1


# --- coherence ------------------------------------------------------------------


def test_coherence_examples(toy):
    half = FixedTableBackend("half", ["A", "B"], {(): [0.5, 0.5]})
    assert coherence_raw([0], [1, 0, 1], half) == pytest.approx(math.log(0.5))
    assert coherence_raw([], [0, 0], toy) == pytest.approx((math.log(0.6) + math.log(0.5)) / 2)
    assert coherence_raw([], [0, 0], toy) == pytest.approx(-0.6020, abs=1e-4)
    assert coherence_raw([1], [0, 1], toy) == sequence_logprob(toy, [1], [0, 1]) / 2


def test_coherence_zero_probability_and_empty():
    m = FixedTableBackend("z", ["A", "B"], {(): [1.0, 0.0]})
    assert coherence_raw([0], [1], m) == -math.inf
    with pytest.raises(InputError):
        coherence_raw([0], [], m)


# --- COH ------------------------------------------------------------------------


def test_normalize_coherence_examples():
    pool = NormalizationPool([-5.0, -3.0, -1.0])
    assert [normalize_coherence(v, pool) for v in (-5.0, -3.0, -1.0)] == [0.2, 0.6, 1.0]


def test_normalize_coherence_errors():
    pool = NormalizationPool([-5.0, -1.0])
    with pytest.raises(RangeError):
        normalize_coherence(-0.5, pool)
    with pytest.raises(InputError):
        normalize_coherence(0.0, NormalizationPool([]))
    single = NormalizationPool([-2.0])
    assert normalize_coherence(-2.0, single) == 1.0


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-50, 0), min_size=2, max_size=20))
def test_normalize_coherence_monotone(values):
    pool = NormalizationPool(values)
    ordered = sorted(set(values))
    mapped = [normalize_coherence(v, pool) for v in ordered]
    # gaps far below one ulp of 1.0 are absorbed by the +1 smoothing term
    for (x, y), (a, b) in zip(zip(ordered, ordered[1:]), zip(mapped, mapped[1:])):
        assert a <= b
        if y - x >= 1e-9:
            assert a < b
    assert mapped[-1] == 1.0 and mapped[0] > 0


# --- QText ------------------------------------------------------------------------


def test_qtext_examples():
    assert qtext(0.5, 0.5, 0.5) == 0.5
    assert qtext(0.8, 0.9, 0.6) == pytest.approx(3 / (1.25 + 1 / 0.9 + 1 / 0.6), rel=1e-15)
    assert qtext(0.8, 0.9, 0.6) == pytest.approx(0.7448, abs=1e-4)
    assert qtext(0.3, 0.7, 0.0) == 0.0
    with pytest.raises(InputError):
        qtext(1.2, 0.5, 0.5)
    with pytest.raises(InputError):
        qtext(0.5, -0.1, 0.5)


@settings(max_examples=300, deadline=None)
@given(unit, unit, unit)
def test_qtext_bounds_and_symmetry(a, b, c):
    q = qtext(a, b, c)
    assert min(a, b, c) <= q <= max(a, b, c)
    assert q == qtext(b, c, a) == qtext(c, a, b) == qtext(a, c, b)


@settings(max_examples=200, deadline=None)
@given(unit)
def test_qtext_equal_components(x):
    assert qtext(x, x, x) == x


def test_metric_report_build():
    r = MetricReport.build("k", 0.8, -2.0, 0.6, 0.9, n_generations=3)
    assert r.qtext == qtext(0.8, 0.9, 0.6)


# --- MAUVE-lite -----------------------------------------------------------------


def _clouds(rng, n=60, dim=8, sep=100.0):
    a = rng.normal(0, 1, size=(n, dim))
    b = rng.normal(0, 1, size=(n, dim)) + sep
    return list(a), list(b)


def _ident(x):
    return np.asarray(x)


def test_mauve_identical_sets(rng, natural_docs):
    _, heldout = natural_docs
    texts = [tuple(d[:32]) for d in heldout[:40]]
    assert mauve_lite(texts, texts) == pytest.approx(1.0, abs=1e-6)
    a, _ = _clouds(rng)
    assert mauve_lite(a, a, _ident) == pytest.approx(1.0, abs=1e-6)


def test_mauve_disjoint_clouds(rng):
    a, b = _clouds(rng)
    p, q = quantize(np.stack(a), np.stack(b), 16)
    assert not np.any((p > 0) & (q > 0))
    assert mauve_lite(a, b, _ident) < 0.1


def test_mauve_symmetric_and_order_invariant(rng, natural_docs):
    _, heldout = natural_docs
    gen = [tuple(d[:24]) for d in heldout[:30]]
    ref = [tuple(d[24:48]) for d in heldout[10:40]]
    s = mauve_lite(gen, ref)
    assert 0.0 <= s <= 1.0
    assert mauve_lite(ref, gen) == pytest.approx(s, abs=1e-9)
    perm = rng.permutation(len(gen))
    assert mauve_lite([gen[i] for i in perm], ref[::-1]) == s


def test_mauve_overlap_between_extremes(rng):
    a, b = _clouds(rng, sep=1.0)
    s = mauve_lite(a, b, _ident, num_bins=4)
    far = mauve_lite(*_clouds(rng, sep=100.0), _ident, num_bins=4)
    assert far < s < 1.0


def test_frontier_area_endpoints():
    p = np.array([0.5, 0.5])
    assert frontier_area(divergence_frontier(p, p, 5.0)) == pytest.approx(1.0)
    p, q = np.array([1.0, 0.0]), np.array([0.0, 1.0])
    pts = divergence_frontier(p, q, 5.0)
    assert pts[0, 0] == 1.0 and pts[-1, 1] == 1.0


def test_mauve_errors():
    def broken(text):
        if text == "bad":
            raise ValueError("nope")
        return np.ones(3)

    with pytest.raises(EvaluationError, match="text 1"):
        mauve_lite(["ok", "bad"], ["ok"], broken)
    with pytest.raises(InputError):
        mauve_lite([], ["a"])
    with pytest.raises(InputError):
        mauve_lite(["a"], ["a"], num_bins=1)


def test_hashed_text_embedding_shape():
    v = hashed_text_embedding(["a", "b", "c"])
    assert v.shape == (64,) and np.all(np.isfinite(v))
    with pytest.raises(InputError):
        hashed_text_embedding([])
