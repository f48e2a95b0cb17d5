"""Automatic text-quality metrics: diversity, coherence, MAUVE-lite, QText.

All scores live on [0, 1] except ``coherence_raw`` (mean log-probability in
nats). Reports multiply by 100 for display only.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Hashable, Iterable, Sequence

import numpy as np

from .backend import DEFAULT_REPR_DIM, LanguageModel, hashed_representation, sequence_logprob
from .errors import EvaluationError, InputError, RangeError

MIN_DIVERSITY_LEN = 5
DIVERSITY_ORDERS = (2, 3, 4)
MAUVE_NUM_BINS = 16
MAUVE_SCALING = 5.0
MAUVE_SEED = 25
MAUVE_MIXTURES = 101


def ngram_ratio(tokens: Sequence[Hashable], n: int) -> float:
    grams = [tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1)]
    return len(set(grams)) / len(grams)


def diversity(continuation: Sequence[Hashable]) -> float:
    """Product over n=2..4 of unique/total n-gram ratios.

    Continuations shorter than five tokens are degenerate and score 0.
    """
    if len(continuation) < MIN_DIVERSITY_LEN:
        return 0.0
    tokens = list(continuation)
    score = 1.0
    for n in DIVERSITY_ORDERS:
        score *= ngram_ratio(tokens, n)
    return score


def coherence_raw(prefix: Sequence[int], continuation: Sequence[int], evaluator: LanguageModel) -> float:
    """Mean per-token log-likelihood of ``continuation`` given ``prefix``."""
    if len(continuation) == 0:
        raise InputError("continuation must be non-empty")
    return sequence_logprob(evaluator, prefix, continuation) / len(continuation)


@dataclass
class NormalizationPool:
    """Min/max constants for smoothed min-max normalization of coherence."""

    values: list[float] = field(default_factory=list)
    scope_id: str = "global"

    def add(self, value: float) -> None:
        self.values.append(float(value))

    def extend(self, values: Iterable[float]) -> None:
        for v in values:
            self.add(v)

    @property
    def min(self) -> float:
        self._check()
        return min(self.values)

    @property
    def max(self) -> float:
        self._check()
        return max(self.values)

    def _check(self) -> None:
        if not self.values:
            raise InputError(f"normalization pool {self.scope_id!r} is empty")
        if not all(math.isfinite(v) for v in self.values):
            raise InputError(f"normalization pool {self.scope_id!r} holds non-finite values")

    def normalize(self, value: float) -> float:
        return normalize_coherence(value, self)


def normalize_coherence(value: float, pool: NormalizationPool) -> float:
    """``(value - min + 1) / (max - min + 1)``, in (0, 1] over the pool range."""
    lo, hi = pool.min, pool.max
    if not lo <= value <= hi:
        raise RangeError(f"coherence {value!r} outside pool {pool.scope_id!r} range [{lo!r}, {hi!r}]")
    return (value - lo + 1.0) / (hi - lo + 1.0)


def qtext(div: float, mauve: float, coh: float) -> float:
    """Harmonic mean of the three unit-scale scores; 0 if any is 0.

    Evaluated in exact rational arithmetic and rounded once, so equal inputs
    return that input and the result never leaves [min, max].
    """
    parts = (div, mauve, coh)
    for name, x in zip(("div", "mauve", "coh"), parts):
        if not 0.0 <= x <= 1.0:
            raise InputError(f"{name}={x!r} outside [0, 1]")
    if any(x == 0 for x in parts):
        return 0.0
    return float(3 / sum(1 / Fraction(x) for x in parts))


# --- MAUVE-lite ------------------------------------------------------------


def hashed_text_embedding(tokens: Sequence[str], window: int = 1, dim: int = DEFAULT_REPR_DIM) -> np.ndarray:
    """Mean of hashed token representations over a token-string sequence."""
    if not tokens:
        raise InputError("cannot embed an empty text")
    vecs = [hashed_representation(tokens[:i], tok, window, dim) for i, tok in enumerate(tokens)]
    return np.mean(vecs, axis=0)


def _kl(p: np.ndarray, q: np.ndarray) -> float:
    mask = p > 0
    if np.any(q[mask] == 0):
        return math.inf
    return float(np.sum(p[mask] * np.log(p[mask] / q[mask])))


def divergence_frontier(p: np.ndarray, q: np.ndarray, scaling_c: float, mixtures: int = MAUVE_MIXTURES) -> np.ndarray:
    """Points ``(exp(-c KL(Q|R)), exp(-c KL(P|R)))`` for ``R = lam P + (1-lam) Q``."""
    lams = np.linspace(0.0, 1.0, mixtures)
    pts = []
    for lam in lams:
        r = lam * p + (1.0 - lam) * q
        pts.append((math.exp(-scaling_c * _kl(q, r)), math.exp(-scaling_c * _kl(p, r))))
    return np.asarray(pts)


def frontier_area(points: np.ndarray) -> float:
    """Area of the unit-square region under the frontier (shoelace formula).

    The polygon runs (0,0) -> (1,0) -> frontier from lam=0 to lam=1 -> (0,1);
    it is mirror-symmetric under swapping the two histograms.
    """
    poly = np.vstack([[0.0, 0.0], [1.0, 0.0], points, [0.0, 1.0]])
    x, y = poly[:, 0], poly[:, 1]
    return float(abs(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))) / 2.0)


def quantize(gen: np.ndarray, ref: np.ndarray, num_bins: int, seed: int = MAUVE_SEED) -> tuple[np.ndarray, np.ndarray]:
    """Jointly cluster both embedding sets and return their bin histograms.

    Rows are sorted before clustering so the result ignores input order.
    """
    from sklearn.cluster import KMeans

    data = np.vstack([gen, ref])
    labels_src = np.array([0] * len(gen) + [1] * len(ref))
    order = np.lexsort(data.T[::-1])
    data, labels_src = data[order], labels_src[order]
    distinct = np.unique(data, axis=0).shape[0]
    bins = max(1, min(num_bins, distinct))
    if bins == 1:
        labels = np.zeros(len(data), dtype=int)
    else:
        km = KMeans(n_clusters=bins, init="k-means++", n_init=1, random_state=seed)
        labels = km.fit_predict(data)
    p = np.bincount(labels[labels_src == 0], minlength=bins).astype(np.float64)
    q = np.bincount(labels[labels_src == 1], minlength=bins).astype(np.float64)
    return p / p.sum(), q / q.sum()


def mauve_lite(
    gen_texts: Sequence,
    ref_texts: Sequence,
    embedder: Callable[[object], np.ndarray] = hashed_text_embedding,
    num_bins: int = MAUVE_NUM_BINS,
    scaling_c: float = MAUVE_SCALING,
    seed: int = MAUVE_SEED,
) -> float:
    """Distributional similarity of two text sets; 1 means indistinguishable.

    Texts are embedded, jointly quantized by k-means into ``num_bins`` bins,
    and the area under the divergence frontier of the two histograms is
    returned.
    """
    if not gen_texts or not ref_texts:
        raise InputError("mauve_lite needs non-empty generated and reference sets")
    if num_bins < 2:
        raise InputError(f"num_bins must be >= 2, got {num_bins}")

    def embed_all(texts: Sequence, label: str) -> np.ndarray:
        out = []
        for i, text in enumerate(texts):
            try:
                vec = np.asarray(embedder(text), dtype=np.float64)
            except Exception as exc:
                raise EvaluationError(f"embedder failed on {label} text {i}: {exc}") from exc
            if vec.ndim != 1 or not np.all(np.isfinite(vec)):
                raise EvaluationError(f"embedder returned an invalid vector for {label} text {i}")
            out.append(vec)
        return np.stack(out)

    p, q = quantize(embed_all(gen_texts, "generated"), embed_all(ref_texts, "reference"), num_bins, seed)
    return min(1.0, frontier_area(divergence_frontier(p, q, scaling_c)))


@dataclass(frozen=True)
class MetricReport:
    experiment_key: str
    div: float
    coherence_raw: float
    coh: float
    mauve: float
    qtext: float
    n_generations: int = 0

    @classmethod
    def build(
        cls, experiment_key: str, div: float, coherence_raw: float, coh: float, mauve: float, n_generations: int = 0
    ) -> "MetricReport":
        return cls(experiment_key, div, coherence_raw, coh, mauve, qtext(div, mauve, coh), n_generations)
