"""Language-model backends: vocabulary, next-token distributions, representations.

Two deterministic toy backends are provided:

* :class:`FixedTableBackend` reads conditionals from an explicit table keyed by
  context suffix. Used for hand-checkable examples and exhaustive oracles.
* :class:`NGramBackend` is an add-delta smoothed n-gram model with backoff to
  lower orders for unseen contexts.

Both are immutable once built and can be shared by concurrent decode jobs.
"""

from __future__ import annotations

import gzip
import hashlib
import json
import math
from abc import ABC, abstractmethod
from collections import Counter
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import CapabilityError, ConfigError, InputError

UNK = "<unk>"
EOS = "<eos>"
DEFAULT_REPR_DIM = 64
NGRAM_FORMAT = "decodesweep-ngram"
NGRAM_FORMAT_VERSION = 1


@dataclass(frozen=True)
class Vocabulary:
    tokens: tuple[str, ...]
    _index: dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        tokens = tuple(self.tokens)
        object.__setattr__(self, "tokens", tokens)
        if len(tokens) < 2:
            raise InputError(f"vocabulary needs at least 2 tokens, got {len(tokens)}")
        index = {tok: i for i, tok in enumerate(tokens)}
        if len(index) != len(tokens):
            dupes = [t for t, c in Counter(tokens).items() if c > 1]
            raise InputError(f"duplicate vocabulary tokens: {dupes[:5]}")
        object.__setattr__(self, "_index", index)

    @property
    def size(self) -> int:
        return len(self.tokens)

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: object) -> bool:
        return token in self._index

    @property
    def unk_id(self) -> int | None:
        return self._index.get(UNK)

    @property
    def eos_id(self) -> int | None:
        return self._index.get(EOS)

    def id_of(self, token: str) -> int:
        try:
            return self._index[token]
        except KeyError:
            if self.unk_id is None:
                raise InputError(f"token {token!r} not in vocabulary") from None
            return self.unk_id

    def encode(self, tokens: Iterable[str]) -> tuple[int, ...]:
        return tuple(self.id_of(t) for t in tokens)

    def decode(self, ids: Iterable[int]) -> tuple[str, ...]:
        self.check(ids)
        return tuple(self.tokens[i] for i in ids)

    def check(self, ids: Iterable[int]) -> None:
        n = len(self.tokens)
        for i in ids:
            if not (0 <= int(i) < n) or int(i) != i:
                raise InputError(f"token index {i!r} outside vocabulary of size {n}")


@dataclass(frozen=True)
class TokenDistribution:
    """Probability vector over a vocabulary at one decoding step."""

    probs: np.ndarray
    logits: np.ndarray | None = None

    def __post_init__(self) -> None:
        probs = np.array(self.probs, dtype=np.float64)
        if probs.ndim != 1 or probs.size == 0:
            raise InputError("probs must be a non-empty vector")
        lo, hi, total = probs.min(), probs.max(), probs.sum()
        if not (lo >= 0 and hi <= 1):  # also rejects NaN
            raise InputError("probs must lie in [0, 1]")
        if abs(total - 1.0) > 1e-9:
            raise InputError(f"probs sum to {total!r}, expected 1")
        probs.setflags(write=False)
        object.__setattr__(self, "probs", probs)
        if self.logits is not None:
            logits = np.array(self.logits, dtype=np.float64)
            if logits.shape != probs.shape:
                raise InputError("logits and probs differ in shape")
            logits.setflags(write=False)
            object.__setattr__(self, "logits", logits)

    @classmethod
    def from_logits(cls, logits: Sequence[float] | np.ndarray) -> "TokenDistribution":
        logits = np.asarray(logits, dtype=np.float64)
        return cls(softmax(logits), logits)

    def __len__(self) -> int:
        return self.probs.size

    def log_probs(self) -> np.ndarray:
        """Natural-log probabilities; zero mass maps to ``-inf``."""
        with np.errstate(divide="ignore"):
            return np.log(self.probs)

    def entropy(self) -> float:
        """Shannon entropy in nats."""
        return entropy(self.probs)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - np.max(logits)
    e = np.exp(z)
    return e / e.sum()


def entropy(probs: np.ndarray) -> float:
    p = probs[probs > 0]
    return float(-(p * np.log(p)).sum())


@dataclass(frozen=True)
class BackendDescriptor:
    name: str
    kind: str
    vocab: Vocabulary
    repr_dim: int
    params: Mapping[str, object] = field(default_factory=dict)


# --- hashed representations -------------------------------------------------


@lru_cache(maxsize=1 << 16)
def _feature_vector(feature: str, dim: int) -> np.ndarray:
    digest = hashlib.blake2b(feature.encode("utf-8"), digest_size=8).digest()
    vec = np.random.default_rng(int.from_bytes(digest, "little")).standard_normal(dim)
    vec.setflags(write=False)
    return vec


CONTEXT_FEATURE_WEIGHT = 0.5


def hashed_representation(
    context: Sequence[str], token: str, window: int, dim: int = DEFAULT_REPR_DIM
) -> np.ndarray:
    """Feature-hash ``(last window context tokens, token)`` into a unit vector.

    The candidate token contributes one feature with weight 1; each of the
    last ``window`` context tokens contributes a position-tagged pair feature
    with weight 0.5. Every feature maps to a fixed pseudo-random Gaussian
    direction seeded by a BLAKE2b digest of its name.
    """
    vec = _feature_vector(f"tok:{token}", dim).copy()
    if window > 0 and context:
        recent = list(context[-window:])
        for offset, ctx_tok in enumerate(reversed(recent), start=1):
            vec += CONTEXT_FEATURE_WEIGHT * _feature_vector(f"ctx{offset}:{ctx_tok}>{token}", dim)
    norm = np.linalg.norm(vec)
    return vec / norm


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.dot(a, b) / (np.linalg.norm(a) * np.linalg.norm(b)))


# --- backend interface ------------------------------------------------------


class LanguageModel(ABC):
    """Interface every decoding strategy consumes."""

    name: str
    vocab: Vocabulary
    repr_dim: int = DEFAULT_REPR_DIM

    @property
    def supports_representations(self) -> bool:
        return False

    @abstractmethod
    def _distribution(self, context: tuple[int, ...]) -> TokenDistribution:
        ...

    def next_distribution(self, context: Sequence[int]) -> TokenDistribution:
        context = tuple(int(i) for i in context)
        self.vocab.check(context)
        return self._distribution(context)

    def token_representation(self, context: Sequence[int], token: int) -> np.ndarray:
        raise CapabilityError(f"backend {self.name!r} provides no token representations")

    def sequence_logprob(self, prefix: Sequence[int], continuation: Sequence[int]) -> float:
        return sequence_logprob(self, prefix, continuation)

    @property
    def descriptor(self) -> BackendDescriptor:
        return BackendDescriptor(self.name, self.kind, self.vocab, self.repr_dim, self.params())

    kind = "external"

    def params(self) -> dict[str, object]:
        return {}


def next_distribution(backend: LanguageModel, context: Sequence[int]) -> TokenDistribution:
    return backend.next_distribution(context)


def token_representation(backend: LanguageModel, context: Sequence[int], token: int) -> np.ndarray:
    return backend.token_representation(context, token)


def sequence_logprob(
    backend: LanguageModel, prefix: Sequence[int], continuation: Sequence[int]
) -> float:
    """Sum of per-step log-probabilities of ``continuation`` given ``prefix``.

    Returns ``-inf`` if any step has zero probability.
    """
    continuation = list(continuation)
    if not continuation:
        raise InputError("continuation must be non-empty")
    backend.vocab.check(continuation)
    ctx = list(prefix)
    total = 0.0
    for tok in continuation:
        p = backend.next_distribution(ctx).probs[tok]
        if p <= 0.0:
            return -math.inf
        total += math.log(p)
        ctx.append(tok)
    return total


class FixedTableBackend(LanguageModel):
    """Conditionals read from a table keyed by context suffix.

    ``table`` maps a context tuple to a probability row. Lookup uses the
    longest suffix of the query context that has a row, so ``{(): row}``
    alone defines a context-free model.

    ``representations`` is ``None`` (no representation support), ``"hashed"``
    for the default hashed scheme over the last ``window`` tokens, or an array
    of shape ``(|V|, dim)`` giving one context-independent vector per token.
    """

    kind = "fixed-table"

    def __init__(
        self,
        name: str,
        vocab: Vocabulary | Sequence[str],
        table: Mapping[Sequence[int], Sequence[float]],
        representations: str | np.ndarray | None = "hashed",
        window: int = 1,
        repr_dim: int = DEFAULT_REPR_DIM,
    ):
        self.name = name
        self.vocab = vocab if isinstance(vocab, Vocabulary) else Vocabulary(tuple(vocab))
        self._rows: dict[tuple[int, ...], TokenDistribution] = {}
        for ctx, row in table.items():
            ctx = tuple(int(i) for i in ctx)
            self.vocab.check(ctx)
            if len(row) != self.vocab.size:
                raise InputError(f"table row for {ctx} has {len(row)} entries, vocab has {self.vocab.size}")
            self._rows[ctx] = TokenDistribution(np.asarray(row, dtype=np.float64))
        self._max_ctx = max((len(c) for c in self._rows), default=0)
        self.window = window
        if isinstance(representations, str):
            if representations != "hashed":
                raise ConfigError(f"unknown representation scheme {representations!r}")
            self.repr_dim = repr_dim
            self._vectors = None
        elif representations is not None:
            vectors = np.asarray(representations, dtype=np.float64)
            if vectors.ndim != 2 or vectors.shape[0] != self.vocab.size:
                raise InputError("representation array must have shape (|V|, dim)")
            vectors = vectors.copy()
            vectors.setflags(write=False)
            self.repr_dim = vectors.shape[1]
            self._vectors = vectors
        else:
            self.repr_dim = repr_dim
            self._vectors = None
        self._repr_mode = representations if isinstance(representations, str) else (
            "table" if representations is not None else None
        )

    @property
    def supports_representations(self) -> bool:
        return self._repr_mode is not None

    def params(self) -> dict[str, object]:
        return {"rows": len(self._rows), "representations": self._repr_mode, "window": self.window}

    def _distribution(self, context: tuple[int, ...]) -> TokenDistribution:
        start = max(0, len(context) - self._max_ctx)
        for i in range(start, len(context) + 1):
            row = self._rows.get(context[i:])
            if row is not None:
                return row
        raise InputError(f"no table row matches context {context}")

    def token_representation(self, context: Sequence[int], token: int) -> np.ndarray:
        self.vocab.check([token])
        if self._repr_mode is None:
            return super().token_representation(context, token)
        if self._vectors is not None:
            return self._vectors[token]
        self.vocab.check(context)
        words = [self.vocab.tokens[i] for i in context[-self.window:]] if self.window else []
        return hashed_representation(words, self.vocab.tokens[token], self.window, self.repr_dim)


# --- n-gram backend ---------------------------------------------------------


class NGramCounts:
    """Mutable n-gram count tables for all orders 1..order.

    Also serves as the online anti-LM of FSD decoding, where counts grow one
    token at a time.
    """

    def __init__(self, order: int, vocab_size: int):
        if order < 1:
            raise ConfigError(f"n-gram order must be >= 1, got {order}")
        self.order = order
        self.vocab_size = vocab_size
        self.tables: dict[tuple[int, ...], Counter] = {}

    def add(self, history: Sequence[int], token: int) -> None:
        """Count ``token`` after each suffix of ``history`` up to order-1 long."""
        hist = tuple(history[-(self.order - 1):]) if self.order > 1 else ()
        for n in range(len(hist) + 1):
            ctx = hist[len(hist) - n:]
            self.tables.setdefault(ctx, Counter())[token] += 1

    def add_sequence(self, seq: Sequence[int]) -> None:
        for i, tok in enumerate(seq):
            self.add(seq[max(0, i - self.order + 1):i], tok)

    def backoff_context(self, context: Sequence[int]) -> tuple[int, ...]:
        ctx = tuple(context[-(self.order - 1):]) if self.order > 1 else ()
        while ctx and ctx not in self.tables:
            ctx = ctx[1:]
        return ctx

    def distribution(self, context: Sequence[int], smoothing: float) -> np.ndarray:
        counts = self.tables.get(self.backoff_context(context))
        probs = np.full(self.vocab_size, smoothing, dtype=np.float64)
        total = 0
        if counts:
            idx = np.fromiter(counts.keys(), dtype=np.int64, count=len(counts))
            cnt = np.fromiter(counts.values(), dtype=np.float64, count=len(counts))
            probs[idx] += cnt
            total = cnt.sum()
        return probs / (total + self.vocab_size * smoothing)


class NGramBackend(LanguageModel):
    """Add-delta smoothed n-gram model with backoff for unseen contexts.

    An unseen (order-1)-gram context drops its oldest token until a context
    seen in training remains; the empty context is the unigram model.
    """

    kind = "ngram"

    def __init__(
        self,
        name: str,
        vocab: Vocabulary,
        counts: NGramCounts,
        smoothing: float,
        repr_dim: int = DEFAULT_REPR_DIM,
    ):
        if not smoothing > 0:
            raise ConfigError(f"smoothing must be > 0, got {smoothing}")
        if counts.vocab_size != vocab.size:
            raise ConfigError("count tables and vocabulary disagree on size")
        self.name = name
        self.vocab = vocab
        self.order = counts.order
        self.smoothing = float(smoothing)
        self.repr_dim = repr_dim
        # frozen array form: context -> (token ids, counts, total)
        self._tables: dict[tuple[int, ...], tuple[np.ndarray, np.ndarray, float]] = {}
        for ctx, counter in counts.tables.items():
            idx = np.fromiter(counter.keys(), dtype=np.int64, count=len(counter))
            cnt = np.fromiter(counter.values(), dtype=np.float64, count=len(counter))
            order = np.argsort(idx)
            self._tables[ctx] = (idx[order], cnt[order], float(cnt.sum()))

    @property
    def supports_representations(self) -> bool:
        return True

    def params(self) -> dict[str, object]:
        return {"order": self.order, "smoothing": self.smoothing}

    def _distribution(self, context: tuple[int, ...]) -> TokenDistribution:
        ctx = context[len(context) - self.order + 1:] if self.order > 1 else ()
        while ctx and ctx not in self._tables:
            ctx = ctx[1:]
        probs = np.full(self.vocab.size, self.smoothing, dtype=np.float64)
        total = 0.0
        entry = self._tables.get(ctx)
        if entry is not None:
            idx, cnt, total = entry
            probs[idx] += cnt
        probs /= total + self.vocab.size * self.smoothing
        return TokenDistribution(probs)

    def token_representation(self, context: Sequence[int], token: int) -> np.ndarray:
        self.vocab.check([token])
        window = self.order - 1
        words = [self.vocab.tokens[i] for i in context[-window:]] if window else []
        self.vocab.check(context[-window:] if window else ())
        return hashed_representation(words, self.vocab.tokens[token], window, self.repr_dim)

    # persistence

    def save(self, path: str | Path) -> None:
        """Write a versioned JSON document (gzip-compressed for ``.gz`` paths)."""
        doc = {
            "format": NGRAM_FORMAT,
            "version": NGRAM_FORMAT_VERSION,
            "name": self.name,
            "order": self.order,
            "smoothing": self.smoothing,
            "repr_dim": self.repr_dim,
            "vocab": list(self.vocab.tokens),
            "tables": [
                [list(ctx), idx.tolist(), cnt.astype(np.int64).tolist()]
                for ctx, (idx, cnt, _) in sorted(self._tables.items(), key=lambda kv: (len(kv[0]), kv[0]))
            ],
        }
        text = json.dumps(doc, separators=(",", ":"))
        path = Path(path)
        if path.suffix == ".gz":
            with gzip.open(path, "wt", encoding="utf-8") as fh:
                fh.write(text)
        else:
            path.write_text(text, encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path, name: str | None = None) -> "NGramBackend":
        path = Path(path)
        opener = gzip.open if path.suffix == ".gz" else open
        with opener(path, "rt", encoding="utf-8") as fh:
            doc = json.load(fh)
        if doc.get("format") != NGRAM_FORMAT:
            raise InputError(f"{path} is not a {NGRAM_FORMAT} file")
        if doc.get("version") != NGRAM_FORMAT_VERSION:
            raise InputError(f"{path}: unsupported format version {doc.get('version')}")
        vocab = Vocabulary(tuple(doc["vocab"]))
        counts = NGramCounts(doc["order"], vocab.size)
        for ctx, idx, cnt in doc["tables"]:
            counts.tables[tuple(ctx)] = Counter(dict(zip(idx, cnt)))
        return cls(name or doc["name"], vocab, counts, doc["smoothing"], doc.get("repr_dim", DEFAULT_REPR_DIM))


def train_ngram_backend(
    corpus: Sequence[Sequence[str]],
    order: int,
    smoothing: float,
    name: str = "ngram",
    vocab: Vocabulary | None = None,
    repr_dim: int = DEFAULT_REPR_DIM,
) -> NGramBackend:
    """Count n-grams over token sequences and wrap them in an :class:`NGramBackend`.

    Without an explicit ``vocab`` the vocabulary is the corpus tokens in order
    of first appearance plus the reserved ``<unk>`` token. n-grams never cross
    sequence boundaries.
    """
    if order < 1:
        raise ConfigError(f"n-gram order must be >= 1, got {order}")
    if not smoothing > 0:
        raise ConfigError(f"smoothing must be > 0, got {smoothing}")
    sequences = [list(seq) for seq in corpus]
    if not any(sequences):
        raise InputError("cannot train on an empty corpus")
    if vocab is None:
        seen: dict[str, None] = {}
        for seq in sequences:
            seen.update(dict.fromkeys(seq))
        seen.pop(UNK, None)
        vocab = Vocabulary(tuple(seen) + (UNK,))
    counts = NGramCounts(order, vocab.size)
    for seq in sequences:
        counts.add_sequence(vocab.encode(seq))
    return NGramBackend(name, vocab, counts, smoothing, repr_dim)
