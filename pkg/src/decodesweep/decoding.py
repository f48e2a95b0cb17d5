"""Decoding strategies over any :class:`~decodesweep.backend.LanguageModel`.

Every strategy is a pure function of (backend, prompt, config, seed,
max_new_tokens). Ties are always broken towards the lowest token index, and
candidate sets never include zero-probability tokens.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping, Sequence

import numpy as np

from .backend import LanguageModel, NGramCounts, TokenDistribution, Vocabulary, softmax
from .errors import CapabilityError, ConfigError, InputError

DEFAULT_MAX_NEW_TOKENS = 256
ACS_DEFAULT_K = 5
FSD_DEFAULT_K = 5
FSD_DEFAULT_BETA = 0.5
FSD_ANTI_ORDER = 2
FSD_ANTI_SMOOTHING = 0.1
CD_DEFAULT_K = 5

# canonical family order: deterministic first, then stochastic
STRATEGIES = (
    "greedy",
    "beam",
    "contrastive_search",
    "adaptive_contrastive_search",
    "fsd",
    "contrastive_decoding",
    "temperature",
    "top_k",
    "top_p",
    "typical",
)
STOCHASTIC = frozenset({"temperature", "top_k", "top_p", "typical"})

KEY_PREFIX = {
    "greedy": "greedy",
    "beam": "beam",
    "temperature": "temp",
    "top_k": "topk",
    "top_p": "topp",
    "typical": "typical",
    "contrastive_search": "cs",
    "adaptive_contrastive_search": "acs",
    "fsd": "fsd",
    "contrastive_decoding": "cd",
}
_PREFIX_TO_STRATEGY = {v: k for k, v in KEY_PREFIX.items()}

# hyperparameters per strategy, in key order
PARAMS: dict[str, tuple[str, ...]] = {
    "greedy": (),
    "beam": ("w",),
    "temperature": ("t",),
    "top_k": ("k",),
    "top_p": ("p",),
    "typical": ("tau",),
    "contrastive_search": ("alpha", "k"),
    "adaptive_contrastive_search": ("k",),
    "fsd": ("k", "beta"),
    "contrastive_decoding": ("k", "amateur"),
}
_DEFAULTS: dict[str, dict[str, object]] = {
    "adaptive_contrastive_search": {"k": ACS_DEFAULT_K},
    "fsd": {"k": FSD_DEFAULT_K, "beta": FSD_DEFAULT_BETA},
    "contrastive_decoding": {"k": CD_DEFAULT_K},
}
_INT_PARAMS = {"w", "k"}
_ALL_PARAMS = ("w", "k", "p", "t", "alpha", "tau", "beta", "amateur")


def canonical_strategy(name: str) -> str:
    """Map a strategy name or key prefix (``topp``, ``cs``...) to its full name."""
    strategy = _PREFIX_TO_STRATEGY.get(name, name)
    if strategy not in PARAMS:
        raise ConfigError(f"unknown strategy {name!r}")
    return strategy


def format_number(x: float | int) -> str:
    """Shortest round-trip decimal; integral floats drop the ``.0``."""
    if isinstance(x, (int, np.integer)) and not isinstance(x, bool):
        return str(int(x))
    text = repr(float(x))
    return text[:-2] if text.endswith(".0") else text


@dataclass(frozen=True)
class DecodingConfig:
    strategy: str
    w: int | None = None
    k: int | None = None
    p: float | None = None
    t: float | None = None
    alpha: float | None = None
    tau: float | None = None
    beta: float | None = None
    amateur: str | None = None

    def __post_init__(self) -> None:
        strategy = _PREFIX_TO_STRATEGY.get(self.strategy, self.strategy)
        if strategy not in PARAMS:
            raise ConfigError(f"unknown strategy {self.strategy!r}")
        object.__setattr__(self, "strategy", strategy)
        allowed = PARAMS[strategy]
        for name, default in _DEFAULTS.get(strategy, {}).items():
            if getattr(self, name) is None:
                object.__setattr__(self, name, default)
        for name in _ALL_PARAMS:
            value = getattr(self, name)
            if name not in allowed:
                if value is not None:
                    raise ConfigError(f"{strategy} does not take hyperparameter {name!r}")
                continue
            if value is None:
                raise ConfigError(f"{strategy} requires hyperparameter {name!r}")
            if name in _INT_PARAMS:
                if isinstance(value, bool) or int(value) != value:
                    raise ConfigError(f"{name} must be an integer, got {value!r}")
                object.__setattr__(self, name, int(value))
            elif name != "amateur":
                object.__setattr__(self, name, float(value))
        self._check_ranges()

    def _check_ranges(self) -> None:
        def bad(name: str, rule: str) -> ConfigError:
            return ConfigError(f"{name}={getattr(self, name)!r} out of range: {rule}")

        if self.w is not None and self.w < 1:
            raise bad("w", "w >= 1")
        if self.k is not None and self.k < 1:
            raise bad("k", "k >= 1")
        if self.p is not None and not 0 < self.p <= 1:
            raise bad("p", "0 < p <= 1")
        if self.t is not None and not (self.t > 0 and math.isfinite(self.t)):
            raise bad("t", "t > 0")
        if self.alpha is not None and not 0 <= self.alpha <= 1:
            raise bad("alpha", "0 <= alpha <= 1")
        if self.tau is not None and not 0 < self.tau <= 1:
            raise bad("tau", "0 < tau <= 1")
        if self.beta is not None and not (self.beta >= 0 and math.isfinite(self.beta)):
            raise bad("beta", "beta >= 0")
        if self.amateur is not None and (not self.amateur or re.search(r"[\[\],=\s]", self.amateur)):
            raise bad("amateur", "non-empty name without brackets, commas, '=' or spaces")

    @property
    def stochastic(self) -> bool:
        return self.strategy in STOCHASTIC

    @property
    def params(self) -> dict[str, object]:
        return {name: getattr(self, name) for name in PARAMS[self.strategy]}

    @property
    def key(self) -> str:
        """Canonical strategy key, e.g. ``cs[alpha=0.6,k=10]``."""
        prefix = KEY_PREFIX[self.strategy]
        params = self.params
        if self.strategy == "adaptive_contrastive_search" and self.k == ACS_DEFAULT_K:
            params = {}
        if not params:
            return prefix
        body = ",".join(
            f"{name}={value if name == 'amateur' else format_number(value)}" for name, value in params.items()
        )
        return f"{prefix}[{body}]"

    def __str__(self) -> str:
        return self.key

    @classmethod
    def parse(cls, key: str) -> "DecodingConfig":
        m = re.fullmatch(r"([a-z_]+)(?:\[(.*)\])?", key.strip())
        if not m:
            raise ConfigError(f"malformed strategy key {key!r}")
        prefix, body = m.groups()
        strategy = _PREFIX_TO_STRATEGY.get(prefix, prefix)
        kwargs: dict[str, object] = {}
        if body:
            for part in body.split(","):
                name, sep, raw = part.partition("=")
                if not sep or name not in _ALL_PARAMS:
                    raise ConfigError(f"malformed hyperparameter {part!r} in {key!r}")
                if name == "amateur":
                    kwargs[name] = raw
                else:
                    try:
                        kwargs[name] = int(raw) if name in _INT_PARAMS else float(raw)
                    except ValueError:
                        raise ConfigError(f"non-numeric value {raw!r} for {name} in {key!r}") from None
        return cls(strategy, **kwargs)

    def sort_key(self) -> tuple:
        return (STRATEGIES.index(self.strategy),) + tuple(
            (str(v) if isinstance(v, str) else v) for v in self.params.values()
        )


@dataclass(frozen=True)
class GenerationRecord:
    prompt: tuple[int, ...]
    continuation: tuple[int, ...]
    step_logprobs: tuple[float, ...]
    config: DecodingConfig
    seed: int
    backend_name: str
    dataset_id: str = ""
    prompt_id: str = ""
    trace: tuple[float, ...] = ()
    flags: tuple[str, ...] = field(default=())

    def __post_init__(self) -> None:
        if len(self.step_logprobs) != len(self.continuation):
            raise InputError("step_logprobs and continuation differ in length")

    def to_dict(self, vocab: Vocabulary) -> dict:
        doc = {
            "backend": self.backend_name,
            "dataset_id": self.dataset_id,
            "prompt_id": self.prompt_id,
            "strategy": self.config.key,
            "seed": self.seed,
            "prompt": list(vocab.decode(self.prompt)),
            "continuation": list(vocab.decode(self.continuation)),
            "step_logprobs": list(self.step_logprobs),
        }
        if self.trace:
            doc["trace"] = list(self.trace)
        if self.flags:
            doc["flags"] = list(self.flags)
        return doc

    @classmethod
    def from_dict(cls, doc: Mapping, vocab: Vocabulary) -> "GenerationRecord":
        return cls(
            prompt=vocab.encode(doc["prompt"]),
            continuation=vocab.encode(doc["continuation"]),
            step_logprobs=tuple(float(x) for x in doc["step_logprobs"]),
            config=DecodingConfig.parse(doc["strategy"]),
            seed=int(doc["seed"]),
            backend_name=doc["backend"],
            dataset_id=doc.get("dataset_id", ""),
            prompt_id=doc.get("prompt_id", ""),
            trace=tuple(doc.get("trace", ())),
            flags=tuple(doc.get("flags", ())),
        )


# --- distribution transforms --------------------------------------------------


def top_indices(values: np.ndarray, n: int) -> np.ndarray:
    """Indices of the ``n`` largest values, descending, ties by lowest index."""
    size = values.size
    if n >= size:
        return np.argsort(-values, kind="stable")
    part = np.argpartition(-values, n - 1)[:n]
    threshold = values[part].min()
    above = np.flatnonzero(values > threshold)
    ties = np.flatnonzero(values == threshold)[: n - above.size]
    sel = np.concatenate([above, ties])
    return sel[np.lexsort((sel, -values[sel]))]


def candidates(probs: np.ndarray, k: int) -> np.ndarray:
    """Top-k tokens restricted to the support of ``probs``."""
    sel = top_indices(probs, k)
    return sel[probs[sel] > 0]


def _restrict(dist: TokenDistribution, keep: np.ndarray) -> TokenDistribution:
    if keep.size == np.count_nonzero(dist.probs):
        return dist  # keep covers the whole support
    probs = np.zeros_like(dist.probs)
    probs[keep] = dist.probs[keep]
    return TokenDistribution(probs / probs.sum())


def truncate_top_k(dist: TokenDistribution, k: int) -> TokenDistribution:
    if k < 1:
        raise ConfigError(f"k must be >= 1, got {k}")
    if k >= len(dist):
        return dist
    return _restrict(dist, top_indices(dist.probs, k))


def _mass_prefix(order: np.ndarray, probs: np.ndarray, mass: float) -> np.ndarray:
    # absorb float drift in the running sum so mass=1.0 always reaches full support
    cum = np.cumsum(probs[order])
    n = int(np.searchsorted(cum, mass - 1e-12, side="left")) + 1
    return np.sort(order[: min(n, order.size)])


def nucleus_set(dist: TokenDistribution, p: float) -> np.ndarray:
    """Smallest descending-probability prefix whose mass reaches ``p`` (sorted ids)."""
    if not 0 < p <= 1:
        raise ConfigError(f"p must be in (0, 1], got {p}")
    order = np.argsort(-dist.probs, kind="stable")
    order = order[dist.probs[order] > 0]
    return _mass_prefix(order, dist.probs, p)


def typical_mass_set(dist: TokenDistribution, tau: float) -> np.ndarray:
    """Tokens ranked by |surprisal - entropy|, shortest prefix with mass >= tau."""
    if not 0 < tau <= 1:
        raise ConfigError(f"tau must be in (0, 1], got {tau}")
    support = np.flatnonzero(dist.probs > 0)
    surprisal = -np.log(dist.probs[support])
    distance = np.abs(surprisal - dist.entropy())
    order = support[np.argsort(distance, kind="stable")]
    return _mass_prefix(order, dist.probs, tau)


def apply_temperature(logits: np.ndarray | Sequence[float], t: float) -> TokenDistribution:
    if not t > 0:
        raise InputError(f"temperature must be > 0, got {t}")
    logits = np.asarray(logits, dtype=np.float64)
    return TokenDistribution(softmax(logits / t), logits)


def _logits_of(dist: TokenDistribution) -> np.ndarray:
    return dist.logits if dist.logits is not None else dist.log_probs()


def sampling_distribution(dist: TokenDistribution, config: DecodingConfig) -> np.ndarray:
    """The per-step distribution a sampling strategy draws from."""
    s = config.strategy
    if s == "temperature":
        return apply_temperature(_logits_of(dist), config.t).probs
    if s == "top_k":
        return truncate_top_k(dist, config.k).probs
    if s == "top_p":
        return _restrict(dist, nucleus_set(dist, config.p)).probs
    if s == "typical":
        return _restrict(dist, typical_mass_set(dist, config.tau)).probs
    raise ConfigError(f"{s} is not a sampling strategy")


def draw_token(probs: np.ndarray, rng: np.random.Generator) -> int:
    """Inverse-CDF draw; zero-mass tokens are never returned."""
    cdf = np.cumsum(probs)
    idx = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
    if idx >= probs.size or probs[idx] <= 0:
        idx = int(np.flatnonzero(probs > 0)[-1])
    return idx


# --- decoding loop ------------------------------------------------------------


def _pick(cands: np.ndarray, scores: np.ndarray) -> int:
    best = scores.max()
    return int(cands[scores == best].min())


def _generate(
    backend: LanguageModel,
    prompt: Sequence[int],
    max_new_tokens: int,
    config: DecodingConfig,
    seed: int,
    choose: Callable[[list[int], TokenDistribution], int],
    trace: list[float] | None = None,
) -> GenerationRecord:
    if max_new_tokens < 0:
        raise InputError("max_new_tokens must be >= 0")
    prompt = tuple(int(i) for i in prompt)
    backend.vocab.check(prompt)
    eos = backend.vocab.eos_id
    ctx = list(prompt)
    out: list[int] = []
    lps: list[float] = []
    for _ in range(max_new_tokens):
        dist = backend.next_distribution(ctx)
        tok = choose(ctx, dist)
        p = dist.probs[tok]
        lps.append(math.log(p) if p > 0 else -math.inf)
        out.append(tok)
        ctx.append(tok)
        if tok == eos:
            break
    return GenerationRecord(
        prompt=prompt,
        continuation=tuple(out),
        step_logprobs=tuple(lps),
        config=config,
        seed=seed,
        backend_name=backend.name,
        trace=tuple(trace or ()),
    )


def greedy_decode(
    backend: LanguageModel, prompt: Sequence[int], max_new_tokens: int = DEFAULT_MAX_NEW_TOKENS, seed: int = 0
) -> GenerationRecord:
    return _generate(
        backend, prompt, max_new_tokens, DecodingConfig("greedy"), seed,
        lambda ctx, dist: int(np.argmax(dist.probs)),
    )


def beam_decode(
    backend: LanguageModel,
    prompt: Sequence[int],
    w: int,
    max_new_tokens: int = DEFAULT_MAX_NEW_TOKENS,
    seed: int = 0,
) -> GenerationRecord:
    """Keep the ``w`` best prefixes by raw joint log-probability.

    A hypothesis that emits end-of-text is set aside as finished. Search stops
    once no live hypothesis can beat the best finished one (scores only
    decrease) or the length budget is spent.
    """
    config = DecodingConfig("beam", w=w)
    prompt = tuple(int(i) for i in prompt)
    backend.vocab.check(prompt)
    eos = backend.vocab.eos_id
    # (joint log-prob, tokens, per-step log-probs)
    live: list[tuple[float, tuple[int, ...], tuple[float, ...]]] = [(0.0, (), ())]
    finished: list[tuple[float, tuple[int, ...], tuple[float, ...]]] = []
    for _ in range(max_new_tokens):
        expansions = []
        for score, toks, lps in live:
            logp = backend.next_distribution(prompt + toks).log_probs()
            for v in top_indices(logp, w):
                if logp[v] == -math.inf:
                    break
                v = int(v)
                expansions.append((score + logp[v], toks + (v,), lps + (float(logp[v]),)))
        if not expansions:
            break
        expansions.sort(key=lambda h: (-h[0], h[1]))
        live = []
        for hyp in expansions[:w]:
            (finished if hyp[1][-1] == eos else live).append(hyp)
        if not live:
            break
        if finished and max(f[0] for f in finished) >= live[0][0]:
            break
    pool = finished + live
    score, toks, lps = min(pool, key=lambda h: (-h[0], h[1]))
    return GenerationRecord(prompt, toks, lps, config, seed, backend.name)


def sample_decode(
    backend: LanguageModel,
    prompt: Sequence[int],
    config: DecodingConfig,
    seed: int,
    max_new_tokens: int = DEFAULT_MAX_NEW_TOKENS,
) -> GenerationRecord:
    if not config.stochastic:
        raise ConfigError(f"{config.key} is not a sampling strategy")
    rng = np.random.default_rng(seed)
    return _generate(
        backend, prompt, max_new_tokens, config, seed,
        lambda ctx, dist: draw_token(sampling_distribution(dist, config), rng),
    )


def _require_representations(backend: LanguageModel) -> None:
    if not backend.supports_representations:
        raise CapabilityError(f"backend {backend.name!r} provides no token representations")


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def _contrastive_search(
    backend: LanguageModel,
    prompt: Sequence[int],
    k: int,
    alpha_for: Callable[[TokenDistribution], float],
    max_new_tokens: int,
    config: DecodingConfig,
    seed: int,
    record_trace: bool,
) -> GenerationRecord:
    _require_representations(backend)
    prompt = [int(i) for i in prompt]
    history = [backend.token_representation(prompt[:j], tok) for j, tok in enumerate(prompt)]
    history = [_unit(h) for h in history]
    trace: list[float] = []

    def choose(ctx: list[int], dist: TokenDistribution) -> int:
        alpha = alpha_for(dist)
        if record_trace:
            trace.append(alpha)
        cands = candidates(dist.probs, k)
        reps = _unit(np.stack([backend.token_representation(ctx, int(v)) for v in cands]))
        if history:
            penalty = (reps @ np.stack(history).T).max(axis=1)
        else:
            penalty = np.zeros(cands.size)
        scores = (1.0 - alpha) * dist.probs[cands] - alpha * penalty
        tok = _pick(cands, scores)
        history.append(reps[int(np.flatnonzero(cands == tok)[0])])
        return tok

    return _generate(backend, prompt, max_new_tokens, config, seed, choose, trace)


def contrastive_search_decode(
    backend: LanguageModel,
    prompt: Sequence[int],
    alpha: float,
    k: int,
    max_new_tokens: int = DEFAULT_MAX_NEW_TOKENS,
    seed: int = 0,
) -> GenerationRecord:
    """Score top-k candidates by ``(1-alpha)*p - alpha*max cosine to context``."""
    config = DecodingConfig("contrastive_search", alpha=alpha, k=k)
    return _contrastive_search(
        backend, prompt, config.k, lambda dist: config.alpha, max_new_tokens, config, seed, False
    )


def normalized_entropy(dist: TokenDistribution) -> float:
    return min(1.0, max(0.0, dist.entropy() / math.log(len(dist))))


def adaptive_contrastive_search_decode(
    backend: LanguageModel,
    prompt: Sequence[int],
    max_new_tokens: int = DEFAULT_MAX_NEW_TOKENS,
    k: int = ACS_DEFAULT_K,
    seed: int = 0,
) -> GenerationRecord:
    """Contrastive search whose penalty weight is the step's normalized entropy.

    The per-step weights are stored in ``record.trace``.
    """
    config = DecodingConfig("adaptive_contrastive_search", k=k)
    return _contrastive_search(backend, prompt, config.k, normalized_entropy, max_new_tokens, config, seed, True)


def fsd_scores(lm_probs: np.ndarray, anti_probs: np.ndarray, cands: np.ndarray, beta: float) -> np.ndarray:
    return (1.0 - beta) * lm_probs[cands] - beta * anti_probs[cands]


def fsd_decode(
    backend: LanguageModel,
    prompt: Sequence[int],
    k: int = FSD_DEFAULT_K,
    beta: float = FSD_DEFAULT_BETA,
    max_new_tokens: int = DEFAULT_MAX_NEW_TOKENS,
    seed: int = 0,
    anti_order: int = FSD_ANTI_ORDER,
    anti_smoothing: float = FSD_ANTI_SMOOTHING,
) -> GenerationRecord:
    """Penalize tokens an n-gram model of the running prefix finds likely."""
    config = DecodingConfig("fsd", k=k, beta=beta)
    anti = NGramCounts(anti_order, backend.vocab.size)
    anti.add_sequence([int(i) for i in prompt])

    def choose(ctx: list[int], dist: TokenDistribution) -> int:
        cands = candidates(dist.probs, config.k)
        anti_probs = anti.distribution(ctx, anti_smoothing)
        tok = _pick(cands, fsd_scores(dist.probs, anti_probs, cands, config.beta))
        anti.add(ctx, tok)
        return tok

    return _generate(backend, prompt, max_new_tokens, config, seed, choose)


def contrastive_decode(
    expert: LanguageModel,
    amateur: LanguageModel,
    prompt: Sequence[int],
    k: int = CD_DEFAULT_K,
    max_new_tokens: int = DEFAULT_MAX_NEW_TOKENS,
    seed: int = 0,
) -> GenerationRecord:
    """Among the expert's top-k, maximize ``log p_expert - log p_amateur``."""
    if expert.vocab != amateur.vocab:
        raise ConfigError(f"backends {expert.name!r} and {amateur.name!r} use different vocabularies")
    config = DecodingConfig("contrastive_decoding", k=k, amateur=amateur.name)

    def choose(ctx: list[int], dist: TokenDistribution) -> int:
        cands = candidates(dist.probs, config.k)
        amateur_lp = amateur.next_distribution(ctx).log_probs()[cands]
        scores = np.log(dist.probs[cands]) - amateur_lp
        return _pick(cands, scores)

    return _generate(expert, prompt, max_new_tokens, config, seed, choose)


def decode(
    backend: LanguageModel,
    prompt: Sequence[int],
    config: DecodingConfig,
    seed: int = 0,
    max_new_tokens: int = DEFAULT_MAX_NEW_TOKENS,
    *,
    backends: Mapping[str, LanguageModel] | None = None,
    dataset_id: str = "",
    prompt_id: str = "",
) -> GenerationRecord:
    """Dispatch on ``config.strategy``; ``backends`` resolves the CD amateur."""
    s = config.strategy
    if s == "greedy":
        rec = greedy_decode(backend, prompt, max_new_tokens, seed)
    elif s == "beam":
        rec = beam_decode(backend, prompt, config.w, max_new_tokens, seed)
    elif config.stochastic:
        rec = sample_decode(backend, prompt, config, seed, max_new_tokens)
    elif s == "contrastive_search":
        rec = contrastive_search_decode(backend, prompt, config.alpha, config.k, max_new_tokens, seed)
    elif s == "adaptive_contrastive_search":
        rec = adaptive_contrastive_search_decode(backend, prompt, max_new_tokens, config.k, seed)
    elif s == "fsd":
        rec = fsd_decode(backend, prompt, config.k, config.beta, max_new_tokens, seed)
    elif s == "contrastive_decoding":
        if not backends or config.amateur not in backends:
            raise ConfigError(f"amateur backend {config.amateur!r} is not registered")
        rec = contrastive_decode(backend, backends[config.amateur], prompt, config.k, max_new_tokens, seed)
    else:  # pragma: no cover - guarded by DecodingConfig
        raise ConfigError(f"unknown strategy {s!r}")
    flags = ("zero_prob_step",) if any(lp == -math.inf for lp in rec.step_logprobs) else ()
    return replace(rec, dataset_id=dataset_id, prompt_id=prompt_id, flags=flags)
