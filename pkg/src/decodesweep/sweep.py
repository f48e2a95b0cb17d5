"""Hyperparameter sweeps: grid expansion, parallel execution, persistence,
weighted aggregation and rankings.

A run directory holds:

* ``parts/``            one JSON file per finished experiment (resumable store)
* ``results.csv``       one row per experiment, canonical order
* ``generations.jsonl`` every generation, canonical order
* ``manifest.json``     run seed, config digest, tool version, failures
"""

from __future__ import annotations

import csv
import hashlib
import io
import itertools
import json
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import TYPE_CHECKING, Iterable, Mapping, Sequence

import numpy as np

from . import __version__
from .decoding import PARAMS, STRATEGIES, DecodingConfig, GenerationRecord, canonical_strategy, decode, format_number
from .errors import CapabilityError, ConfigError, DecodeSweepError, InputError
from .backend import LanguageModel
from .corpus import PromptRecord
from .metrics import (
    MAUVE_NUM_BINS,
    MAUVE_SCALING,
    MIN_DIVERSITY_LEN,
    NormalizationPool,
    coherence_raw,
    diversity,
    hashed_text_embedding,
    mauve_lite,
    normalize_coherence,
    qtext,
)

if TYPE_CHECKING:
    from .registry import Registry

log = logging.getLogger(__name__)

SEED_MASK = (1 << 64) - 1
METRICS = ("div", "coherence_raw", "coh", "mauve", "qtext")
RESULT_HEADER = (
    "experiment_key", "div", "coherence_raw", "coh", "mauve", "qtext", "n_generations",
    "backend", "dataset", "strategy", "seed", "status", "wall_ms",
)

# hyperparameter values per strategy family for the reference grid
REFERENCE_AXES = (
    ("beam", {"w": (3, 5, 10, 15, 20, 50)}),
    ("contrastive_search", {"alpha": (0.2, 0.4, 0.6, 0.8, 1.0), "k": (1, 3, 5, 10, 15, 20, 50)}),
    ("adaptive_contrastive_search", {}),
    ("temperature", {"t": (0.1, 0.3, 0.5, 0.7, 0.9, 1.0)}),
    ("top_k", {"k": (1, 3, 5, 10, 15, 20, 50)}),
    ("top_p", {"p": (0.6, 0.7, 0.8, 0.9, 0.95)}),
)


def stable_hash64(text: str) -> int:
    return int.from_bytes(hashlib.blake2b(text.encode("utf-8"), digest_size=8).digest(), "little")


@dataclass(frozen=True)
class StrategyAxis:
    """One strategy family with a value list per hyperparameter."""

    strategy: str
    values: Mapping[str, Sequence] = field(default_factory=dict)
    backends: tuple[str, ...] | None = None

    def configs(self) -> list[DecodingConfig]:
        strategy = canonical_strategy(self.strategy)
        names = [n for n in PARAMS[strategy] if n in self.values]
        for n in names:
            if len(self.values[n]) == 0:
                raise ConfigError(f"{strategy}: empty value list for {n}")
        lists = [sorted(set(self.values[n]), key=lambda v: (str(type(v)), v)) for n in names]
        configs = [DecodingConfig(strategy, **dict(zip(names, combo))) for combo in itertools.product(*lists)]
        return sorted(configs, key=DecodingConfig.sort_key)


@dataclass(frozen=True)
class SweepGrid:
    backends: tuple[str, ...]
    datasets: tuple[str, ...]
    strategies: tuple[StrategyAxis, ...]
    seeds: tuple[int, ...] = (0,)
    max_new_tokens: int = 256


def reference_grid(
    backends: Sequence[str],
    datasets: Sequence[str],
    acs_backends: Sequence[str] | None = None,
    seeds: Sequence[int] = (0,),
    max_new_tokens: int = 256,
) -> SweepGrid:
    """The reference grid. Adaptive contrastive search was run for a single
    model, so by default it is restricted to the first backend."""
    acs = tuple(acs_backends) if acs_backends is not None else tuple(backends[:1])
    axes = tuple(
        StrategyAxis(s, values, acs if s == "adaptive_contrastive_search" else None) for s, values in REFERENCE_AXES
    )
    return SweepGrid(tuple(backends), tuple(datasets), axes, tuple(seeds), max_new_tokens)


@dataclass(frozen=True)
class ExperimentKey:
    backend: str
    dataset: str
    strategy: str
    seed: int = 0

    def __str__(self) -> str:
        return f"{self.backend}/{self.dataset}/{self.strategy}/{self.seed}"

    @property
    def config(self) -> DecodingConfig:
        return DecodingConfig.parse(self.strategy)

    @classmethod
    def parse(cls, text: str) -> "ExperimentKey":
        backend, dataset, rest = text.split("/", 2)
        strategy, _, seed = rest.rpartition("/")
        return cls(backend, dataset, strategy, int(seed))


def expand_grid(grid: SweepGrid) -> list[ExperimentKey]:
    """Cartesian product per family in canonical order:
    backend, dataset, strategy family, hyperparameters ascending, seed."""
    if not grid.backends or not grid.datasets or not grid.strategies:
        raise ConfigError("sweep grid has an empty axis")
    if not grid.seeds:
        raise ConfigError("sweep grid has no seeds")
    for axis in grid.strategies:
        if axis.backends is not None:
            if not axis.backends:
                raise ConfigError(f"{axis.strategy}: empty backend restriction")
            missing = set(axis.backends) - set(grid.backends)
            if missing:
                raise ConfigError(f"{axis.strategy}: restricted to unknown backends {sorted(missing)}")
    per_axis = [(axis, axis.configs()) for axis in grid.strategies]
    keys: list[ExperimentKey] = []
    seen: set[ExperimentKey] = set()
    for backend in grid.backends:
        for dataset in grid.datasets:
            configs = [
                cfg for axis, cfgs in per_axis
                if axis.backends is None or backend in axis.backends
                for cfg in cfgs
            ]
            configs.sort(key=DecodingConfig.sort_key)
            for cfg in configs:
                for seed in (grid.seeds if cfg.stochastic else (0,)):
                    key = ExperimentKey(backend, dataset, cfg.key, int(seed))
                    if key in seen:
                        raise ConfigError(f"duplicate experiment {key}")
                    seen.add(key)
                    keys.append(key)
    return keys


def experiment_seed(key: ExperimentKey, run_seed: int) -> int:
    return (stable_hash64(str(key)) ^ int(run_seed)) & SEED_MASK


def prompt_seed(exp_seed: int, prompt_id: str) -> int:
    return stable_hash64(f"{exp_seed}:{prompt_id}")


@dataclass(frozen=True)
class ResultRow:
    key: ExperimentKey
    div: float = math.nan
    coherence_raw: float = math.nan
    mauve: float = math.nan
    coh: float = math.nan
    qtext: float = math.nan
    n_generations: int = 0
    wall_ms: float = 0.0
    status: str = "ok"
    reason: str = ""

    def metric(self, name: str) -> float:
        return getattr(self, name)

    def sort_key(self) -> tuple:
        return (self.key.backend, self.key.dataset) + self.key.config.sort_key() + (self.key.seed,)

    def to_json(self) -> dict:
        doc = asdict(self)
        doc["key"] = str(self.key)
        return doc

    @classmethod
    def from_json(cls, doc: Mapping) -> "ResultRow":
        doc = dict(doc)
        doc["key"] = ExperimentKey.parse(doc["key"])
        return cls(**doc)


def score_generations(
    key: ExperimentKey,
    items: Sequence[tuple[PromptRecord, Sequence[str]]],
    evaluator: LanguageModel,
    gold_len: int,
    mauve_bins: int = MAUVE_NUM_BINS,
    mauve_scaling: float = MAUVE_SCALING,
) -> ResultRow:
    """Score (prompt record, continuation tokens) pairs of one experiment.

    DIV and coherence are averaged per continuation; MAUVE-lite compares all
    continuations with the gold texts truncated to ``gold_len`` tokens.
    """
    divs, cohs, degenerate = [], [], []
    gen_texts, ref_texts = [], []
    for item, words in items:
        words = tuple(words)
        if not words:
            degenerate.append("empty continuation")
            divs.append(0.0)
            cohs.append(-math.inf)
            continue
        if len(words) < MIN_DIVERSITY_LEN:
            degenerate.append("short continuation")
        divs.append(diversity(words))
        c = coherence_raw(evaluator.vocab.encode(item.prompt), evaluator.vocab.encode(words), evaluator)
        if c == -math.inf:
            degenerate.append("zero-probability continuation")
        cohs.append(c)
        gen_texts.append(words)
        ref_texts.append(tuple(item.gold[:gold_len]))
    if not items:
        raise InputError(f"{key}: no generations to score")
    mauve = mauve_lite(gen_texts, ref_texts, hashed_text_embedding, mauve_bins, mauve_scaling) if gen_texts else 0.0
    return ResultRow(
        key,
        div=float(np.mean(divs)),
        coherence_raw=float(np.mean(cohs)),
        mauve=mauve,
        n_generations=len(items),
        status="degenerate" if degenerate else "ok",
        reason="; ".join(sorted(set(degenerate))),
    )


def run_experiment(
    key: ExperimentKey,
    registry: "Registry",
    max_new_tokens: int = 256,
    run_seed: int = 0,
) -> tuple[ResultRow, list[GenerationRecord]]:
    """Decode every prompt of the key's dataset and score the generations.

    COH and QText stay NaN until the run's normalization pool is final.
    """
    start = time.perf_counter()
    try:
        backend = registry.backend(key.backend)
        dataset = registry.dataset(key.dataset)
        config = key.config
        exp_seed = experiment_seed(key, run_seed)
        records: list[GenerationRecord] = []
        for item in dataset:
            seed = prompt_seed(exp_seed, item.prompt_id) if config.stochastic else 0
            records.append(decode(
                backend, backend.vocab.encode(item.prompt), config, seed, max_new_tokens,
                backends=registry.backends, dataset_id=dataset.dataset_id, prompt_id=item.prompt_id,
            ))
        pairs = [(item, backend.vocab.decode(rec.continuation)) for item, rec in zip(dataset, records)]
        row = score_generations(
            key, pairs, registry.evaluator_for(key.backend), max_new_tokens,
            registry.mauve_bins, registry.mauve_scaling,
        )
    except CapabilityError as exc:
        row, records = ResultRow(key, status="failed", reason=f"capability: {exc}"), []
    except DecodeSweepError as exc:
        row, records = ResultRow(key, status="failed", reason=str(exc)), []
    wall = (time.perf_counter() - start) * 1000.0
    return replace(row, wall_ms=round(wall, 3)), records


def finalize_rows(rows: Sequence[ResultRow], scope_id: str = "global") -> tuple[list[ResultRow], NormalizationPool]:
    """Build the global coherence pool and fill in COH and QText."""
    pool = NormalizationPool(scope_id=scope_id)
    pool.extend(r.coherence_raw for r in rows if r.status != "failed" and math.isfinite(r.coherence_raw))
    out = []
    for r in rows:
        if r.status == "failed":
            out.append(r)
            continue
        if math.isfinite(r.coherence_raw):
            coh = normalize_coherence(r.coherence_raw, pool)
        else:
            coh = 0.0
        out.append(replace(r, coh=coh, qtext=qtext(r.div, r.mauve, coh)))
    return out, pool


# --- persistence --------------------------------------------------------------


class ResultStore:
    """Append-only store with one file per experiment key.

    Files are written atomically, so a crashed run leaves only complete
    entries and can be resumed.
    """

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    def _path(self, key: ExperimentKey) -> Path:
        return self.root / f"{hashlib.sha1(str(key).encode()).hexdigest()}.json"

    def __contains__(self, key: ExperimentKey) -> bool:
        return self._path(key).exists()

    def put(self, row: ResultRow, generations: Sequence[dict]) -> None:
        path = self._path(row.key)
        tmp = path.with_suffix(f".tmp{os.getpid()}")
        tmp.write_text(json.dumps({"row": row.to_json(), "generations": list(generations)}), encoding="utf-8")
        os.replace(tmp, path)

    def get(self, key: ExperimentKey) -> tuple[ResultRow, list[dict]]:
        doc = json.loads(self._path(key).read_text(encoding="utf-8"))
        return ResultRow.from_json(doc["row"]), doc["generations"]


def _fmt(x: float | int) -> str:
    if isinstance(x, float) and math.isnan(x):
        return ""
    return format_number(x) if not isinstance(x, float) else repr(x)


def write_results_csv(rows: Iterable[ResultRow], path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(RESULT_HEADER)
        for r in rows:
            writer.writerow([
                str(r.key), _fmt(r.div), _fmt(r.coherence_raw), _fmt(r.coh), _fmt(r.mauve), _fmt(r.qtext),
                r.n_generations, r.key.backend, r.key.dataset, r.key.strategy, r.key.seed, r.status,
                _fmt(float(r.wall_ms)),
            ])


def _parse_float(text: str) -> float:
    return float(text) if text != "" else math.nan


def read_results_csv(path: str | Path) -> list[ResultRow]:
    with Path(path).open(encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or tuple(reader.fieldnames[: len(RESULT_HEADER)]) != RESULT_HEADER:
            raise InputError(f"{path}: unexpected results header {reader.fieldnames}")
        rows = []
        for rec in reader:
            rows.append(ResultRow(
                key=ExperimentKey(rec["backend"], rec["dataset"], rec["strategy"], int(rec["seed"])),
                div=_parse_float(rec["div"]),
                coherence_raw=_parse_float(rec["coherence_raw"]),
                mauve=_parse_float(rec["mauve"]),
                coh=_parse_float(rec["coh"]),
                qtext=_parse_float(rec["qtext"]),
                n_generations=int(rec["n_generations"]),
                wall_ms=_parse_float(rec["wall_ms"]),
                status=rec["status"],
            ))
    return rows


def results_digest(path: str | Path) -> str:
    """SHA-256 over ``results.csv`` with the timing column removed."""
    with Path(path).open(encoding="utf-8", newline="") as fh:
        table = list(csv.reader(fh))
    drop = table[0].index("wall_ms")
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    for line in table:
        writer.writerow(line[:drop] + line[drop + 1:])
    return hashlib.sha256(buf.getvalue().encode("utf-8")).hexdigest()


# --- execution ----------------------------------------------------------------

_WORKER_STATE: dict = {}


def _init_worker(registry: "Registry", max_new_tokens: int, run_seed: int) -> None:
    _WORKER_STATE.update(registry=registry, max_new_tokens=max_new_tokens, run_seed=run_seed)


def _job(key: ExperimentKey) -> tuple[ResultRow, list[dict]]:
    registry = _WORKER_STATE["registry"]
    row, records = run_experiment(key, registry, _WORKER_STATE["max_new_tokens"], _WORKER_STATE["run_seed"])
    vocab = registry.backends[key.backend].vocab if records else None
    return row, [generation_line(key, r, vocab, _WORKER_STATE["max_new_tokens"]) for r in records]


def generation_line(key: ExperimentKey, record: GenerationRecord, vocab, max_new_tokens: int) -> dict:
    """One ``generations.jsonl`` entry."""
    return dict(experiment_key=str(key), max_new_tokens=max_new_tokens, **record.to_dict(vocab))


@dataclass
class SweepResult:
    rows: list[ResultRow]
    pool: NormalizationPool | None
    out_dir: Path
    complete: bool

    @property
    def results_path(self) -> Path:
        return self.out_dir / "results.csv"


def run_sweep(
    grid: SweepGrid,
    registry: "Registry",
    out_dir: str | Path,
    workers: int = 1,
    run_seed: int = 0,
    config_digest: str = "",
    max_jobs: int | None = None,
) -> SweepResult:
    """Run every pending experiment of ``grid`` and write the run artifacts.

    Experiments already in ``out_dir/parts`` are skipped, so an interrupted
    run resumes where it stopped. ``max_jobs`` caps how many pending
    experiments execute in this call; artifacts are only written once every
    key is present.
    """
    out_dir = Path(out_dir)
    keys = expand_grid(grid)
    for key in keys:
        registry.backend(key.backend)
        registry.dataset(key.dataset)
    store = ResultStore(out_dir / "parts")
    pending = [k for k in keys if k not in store]
    if max_jobs is not None:
        pending = pending[:max_jobs]
    log.info("sweep: %d experiments, %d pending, %d workers", len(keys), len(pending), workers)
    _init_worker(registry, grid.max_new_tokens, run_seed)
    if workers <= 1 or len(pending) <= 1:
        for key in pending:
            store.put(*_job(key))
    else:
        with ProcessPoolExecutor(
            max_workers=workers, initializer=_init_worker, initargs=(registry, grid.max_new_tokens, run_seed)
        ) as pool:
            futures = [pool.submit(_job, key) for key in pending]
            for fut in as_completed(futures):
                store.put(*fut.result())
    if not all(k in store for k in keys):
        return SweepResult([], None, out_dir, complete=False)

    rows, generations = [], []
    for key in keys:
        row, gens = store.get(key)
        rows.append(row)
        generations.extend(gens)
    scope = f"run:{config_digest[:12] or 'adhoc'}:{run_seed}"
    rows, pool = finalize_rows(rows, scope_id=scope)
    write_results_csv(rows, out_dir / "results.csv")
    with (out_dir / "generations.jsonl").open("w", encoding="utf-8") as fh:
        for g in generations:
            fh.write(json.dumps(g, ensure_ascii=False) + "\n")
    manifest = {
        "tool": "decodesweep",
        "tool_version": __version__,
        "run_seed": run_seed,
        "config_digest": config_digest,
        "n_experiments": len(keys),
        "coherence_pool": {"scope_id": pool.scope_id, "size": len(pool.values)}
        if pool.values else {"scope_id": pool.scope_id, "size": 0},
        "failures": {str(r.key): r.reason for r in rows if r.status == "failed"},
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return SweepResult(rows, pool, out_dir, complete=True)


# --- aggregation --------------------------------------------------------------


@dataclass(frozen=True)
class AggregateRow:
    strategy: str
    backend: str  # "*" aggregates over all backends
    div: float
    coherence_raw: float
    coh: float
    mauve: float
    qtext: float
    n_rows: int
    n_generations: int
    std: Mapping[str, float] = field(default_factory=dict)

    def metric(self, name: str) -> float:
        return getattr(self, name)

    def sort_key(self) -> tuple:
        return DecodingConfig.parse(self.strategy).sort_key() + (self.backend == "*", self.backend)


def _weighted(values: Sequence[float], weights: Sequence[float]) -> tuple[float, float]:
    v = np.asarray(values, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    if np.any(np.isneginf(v)):
        return -math.inf, math.nan
    mean = float(np.dot(w, v) / w.sum())
    var = float(np.dot(w, (v - mean) ** 2) / w.sum())
    return mean, math.sqrt(max(var, 0.0))


def aggregate_weighted(rows: Sequence[ResultRow], weights: Mapping[str, float] | None = None) -> list[AggregateRow]:
    """Dataset-weighted means per (strategy, backend) and per strategy overall.

    QText is recomputed from the aggregated DIV, MAUVE and COH. Default
    weights are the generation counts per dataset.
    """
    if any(r.status == "failed" for r in rows):
        raise InputError("failed rows cannot be aggregated; filter them first")
    if weights is None:
        weights = {}
        for r in rows:
            weights[r.key.dataset] = max(weights.get(r.key.dataset, 0), r.n_generations)
    for r in rows:
        if r.key.dataset not in weights:
            raise ConfigError(f"no weight for dataset {r.key.dataset!r}")
        if not weights[r.key.dataset] > 0:
            raise ConfigError(f"weight for dataset {r.key.dataset!r} must be positive")
    groups: dict[tuple[str, str], list[ResultRow]] = {}
    for r in rows:
        groups.setdefault((r.key.strategy, r.key.backend), []).append(r)
        groups.setdefault((r.key.strategy, "*"), []).append(r)
    out = []
    for (strategy, backend), members in groups.items():
        w = [weights[r.key.dataset] for r in members]
        stats = {m: _weighted([r.metric(m) for r in members], w) for m in ("div", "coherence_raw", "coh", "mauve")}
        div, mauve, coh = stats["div"][0], stats["mauve"][0], stats["coh"][0]
        out.append(AggregateRow(
            strategy, backend, div, stats["coherence_raw"][0], coh, mauve, qtext(div, mauve, coh),
            n_rows=len(members),
            n_generations=sum(r.n_generations for r in members),
            std={m: s[1] for m, s in stats.items()},
        ))
    out.sort(key=AggregateRow.sort_key)
    return out


@dataclass(frozen=True)
class Ranking:
    top: list
    bottom: list
    truncated: bool


RANK_METRICS = ("div", "coh", "mauve", "qtext", "coherence_raw")


def rank_strategies(rows: Sequence, by: str = "qtext", n: int = 5) -> Ranking:
    """Top and bottom ``n`` rows by ``by`` (descending; ties in canonical order).

    ``bottom`` lists the worst row first. If ``n`` exceeds the row count all
    rows are returned and ``truncated`` is set.
    """
    if by not in RANK_METRICS:
        raise ConfigError(f"cannot rank by {by!r}; choose from {RANK_METRICS}")
    if n < 1:
        raise ConfigError(f"n must be >= 1, got {n}")
    canonical = sorted(rows, key=lambda r: r.sort_key())
    position = {id(r): i for i, r in enumerate(canonical)}
    ordered = sorted(rows, key=lambda r: (-r.metric(by), position[id(r)]))
    truncated = n > len(ordered)
    n = min(n, len(ordered))
    return Ranking(ordered[:n], list(reversed(ordered[len(ordered) - n:])), truncated)


def strategy_family(strategy_key: str) -> str:
    return DecodingConfig.parse(strategy_key).strategy


def family_order(family: str) -> int:
    return STRATEGIES.index(family)
