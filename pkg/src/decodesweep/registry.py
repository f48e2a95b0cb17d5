"""Run configuration: backends, datasets, evaluator and the sweep grid.

Config documents are YAML. Schema (all paths relative to the document)::

    run_seed: 0                 # optional, default 0
    max_new_tokens: 32          # optional, default 256
    evaluator: ngram2           # backend scoring coherence; default: the generator
    mauve: {num_bins: 16, scaling_c: 5}
    backends:
      - name: ngram2
        kind: ngram             # ngram | fixed-table
        order: 2
        smoothing: 0.1
        corpus: train.txt       # blank-line separated documents
        tokenizer: whitespace   # whitespace | byte
        eos: false              # append <eos> to each training document
        repr_dim: 64
      - name: saved
        kind: ngram
        path: saved.json        # model written by `decodesweep backends train`
      - name: toy
        kind: fixed-table
        vocab: [A, B]
        table: {"": [0.6, 0.4], "A": [0.5, 0.5], "B": [0.9, 0.1]}
        representations: hashed # hashed | none
    datasets:
      - id: news
        path: news.jsonl
        format: jsonl           # jsonl | rawtext
        prefix_len: 32          # rawtext only
        weight: 2000            # optional, default: record count
    seeds: [0]
    grid_backends: [ngram2]     # optional, default: every backend
    grid_datasets: [news]       # optional, default: every dataset
    grid:                       # one entry per strategy family, or the string "reference"
      - strategy: beam
        w: [3, 5, 10]
      - strategy: cs
        alpha: [0.2, 0.6]
        k: [5, 10]
      - strategy: acs
        backends: [ngram2]      # optional restriction
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import yaml

from .backend import EOS, FixedTableBackend, LanguageModel, NGramBackend, train_ngram_backend
from .corpus import Dataset, Tokenizer, load_dataset, split_documents
from .decoding import DEFAULT_MAX_NEW_TOKENS, PARAMS, canonical_strategy
from .errors import ConfigError, InputError
from .metrics import MAUVE_NUM_BINS, MAUVE_SCALING
from .sweep import StrategyAxis, SweepGrid, reference_grid


@dataclass
class Registry:
    backends: dict[str, LanguageModel] = field(default_factory=dict)
    datasets: dict[str, Dataset] = field(default_factory=dict)
    evaluator: str | None = None
    weights: dict[str, float] = field(default_factory=dict)
    mauve_bins: int = MAUVE_NUM_BINS
    mauve_scaling: float = MAUVE_SCALING

    def add_backend(self, backend: LanguageModel) -> None:
        if backend.name in self.backends:
            raise ConfigError(f"duplicate backend name {backend.name!r}")
        self.backends[backend.name] = backend

    def add_dataset(self, dataset: Dataset, weight: float | None = None) -> None:
        if dataset.dataset_id in self.datasets:
            raise ConfigError(f"duplicate dataset id {dataset.dataset_id!r}")
        self.datasets[dataset.dataset_id] = dataset
        self.weights[dataset.dataset_id] = float(weight if weight is not None else len(dataset))

    def backend(self, name: str) -> LanguageModel:
        try:
            return self.backends[name]
        except KeyError:
            raise ConfigError(f"unknown backend {name!r}") from None

    def dataset(self, dataset_id: str) -> Dataset:
        try:
            return self.datasets[dataset_id]
        except KeyError:
            raise ConfigError(f"unknown dataset {dataset_id!r}") from None

    def evaluator_for(self, backend_name: str) -> LanguageModel:
        return self.backend(self.evaluator or backend_name)

    def describe(self) -> dict[str, Any]:
        return {
            "backends": {
                name: {"kind": b.kind, "vocab_size": b.vocab.size, "repr_dim": b.repr_dim, **b.params()}
                for name, b in self.backends.items()
            },
            "datasets": {d: len(ds) for d, ds in self.datasets.items()},
            "weights": self.weights,
            "evaluator": self.evaluator,
            "mauve": {"num_bins": self.mauve_bins, "scaling_c": self.mauve_scaling},
        }


@dataclass
class RunConfig:
    registry: Registry
    grid: SweepGrid | None
    run_seed: int = 0
    max_new_tokens: int = DEFAULT_MAX_NEW_TOKENS
    source: dict = field(default_factory=dict)

    def digest(self) -> str:
        blob = json.dumps({"source": self.source, "registry": self.registry.describe()}, sort_keys=True, default=str)
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def _require(spec: Mapping, key: str, where: str) -> Any:
    if key not in spec:
        raise ConfigError(f"{where}: missing required key {key!r}")
    return spec[key]


def build_backend(spec: Mapping, base_dir: Path = Path(".")) -> LanguageModel:
    name = _require(spec, "name", "backend")
    kind = _require(spec, "kind", f"backend {name}")
    repr_dim = int(spec.get("repr_dim", 64))
    if kind == "ngram":
        if "path" in spec:
            model = NGramBackend.load(base_dir / spec["path"], name=name)
            return model
        order = int(_require(spec, "order", f"backend {name}"))
        smoothing = float(_require(spec, "smoothing", f"backend {name}"))
        corpus_path = base_dir / _require(spec, "corpus", f"backend {name}")
        if not corpus_path.exists():
            raise ConfigError(f"backend {name}: corpus {corpus_path} not found")
        tokenizer = Tokenizer(spec.get("tokenizer", "whitespace"))
        docs = [tokenizer.tokenize(d) for d in split_documents(corpus_path.read_text(encoding="utf-8"))]
        if spec.get("eos", False):
            docs = [d + [EOS] for d in docs]
        return train_ngram_backend(docs, order, smoothing, name=name, repr_dim=repr_dim)
    if kind == "fixed-table":
        vocab = list(_require(spec, "vocab", f"backend {name}"))
        index = {t: i for i, t in enumerate(vocab)}
        table = {}
        for ctx_text, row in _require(spec, "table", f"backend {name}").items():
            try:
                ctx = tuple(index[t] for t in str(ctx_text or "").split())
            except KeyError as exc:
                raise ConfigError(f"backend {name}: table context uses unknown token {exc}") from None
            table[ctx] = row
        reps = spec.get("representations", "hashed")
        return FixedTableBackend(
            name, vocab, table,
            representations=None if reps in (None, "none") else reps,
            window=int(spec.get("window", 1)),
            repr_dim=repr_dim,
        )
    raise ConfigError(f"backend {name}: unknown kind {kind!r}")


def build_axis(spec: Mapping) -> StrategyAxis:
    strategy = canonical_strategy(str(_require(spec, "strategy", "grid entry")))
    values = {}
    for name in PARAMS[strategy]:
        if name in spec:
            raw = spec[name]
            values[name] = tuple(raw) if isinstance(raw, (list, tuple)) else (raw,)
    unknown = set(spec) - set(PARAMS[strategy]) - {"strategy", "backends"}
    if unknown:
        raise ConfigError(f"grid entry {strategy}: unknown keys {sorted(unknown)}")
    backends = tuple(spec["backends"]) if spec.get("backends") else None
    return StrategyAxis(strategy, values, backends)


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    try:
        doc = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    base = path.parent
    registry = Registry(evaluator=doc.get("evaluator"))
    mauve = doc.get("mauve") or {}
    registry.mauve_bins = int(mauve.get("num_bins", MAUVE_NUM_BINS))
    registry.mauve_scaling = float(mauve.get("scaling_c", MAUVE_SCALING))
    for spec in doc.get("backends") or []:
        registry.add_backend(build_backend(spec, base))
    for spec in doc.get("datasets") or []:
        did = _require(spec, "id", "dataset")
        try:
            ds = load_dataset(
                base / _require(spec, "path", f"dataset {did}"),
                format=spec.get("format", "jsonl"),
                prefix_len=int(spec.get("prefix_len", 32)),
                dataset_id=did,
                tokenizer=Tokenizer(spec.get("tokenizer", "whitespace")),
            )
        except InputError as exc:
            raise ConfigError(f"dataset {did}: {exc}") from None
        registry.add_dataset(ds, spec.get("weight"))
    if registry.evaluator is not None:
        registry.backend(registry.evaluator)
    max_new = int(doc.get("max_new_tokens", DEFAULT_MAX_NEW_TOKENS))
    grid = None
    if doc.get("grid"):
        backends = tuple(doc.get("grid_backends") or registry.backends)
        datasets = tuple(doc.get("grid_datasets") or registry.datasets)
        seeds = tuple(int(s) for s in doc.get("seeds", [0]))
        if doc["grid"] == "reference":
            grid = reference_grid(backends, datasets, seeds=seeds, max_new_tokens=max_new)
        elif isinstance(doc["grid"], list):
            strategies = tuple(build_axis(s) for s in doc["grid"])
            grid = SweepGrid(backends, datasets, strategies, seeds, max_new)
        else:
            raise ConfigError(f"{path}: grid must be a list of entries or 'reference'")
    return RunConfig(registry, grid, int(doc.get("run_seed", 0)), max_new, source=doc)
