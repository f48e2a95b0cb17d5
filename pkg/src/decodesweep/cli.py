"""Command-line entry point: ``decodesweep``.

Exit codes: 0 ok, 2 usage or configuration error, 3 backend capability
error, 4 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import os
import sys
from dataclasses import replace
from pathlib import Path
from typing import Sequence

from . import __version__
from .backend import EOS, train_ngram_backend
from .corpus import Tokenizer, split_documents
from .decoding import PARAMS, DecodingConfig, canonical_strategy, decode
from .errors import CapabilityError, ConfigError, DecodeSweepError, InputError
from .registry import RunConfig, load_config
from .sweep import (
    METRICS,
    RANK_METRICS,
    AggregateRow,
    ExperimentKey,
    aggregate_weighted,
    experiment_seed,
    finalize_rows,
    generation_line,
    prompt_seed,
    rank_strategies,
    read_results_csv,
    results_digest,
    run_sweep,
    score_generations,
    strategy_family,
    write_results_csv,
)

log = logging.getLogger("decodesweep")

EXIT_OK, EXIT_USAGE, EXIT_CAPABILITY, EXIT_RUNTIME = 0, 2, 3, 4

REPORT_COLUMNS = (("div", "DIV"), ("mauve", "MAUVE"), ("coherence_raw", "Coherence"), ("coh", "COH"), ("qtext", "QText"))
PARAMS_ALL = ("w", "k", "p", "t", "alpha", "tau", "beta", "amateur")
REPORT_CSV_HEADER = ("strategy", "group", "div", "coherence_raw", "coh", "mauve", "qtext", "n_rows", "n_generations")


# --- helpers --------------------------------------------------------------------


def _u64(text: str) -> int:
    value = int(text, 0)
    if not 0 <= value < 1 << 64:
        raise argparse.ArgumentTypeError(f"{text} is not an unsigned 64-bit integer")
    return value


def _positive(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return value


def _atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.tmp{os.getpid()}")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def _require_config(args) -> RunConfig:
    if args.config is None:
        raise ConfigError(f"{args.command} needs --config")
    return load_config(args.config)


def _out_dir(args) -> Path:
    return Path(args.out) if args.out else Path(".")


def _strategy_from_args(args) -> DecodingConfig:
    if args.key:
        if args.strategy:
            raise ConfigError("use either --key or --strategy, not both")
        return DecodingConfig.parse(args.key)
    if not args.strategy:
        raise ConfigError("one of --key or --strategy is required")
    strategy = canonical_strategy(args.strategy)
    given = {name for name in PARAMS_ALL if getattr(args, name) is not None}
    extra = given - set(PARAMS[strategy])
    if extra:
        raise ConfigError(f"{strategy} does not take {', '.join('--' + n for n in sorted(extra))}")
    return DecodingConfig(strategy, **{n: getattr(args, n) for n in given})


# --- subcommands ----------------------------------------------------------------


def cmd_generate(args) -> int:
    cfg = _require_config(args)
    config = _strategy_from_args(args)
    registry = cfg.registry
    backend = registry.backend(args.backend)
    dataset = registry.dataset(args.dataset)
    max_new = args.max_new_tokens or cfg.max_new_tokens
    key = ExperimentKey(backend.name, dataset.dataset_id, config.key, args.seed if config.stochastic else 0)
    exp_seed = experiment_seed(key, args.run_seed if args.run_seed is not None else cfg.run_seed)
    lines = []
    for item in dataset:
        seed = prompt_seed(exp_seed, item.prompt_id) if config.stochastic else 0
        rec = decode(
            backend, backend.vocab.encode(item.prompt), config, seed, max_new,
            backends=registry.backends, dataset_id=dataset.dataset_id, prompt_id=item.prompt_id,
        )
        lines.append(json.dumps(generation_line(key, rec, backend.vocab, max_new), ensure_ascii=False))
    path = Path(args.output) if args.output else _out_dir(args) / "generations.jsonl"
    _atomic_write(path, "\n".join(lines) + "\n")
    print(f"wrote {len(lines)} generations to {path}")
    return EXIT_OK


def _read_generations(path: Path) -> dict[str, list[dict]]:
    groups: dict[str, list[dict]] = {}
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                doc = json.loads(line)
                key = doc.get("experiment_key") or str(
                    ExperimentKey(doc["backend"], doc["dataset_id"], doc["strategy"], 0)
                )
                missing = [f for f in ("continuation", "prompt_id", "dataset_id") if f not in doc]
                if missing:
                    raise KeyError(", ".join(missing))
            except (ValueError, KeyError, TypeError) as exc:
                raise InputError(f"{path}:{lineno}: malformed generation record ({exc})") from None
            groups.setdefault(key, []).append(doc)
    if not groups:
        raise InputError(f"{path}: no generations")
    return groups


def cmd_evaluate(args) -> int:
    cfg = _require_config(args)
    registry = cfg.registry
    groups = _read_generations(Path(args.generations))
    rows = []
    for key_text, docs in groups.items():
        key = ExperimentKey.parse(key_text)
        dataset = registry.dataset(docs[0]["dataset_id"])
        by_id = {r.prompt_id: r for r in dataset}
        pairs = []
        for doc in docs:
            if doc["prompt_id"] not in by_id:
                raise InputError(f"prompt {doc['prompt_id']!r} not in dataset {dataset.dataset_id!r}")
            pairs.append((by_id[doc["prompt_id"]], doc["continuation"]))
        evaluator = registry.backend(args.evaluator) if args.evaluator else registry.evaluator_for(key.backend)
        gold_len = int(docs[0].get("max_new_tokens", cfg.max_new_tokens))
        rows.append(score_generations(key, pairs, evaluator, gold_len, registry.mauve_bins, registry.mauve_scaling))
    rows, pool = finalize_rows(rows, scope_id=f"evaluate:{args.generations}")
    path = Path(args.output) if args.output else _out_dir(args) / "results.csv"
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.tmp{os.getpid()}")
    write_results_csv(rows, tmp)
    os.replace(tmp, path)
    for r in rows:
        print(f"{r.key}: div={r.div:.4f} coherence={r.coherence_raw:.4f} mauve={r.mauve:.4f} qtext={r.qtext:.4f} [{r.status}]")
    print(f"wrote {path}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _require_config(args)
    if cfg.grid is None:
        raise ConfigError(f"{args.config}: no grid section")
    run_seed = args.run_seed if args.run_seed is not None else cfg.run_seed
    result = run_sweep(
        cfg.grid, cfg.registry, _out_dir(args), workers=args.workers, run_seed=run_seed,
        config_digest=cfg.digest(), max_jobs=args.max_jobs,
    )
    if not result.complete:
        print(f"partial run stored in {result.out_dir / 'parts'}; rerun to resume")
        return EXIT_OK
    failed = [r for r in result.rows if r.status == "failed"]
    print(f"{len(result.rows)} experiments, {len(failed)} failed; digest {results_digest(result.results_path)}")
    print(f"wrote {result.results_path}")
    return EXIT_OK


def _fmt_metric(name: str, value: float) -> str:
    if math.isnan(value):
        return "n/a"
    if name == "coherence_raw":
        return f"{value:.2f}"
    return f"{100 * value:.2f}"


def _group(rows, group_by: str, weights) -> list[AggregateRow]:
    if group_by == "strategy":
        return [a for a in aggregate_weighted(rows, weights) if a.backend == "*"]
    if group_by == "backend":
        return [a for a in aggregate_weighted(rows, weights) if a.backend != "*"]
    # per dataset: swap the roles of backend and dataset, backends weighted equally
    swapped = [replace(r, key=ExperimentKey(r.key.dataset, r.key.backend, r.key.strategy, r.key.seed)) for r in rows]
    return [a for a in aggregate_weighted(swapped, {r.key.dataset: 1.0 for r in swapped}) if a.backend != "*"]


def render_markdown(rows: Sequence[AggregateRow], group_by: str) -> str:
    """Markdown table; the per-family maximum of each metric is bolded."""
    best: dict[tuple[str, str, str], float] = {}
    for r in rows:
        fam = (strategy_family(r.strategy), r.backend)
        for name, _ in REPORT_COLUMNS:
            v = r.metric(name)
            if not math.isnan(v):
                best[fam + (name,)] = max(best.get(fam + (name,), -math.inf), v)
    head = ["Strategy"] + ([group_by.capitalize()] if group_by != "strategy" else []) + [t for _, t in REPORT_COLUMNS]
    lines = ["| " + " | ".join(head) + " |", "|" + "|".join("---" for _ in head) + "|"]
    for r in rows:
        fam = (strategy_family(r.strategy), r.backend)
        cells = [r.strategy] + ([r.backend] if group_by != "strategy" else [])
        for name, _ in REPORT_COLUMNS:
            text = _fmt_metric(name, r.metric(name))
            cells.append(f"**{text}**" if r.metric(name) == best.get(fam + (name,)) else text)
        lines.append("| " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def render_csv(rows: Sequence[AggregateRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(REPORT_CSV_HEADER)
    for r in rows:
        writer.writerow([r.strategy, r.backend] + [repr(float(r.metric(m))) for m in METRICS] + [r.n_rows, r.n_generations])
    return buf.getvalue()


def parse_report_csv(text: str) -> list[dict]:
    rows = []
    for rec in csv.DictReader(io.StringIO(text)):
        rows.append({k: (float(v) if k in METRICS else int(v) if k.startswith("n_") else v) for k, v in rec.items()})
    return rows


def _ranking_tables(rows: Sequence[AggregateRow], by: str, n: int, group_by: str) -> str:
    ranking = rank_strategies(rows, by=by, n=n)
    note = f" (only {len(ranking.top)} rows)" if ranking.truncated else ""
    return (
        f"\nTop {n} by {by}{note}\n\n" + render_markdown(ranking.top, group_by)
        + f"\nBottom {n} by {by}{note}\n\n" + render_markdown(ranking.bottom, group_by)
    )


def cmd_report(args) -> int:
    path = Path(args.results)
    if not path.exists():
        raise InputError(f"results file {path} does not exist")
    rows = read_results_csv(path)
    if not rows:
        raise InputError(f"{path}: no result rows")
    failed = [r for r in rows if r.status == "failed"]
    usable = [r for r in rows if r.status != "failed"]
    if not usable:
        raise InputError(f"{path}: every experiment failed")
    weights = load_config(args.config).registry.weights if args.config else None
    agg = _group(usable, args.group_by, weights)
    if args.format == "csv":
        text = render_csv(agg)
    else:
        text = render_markdown(agg, args.group_by)
        if args.n:
            text += _ranking_tables(agg, args.rank_by, args.n, args.group_by)
        if failed:
            text += "\nFailed experiments:\n\n" + "".join(f"- {r.key}\n" for r in failed)
    if args.output:
        _atomic_write(Path(args.output), text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_backends_train(args) -> int:
    tokenizer = Tokenizer(args.tokenizer)
    corpus = Path(args.corpus)
    if not corpus.exists():
        raise InputError(f"corpus {corpus} does not exist")
    docs = [tokenizer.tokenize(d) for d in split_documents(corpus.read_text(encoding="utf-8"))]
    if args.eos:
        docs = [d + [EOS] for d in docs]
    model = train_ngram_backend(docs, args.order, args.smoothing, name=args.name or corpus.stem)
    out = Path(args.output)
    out.parent.mkdir(parents=True, exist_ok=True)
    model.save(out)
    print(f"trained order-{args.order} model on {sum(map(len, docs))} tokens, |V|={model.vocab.size}; wrote {out}")
    return EXIT_OK


# --- parser ---------------------------------------------------------------------


def _global_flags(suppress: bool) -> argparse.ArgumentParser:
    # subcommands repeat the global flags; suppressed defaults keep values given before the subcommand
    def default(value):
        return argparse.SUPPRESS if suppress else value

    flags = argparse.ArgumentParser(add_help=False)
    flags.add_argument("--config", default=default(None), help="run configuration (YAML)")
    flags.add_argument("--out", default=default(None), help="output directory (default: current directory)")
    flags.add_argument("--workers", type=_positive, default=default(1), help="worker processes for sweep (default 1)")
    flags.add_argument("--run-seed", type=_u64, default=default(None), help="run seed, unsigned 64-bit (default: from config)")
    flags.add_argument("-v", "--verbose", action="store_true", default=default(False), help="log progress to stderr")
    return flags


def build_parser() -> argparse.ArgumentParser:
    common = _global_flags(suppress=True)
    parser = argparse.ArgumentParser(
        prog="decodesweep", parents=[_global_flags(suppress=False)],
        description="Decoding-strategy sweeps over toy language models.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("generate", parents=[common], help="decode every prompt of one dataset")
    gen.add_argument("--backend", required=True)
    gen.add_argument("--dataset", required=True)
    gen.add_argument("--key", help="canonical strategy key, e.g. 'cs[alpha=0.6,k=10]'")
    gen.add_argument("--strategy", help="strategy name or prefix: greedy, beam, cs, acs, fsd, cd, temp, topk, topp, typical")
    gen.add_argument("--w", type=int, help="beam width")
    gen.add_argument("--k", type=int, help="candidate count (top-k, cs, acs, fsd, cd)")
    gen.add_argument("--p", type=float, help="nucleus mass")
    gen.add_argument("--t", type=float, help="temperature")
    gen.add_argument("--alpha", type=float, help="degeneration penalty weight (cs)")
    gen.add_argument("--tau", type=float, help="typical mass")
    gen.add_argument("--beta", type=float, help="anti-LM weight (fsd)")
    gen.add_argument("--amateur", help="amateur backend name (cd)")
    gen.add_argument("--seed", type=_u64, default=0, help="sampling seed for stochastic strategies")
    gen.add_argument("--max-new-tokens", type=_positive, default=None)
    gen.add_argument("--output", help="output file (default: OUT/generations.jsonl)")
    gen.set_defaults(func=cmd_generate)

    ev = sub.add_parser("evaluate", parents=[common], help="score a generations file")
    ev.add_argument("--generations", required=True)
    ev.add_argument("--evaluator", help="backend scoring coherence (default: config evaluator or the generator)")
    ev.add_argument("--output", help="output file (default: OUT/results.csv)")
    ev.set_defaults(func=cmd_evaluate)

    sw = sub.add_parser("sweep", parents=[common], help="run the configured grid")
    sw.add_argument("--max-jobs", type=_positive, default=None, help="stop after this many new experiments")
    sw.set_defaults(func=cmd_sweep)

    rep = sub.add_parser("report", parents=[common], help="aggregate tables and rankings from results.csv")
    rep.add_argument("--results", required=True)
    rep.add_argument("--group-by", choices=("strategy", "backend", "dataset"), default="strategy")
    rep.add_argument("--rank-by", choices=RANK_METRICS, default="qtext")
    rep.add_argument("-n", type=_positive, default=None, help="also print top and bottom n rows")
    rep.add_argument("--format", choices=("markdown", "csv"), default="markdown")
    rep.add_argument("--output", help="write here instead of stdout")
    rep.set_defaults(func=cmd_report)

    be = sub.add_parser("backends", help="backend utilities")
    be_sub = be.add_subparsers(dest="backends_command", required=True)
    tr = be_sub.add_parser("train", parents=[common], help="train and save an n-gram backend")
    tr.add_argument("--corpus", required=True, help="text file, blank-line separated documents")
    tr.add_argument("--order", type=_positive, required=True)
    tr.add_argument("--smoothing", type=float, required=True)
    tr.add_argument("--tokenizer", choices=Tokenizer.SCHEMES, default="whitespace")
    tr.add_argument("--eos", action="store_true", help="append <eos> to every document")
    tr.add_argument("--name")
    tr.add_argument("--output", required=True, help=".json or .json.gz")
    tr.set_defaults(func=cmd_backends_train)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except CapabilityError as exc:
        print(f"decodesweep: capability error: {exc}", file=sys.stderr)
        return EXIT_CAPABILITY
    except (ConfigError, InputError) as exc:
        print(f"decodesweep: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DecodeSweepError, OSError) as exc:
        print(f"decodesweep: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
