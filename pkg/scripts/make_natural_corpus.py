"""Build the natural-text fixture used by the trend tests.

Collects prose paragraphs from the docstrings of pure-Python standard
library modules, then writes ``train.txt`` (first ``--train-tokens``
whitespace tokens) and ``heldout.txt`` (the following paragraphs), one
paragraph per blank-line separated block.

    python scripts/make_natural_corpus.py --out tests/data
"""

import argparse
import importlib
import inspect
import pkgutil
import re
import sysconfig
import warnings
from pathlib import Path

SKIP = ("test", "idlelib", "tkinter", "turtle", "antigravity", "this", "lib2to3", "ensurepip", "venv", "pydoc_data")
WORD = re.compile(r"^[A-Za-z][A-Za-z'-]*[.,;:]?$")


def prose_paragraphs(doc):
    for para in re.split(r"\n\s*\n", inspect.cleandoc(doc)):
        lines = para.splitlines()
        if any(l.startswith((" ", "\t", ">>>", "-", "*", ":")) for l in lines):
            continue
        words = para.split()
        if len(words) < 10:
            continue
        # mostly plain words: drop code, signatures and tables
        if sum(bool(WORD.match(w)) for w in words) / len(words) < 0.85:
            continue
        yield " ".join(words)


def iter_docstrings():
    stdlib = sysconfig.get_paths()["stdlib"]
    names = sorted(
        m.name for m in pkgutil.walk_packages([stdlib], onerror=lambda name: None)
        if not any(part.startswith("_") or part.startswith(SKIP) for part in m.name.split("."))
    )
    for name in names:
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                mod = importlib.import_module(name)
        except Exception:
            continue
        if isinstance(mod.__doc__, str):
            yield mod.__doc__
        for _, obj in sorted(vars(mod).items()):
            if getattr(obj, "__module__", None) == name and (inspect.isclass(obj) or inspect.isfunction(obj)):
                if isinstance(obj.__doc__, str):
                    yield obj.__doc__
                if inspect.isclass(obj):
                    for _, member in sorted(vars(obj).items()):
                        if inspect.isfunction(member) and isinstance(member.__doc__, str):
                            yield member.__doc__


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, default=Path("tests/data"))
    ap.add_argument("--train-tokens", type=int, default=50_000)
    ap.add_argument("--heldout-paragraphs", type=int, default=400)
    args = ap.parse_args()

    seen, paragraphs = set(), []
    for doc in iter_docstrings():
        for para in prose_paragraphs(doc):
            if para not in seen:
                seen.add(para)
                paragraphs.append(para)
    train, count, i = [], 0, 0
    while count < args.train_tokens and i < len(paragraphs):
        train.append(paragraphs[i])
        count += len(paragraphs[i].split())
        i += 1
    heldout = [p for p in paragraphs[i:] if len(p.split()) >= 32][: args.heldout_paragraphs]
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "train.txt").write_text("\n\n".join(train) + "\n", encoding="utf-8")
    (args.out / "heldout.txt").write_text("\n\n".join(heldout) + "\n", encoding="utf-8")
    print(f"train: {len(train)} paragraphs, {count} tokens; heldout: {len(heldout)} paragraphs")


if __name__ == "__main__":
    main()
