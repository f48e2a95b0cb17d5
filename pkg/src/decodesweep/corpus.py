"""Prompt/gold datasets and the reversible tokenizers used by toy backends."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Sequence

from .backend import UNK, Vocabulary
from .errors import InputError

log = logging.getLogger(__name__)

DEFAULT_PREFIX_LEN = 32


@dataclass(frozen=True)
class PromptRecord:
    prompt_id: str
    dataset_id: str
    prompt: tuple[str, ...]
    gold: tuple[str, ...]

    def __post_init__(self) -> None:
        if not self.prompt:
            raise InputError(f"{self.dataset_id}/{self.prompt_id}: empty prompt")
        if not self.gold:
            raise InputError(f"{self.dataset_id}/{self.prompt_id}: empty gold continuation")


class Tokenizer:
    """Whitespace or byte-level tokenizer.

    ``whitespace``: tokens are ``str.split()`` pieces; detokenizing joins with
    single spaces, so runs of whitespace collapse. ``byte``: one token per
    UTF-8 byte (as a latin-1 character); round-trips exactly.
    """

    SCHEMES = ("whitespace", "byte")

    def __init__(self, scheme: str = "whitespace", vocab: Vocabulary | None = None):
        if scheme not in self.SCHEMES:
            raise InputError(f"unknown tokenizer scheme {scheme!r}")
        self.scheme = scheme
        self.vocab = vocab

    def tokenize(self, text: str) -> list[str]:
        if self.scheme == "whitespace":
            return text.split()
        return list(text.encode("utf-8", "surrogatepass").decode("latin-1"))

    def detokenize(self, tokens: Iterable[str]) -> str:
        if self.scheme == "whitespace":
            return " ".join(tokens)
        return "".join(tokens).encode("latin-1").decode("utf-8", "surrogatepass")

    def fit(self, texts: Iterable[str]) -> Vocabulary:
        """Freeze a vocabulary (first-appearance order, plus ``<unk>``)."""
        seen: dict[str, None] = {}
        for text in texts:
            seen.update(dict.fromkeys(self.tokenize(text)))
        seen.pop(UNK, None)
        self.vocab = Vocabulary(tuple(seen) + (UNK,))
        return self.vocab

    def encode(self, text: str) -> tuple[int, ...]:
        if self.vocab is None:
            raise InputError("tokenizer has no frozen vocabulary; call fit() first")
        return self.vocab.encode(self.tokenize(text))

    def decode(self, ids: Sequence[int]) -> str:
        if self.vocab is None:
            raise InputError("tokenizer has no frozen vocabulary; call fit() first")
        return self.detokenize(self.vocab.decode(ids))


@dataclass(frozen=True)
class Dataset:
    dataset_id: str
    records: tuple[PromptRecord, ...]
    skipped: int = 0

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self) -> Iterator[PromptRecord]:
        return iter(self.records)

    def __getitem__(self, i: int) -> PromptRecord:
        return self.records[i]


def split_documents(text: str) -> list[str]:
    """Blank-line separated blocks, stripped; empty blocks dropped."""
    blocks, current = [], []
    for line in text.splitlines():
        if line.strip():
            current.append(line)
        elif current:
            blocks.append("\n".join(current))
            current = []
    if current:
        blocks.append("\n".join(current))
    return blocks


def load_dataset(
    path: str | Path,
    format: str = "jsonl",
    prefix_len: int = DEFAULT_PREFIX_LEN,
    dataset_id: str | None = None,
    tokenizer: Tokenizer | None = None,
    min_gold_len: int = 1,
) -> Dataset:
    """Load prompt/gold pairs from JSON lines or from raw text documents.

    Raw text documents are split after ``prefix_len`` tokens; documents with
    fewer than ``prefix_len + min_gold_len`` tokens are skipped and counted in
    ``Dataset.skipped``.
    """
    path = Path(path)
    tokenizer = tokenizer or Tokenizer()
    dataset_id = dataset_id or path.stem
    if not path.exists():
        raise InputError(f"dataset file {path} does not exist")
    records: list[PromptRecord] = []
    skipped = 0
    if format == "jsonl":
        seen_ids: set[str] = set()
        with path.open(encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    doc = json.loads(line)
                    prompt, gold = doc["prompt"], doc["gold"]
                    if not isinstance(prompt, str) or not isinstance(gold, str):
                        raise TypeError("prompt and gold must be strings")
                    pid = str(doc.get("prompt_id", lineno))
                    rec = PromptRecord(pid, dataset_id, tuple(tokenizer.tokenize(prompt)), tuple(tokenizer.tokenize(gold)))
                except (ValueError, KeyError, TypeError, InputError) as exc:
                    raise InputError(f"{path}:{lineno}: malformed record ({exc})") from None
                if pid in seen_ids:
                    raise InputError(f"{path}:{lineno}: duplicate prompt_id {pid!r}")
                seen_ids.add(pid)
                records.append(rec)
    elif format == "rawtext":
        if prefix_len < 1:
            raise InputError(f"prefix_len must be >= 1, got {prefix_len}")
        for i, doc in enumerate(split_documents(path.read_text(encoding="utf-8"))):
            tokens = tokenizer.tokenize(doc)
            if len(tokens) < prefix_len + min_gold_len:
                skipped += 1
                continue
            records.append(PromptRecord(str(i), dataset_id, tuple(tokens[:prefix_len]), tuple(tokens[prefix_len:])))
        if skipped:
            log.warning("%s: skipped %d documents shorter than %d tokens", path, skipped, prefix_len + min_gold_len)
    else:
        raise InputError(f"unknown dataset format {format!r}")
    if not records:
        raise InputError(f"{path}: no usable records")
    return Dataset(dataset_id, tuple(records), skipped)


def write_jsonl_dataset(records: Iterable[PromptRecord], path: str | Path, tokenizer: Tokenizer | None = None) -> None:
    tokenizer = tokenizer or Tokenizer()
    with Path(path).open("w", encoding="utf-8") as fh:
        for rec in records:
            doc = {"prompt_id": rec.prompt_id, "prompt": tokenizer.detokenize(rec.prompt), "gold": tokenizer.detokenize(rec.gold)}
            fh.write(json.dumps(doc, ensure_ascii=False) + "\n")
