# retrieval_xattn/corpus.py
#
# Corpus files: one example per line, `input_tokens <TAB> target_tokens`,
# tokens as space-separated unsigned integers. Targets carry BOS ... EOS.

from __future__ import annotations

import logging
from dataclasses import dataclass

from .errors import DataError, StorageError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Example:
    input: tuple[int, ...]
    target: tuple[int, ...]


def _parse_tokens(field: str, lineno: int, what: str) -> tuple[int, ...]:
    out = []
    for tok in field.split():
        if not (tok.isascii() and tok.isdigit()):
            raise DataError(f"{what} token {tok!r} is not an unsigned integer", line=lineno)
        out.append(int(tok))
    if not out:
        raise DataError(f"empty {what}", line=lineno)
    return tuple(out)


def parse_corpus(text: str, vocab_size: int | None = None) -> list[Example]:
    examples = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.rstrip("\n").split("\t")
        if len(parts) != 2:
            raise DataError(f"expected input<TAB>target, found {len(parts)} field(s)", line=lineno)
        src = _parse_tokens(parts[0], lineno, "input")
        tgt = _parse_tokens(parts[1], lineno, "target")
        if vocab_size is not None:
            worst = max(max(src), max(tgt))
            if worst >= vocab_size:
                raise DataError(f"token {worst} outside vocabulary of {vocab_size}", line=lineno)
        examples.append(Example(src, tgt))
    return examples


def read_corpus(path: str, vocab_size: int | None = None) -> list[Example]:
    try:
        with open(path, encoding="utf-8") as f:
            text = f.read()
    except OSError as exc:
        raise StorageError(f"cannot read corpus {path}: {exc}")
    examples = parse_corpus(text, vocab_size)
    logger.info("read %d example(s) from %s", len(examples), path)
    return examples


def format_tokens(tokens) -> str:
    return " ".join(str(int(t)) for t in tokens)


def write_corpus(path: str, examples: list[Example]) -> None:
    try:
        with open(path, "w", encoding="utf-8") as f:
            for ex in examples:
                f.write(f"{format_tokens(ex.input)}\t{format_tokens(ex.target)}\n")
    except OSError as exc:
        raise StorageError(f"cannot write corpus {path}: {exc}")
