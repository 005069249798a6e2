"""Column-format dataset reader: one token and tag per line, blank line
between sentences, BIO tags decoded into character-offset spans.

Tokens are joined with single spaces to form the instance text, so character
offsets follow directly from token positions. A stray I- tag without a
preceding B- of the same type opens a new span (standard repair)."""

from __future__ import annotations

from pathlib import Path

from .corpus import EntityMention, NerInstance
from .errors import CorpusParseError


def _finish(tokens, spans):
    text = " ".join(tokens)
    starts = []
    at = 0
    for tok in tokens:
        starts.append(at)
        at += len(tok) + 1
    mentions = []
    for t0, t1, label in spans:
        start = starts[t0]
        end = starts[t1] + len(tokens[t1])
        mentions.append(EntityMention(start, end, label, text[start:end]))
    return NerInstance(text=text, entities=tuple(mentions))


def read_conll(path, token_col: int = 0, tag_col: int = -1) -> list[NerInstance]:
    """Parse a BIO-tagged column file into instances."""
    instances = []
    tokens: list[str] = []
    spans: list[tuple[int, int, str]] = []
    open_span = None  # (token_start, label)

    def close():
        nonlocal open_span
        if open_span is not None:
            spans.append((open_span[0], len(tokens) - 1, open_span[1]))
            open_span = None

    path = Path(path)
    with path.open("r", encoding="utf-8") as f:
        for line_no, raw in enumerate(f, start=1):
            line = raw.rstrip("\n")
            if line.startswith("-DOCSTART-"):
                continue
            if not line.strip():
                close()
                if tokens:
                    instances.append(_finish(tokens, spans))
                tokens, spans = [], []
                continue
            cols = line.split()
            if len(cols) < 2:
                raise CorpusParseError(path, line_no, f"expected columns, got {line!r}")
            token = cols[token_col]
            tag = cols[tag_col]
            if tag == "O":
                close()
            elif tag.startswith("B-"):
                close()
                open_span = (len(tokens), tag[2:])
            elif tag.startswith("I-"):
                label = tag[2:]
                if open_span is None or open_span[1] != label:
                    close()
                    open_span = (len(tokens), label)
            else:
                raise CorpusParseError(path, line_no, f"unknown tag {tag!r}")
            tokens.append(token)
    close()
    if tokens:
        instances.append(_finish(tokens, spans))
    return instances
