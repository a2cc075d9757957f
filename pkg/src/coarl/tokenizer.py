"""Byte-level tokenizer: one id per UTF-8 byte plus three specials."""

from __future__ import annotations

import logging
from typing import NamedTuple

PAD = 256
BOS = 257
EOS = 258
VOCAB_SIZE = 259

log = logging.getLogger(__name__)


class Encoded(NamedTuple):
    ids: list
    truncated: bool


def tokenize(text: str, max_len: int | None = None) -> Encoded:
    ids = list(text.encode("utf-8"))
    truncated = max_len is not None and len(ids) > max_len
    if truncated:
        log.warning("input of %d bytes truncated to %d", len(ids), max_len)
        ids = ids[:max_len]
    return Encoded(ids, truncated)


def detokenize(ids) -> str:
    """Drop special ids and decode; invalid UTF-8 (e.g. a cut multibyte char) is replaced."""
    return bytes(int(i) for i in ids if 0 <= int(i) < 256).decode("utf-8", errors="replace")
