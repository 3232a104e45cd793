"""Fixed 64-symbol token vocabulary shared by the planner, tasks, and renderer.

Symbols: lowercase letters, uppercase letters, digits, newline, and tab.
Newline and tab double as segmentation delimiters for plan construction.
"""

from __future__ import annotations

import string

SYMBOLS: str = string.ascii_lowercase + string.ascii_uppercase + string.digits + "\n\t"
VOCAB_SIZE: int = len(SYMBOLS)
assert VOCAB_SIZE == 64

TOKEN_TO_ID: dict[str, int] = {ch: i for i, ch in enumerate(SYMBOLS)}
ID_TO_TOKEN: dict[int, str] = {i: ch for i, ch in enumerate(SYMBOLS)}

NEWLINE_ID: int = TOKEN_TO_ID["\n"]
TAB_ID: int = TOKEN_TO_ID["\t"]
DELIMITER_IDS: frozenset[int] = frozenset({NEWLINE_ID, TAB_ID})


def encode(text: str) -> list[int]:
    """Tokenize a string; raises on symbols outside the vocabulary."""
    try:
        return [TOKEN_TO_ID[ch] for ch in text]
    except KeyError as exc:
        raise ValueError(f"symbol not in vocabulary: {exc.args[0]!r}") from None


def decode(ids: list[int] | tuple[int, ...]) -> str:
    """Inverse of encode."""
    try:
        return "".join(ID_TO_TOKEN[i] for i in ids)
    except KeyError as exc:
        raise ValueError(f"token id out of range: {exc.args[0]!r}") from None
