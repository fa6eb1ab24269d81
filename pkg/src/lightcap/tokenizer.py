"""WordPiece tokenizer over a plain-text vocabulary file.

The vocabulary file holds one token per line (UTF-8, line index = id) and
must contain the five special tokens. Encoding lowercases, splits on
whitespace, then runs greedy longest-match-first WordPiece with "##"
continuation pieces; words with no match become [UNK]. [SEP] doubles as
the generation stop token.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .errors import FormatError, RangeError

PAD, CLS, SEP, MASK, UNK = "[PAD]", "[CLS]", "[SEP]", "[MASK]", "[UNK]"
SPECIAL_TOKENS = (PAD, CLS, SEP, MASK, UNK)

# Segment labels for assembled fusion sequences.
SEG_VISUAL, SEG_CONCEPT, SEG_CAPTION = 0, 1, 2


@dataclass
class Vocab:
    """Immutable after load; encode/decode are pure functions over it."""

    tokens: list[str]
    index: dict[str, int] = field(repr=False)

    @property
    def size(self) -> int:
        return len(self.tokens)

    @property
    def pad_id(self) -> int:
        return self.index[PAD]

    @property
    def cls_id(self) -> int:
        return self.index[CLS]

    @property
    def sep_id(self) -> int:
        return self.index[SEP]

    @property
    def mask_id(self) -> int:
        return self.index[MASK]

    @property
    def unk_id(self) -> int:
        return self.index[UNK]

    def special_ids(self) -> frozenset[int]:
        return frozenset(self.index[t] for t in SPECIAL_TOKENS)


@dataclass
class TokenSequence:
    """Token ids with per-token segment labels and position indices."""

    ids: list[int]
    segments: list[int]
    positions: list[int]

    def __post_init__(self):
        if not (len(self.ids) == len(self.segments) == len(self.positions)):
            raise FormatError(
                "ids, segments and positions must have equal length: "
                f"{len(self.ids)}/{len(self.segments)}/{len(self.positions)}"
            )

    def __len__(self) -> int:
        return len(self.ids)


def load_vocab(path) -> Vocab:
    """Read a one-token-per-line vocabulary; line number = id."""
    tokens: list[str] = []
    index: dict[str, int] = {}
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh):
            token = line.rstrip("\n").rstrip("\r")
            if token in index:
                raise FormatError(f"duplicate token {token!r} at line {line_no + 1}")
            index[token] = line_no
            tokens.append(token)
    for special in SPECIAL_TOKENS:
        if special not in index:
            raise FormatError(f"vocabulary is missing special token {special}")
    return Vocab(tokens=tokens, index=index)


def write_vocab(path, tokens: list[str]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for token in tokens:
            fh.write(token + "\n")


def _wordpiece(word: str, vocab: Vocab) -> list[int]:
    """Greedy longest-match-first split of one whitespace-delimited word."""
    pieces: list[int] = []
    start = 0
    while start < len(word):
        end = len(word)
        piece_id = None
        while start < end:
            piece = word[start:end]
            if start > 0:
                piece = "##" + piece
            if piece in vocab.index:
                piece_id = vocab.index[piece]
                break
            end -= 1
        if piece_id is None:
            return [vocab.unk_id]
        pieces.append(piece_id)
        start = end
    return pieces


def encode(text: str, vocab: Vocab) -> list[int]:
    """Tokenize ``text`` to ids. Total function; unknown words become [UNK]."""
    ids: list[int] = []
    for word in text.lower().split():
        ids.extend(_wordpiece(word, vocab))
    return ids


def decode(ids, vocab: Vocab) -> str:
    """Ids back to text: drop specials, merge "##" continuations."""
    words: list[str] = []
    specials = vocab.special_ids()
    for i in ids:
        i = int(i)
        if i < 0 or i >= vocab.size:
            raise RangeError(f"token id {i} out of range for vocab of {vocab.size}")
        if i in specials:
            continue
        token = vocab.tokens[i]
        if token.startswith("##") and words:
            words[-1] += token[2:]
        else:
            words.append(token.removeprefix("##"))
    return " ".join(words)
