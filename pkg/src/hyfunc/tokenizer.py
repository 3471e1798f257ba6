"""Whitespace/punctuation tokenizer with a fixed reserved-token block.

Segmentation rule (applied by ``segment`` and therefore by ``encode``):

1. Split the text on Unicode whitespace.
2. Scan each chunk left to right:
   - any reserved literal (``<pad>`` ``<unk>`` ``<bos>`` ``<eos>``
     ``<param>`` ``</param>``) matching at the cursor is emitted as a single
     token (longest match first);
   - otherwise a punctuation character becomes a single-character token;
   - otherwise a maximal run of non-punctuation characters becomes one token.

Punctuation is ASCII punctuation *minus underscore*, so identifiers such as
``get_weather`` stay whole. Non-ASCII text passes through inside word runs.

Detokenization spacing table (``detokenize``): a single space is inserted
between consecutive tokens ``prev, cur`` iff

    =====================  =====================  =====
    prev                   cur                    space
    =====================  =====================  =====
    word                   word                   yes
    ","                    anything               yes
    word                   punct / reserved       no
    punct / reserved       anything (prev != ,)   no
    =====================  =====================  =====

where "word" means any token that is neither a single punctuation character
nor a reserved literal. This makes ``detokenize`` the inverse of ``segment``
for text in canonical spacing (calls like ``f(x="a", y=1)``), and
``encode(decode(encode(t))) == encode(t)`` for every text ``t``.
"""

from __future__ import annotations

import json
import string

from .errors import ParseError, VocabError

PAD, UNK, BOS, EOS, PARAM_OPEN, PARAM_CLOSE = (
    "<pad>", "<unk>", "<bos>", "<eos>", "<param>", "</param>",
)
RESERVED = (PAD, UNK, BOS, EOS, PARAM_OPEN, PARAM_CLOSE)

PAD_ID, UNK_ID, BOS_ID, EOS_ID, PARAM_OPEN_ID, PARAM_CLOSE_ID = range(6)
CONTROL_IDS = frozenset({PARAM_OPEN_ID, PARAM_CLOSE_ID})

# underscore is a word character; see module docstring
_PUNCT = frozenset(string.punctuation) - {"_"}
# longest first so no reserved literal shadows a longer one
_RESERVED_BY_LENGTH = tuple(sorted(RESERVED, key=len, reverse=True))
_RESERVED_SET = frozenset(RESERVED)


def segment(text: str) -> list[str]:
    """Split text into token strings without needing a vocabulary."""
    out: list[str] = []
    for chunk in text.split():
        i = 0
        n = len(chunk)
        while i < n:
            for lit in _RESERVED_BY_LENGTH:
                if chunk.startswith(lit, i):
                    out.append(lit)
                    i += len(lit)
                    break
            else:
                c = chunk[i]
                if c in _PUNCT:
                    out.append(c)
                    i += 1
                else:
                    j = i + 1
                    while j < n and chunk[j] not in _PUNCT:
                        j += 1
                    out.append(chunk[i:j])
                    i = j
    return out


def _is_word(token: str) -> bool:
    if token in _RESERVED_SET:
        return False
    return not (len(token) == 1 and token in _PUNCT)


def detokenize(tokens: list[str]) -> str:
    """Join token strings back into text using the spacing table above."""
    parts: list[str] = []
    prev: str | None = None
    for tok in tokens:
        if prev is not None and (prev == "," or (_is_word(prev) and _is_word(tok))):
            parts.append(" ")
        parts.append(tok)
        prev = tok
    return "".join(parts)


class Vocab:
    """Immutable token-string <-> id mapping with the reserved block at 0..5."""

    def __init__(self, tokens: list[str]):
        if tuple(tokens[:6]) != RESERVED:
            raise VocabError(f"vocab must start with the reserved block {RESERVED}")
        seen: dict[str, int] = {}
        for i, tok in enumerate(tokens):
            if tok in seen:
                raise VocabError(f"duplicate token {tok!r} at ids {seen[tok]} and {i}")
            if i >= 6 and tok in _RESERVED_SET:
                raise VocabError(f"ordinary token {tok!r} collides with a reserved literal")
            seen[tok] = i
        self._tokens = tuple(tokens)
        self._index = seen

    def __len__(self) -> int:
        return len(self._tokens)

    def __eq__(self, other: object) -> bool:
        return isinstance(other, Vocab) and self._tokens == other._tokens

    @property
    def tokens(self) -> tuple[str, ...]:
        return self._tokens

    def id(self, token: str) -> int:
        """Id of a token string; unknown strings map to <unk>."""
        return self._index.get(token, UNK_ID)

    def token(self, token_id: int) -> str:
        if not 0 <= token_id < len(self._tokens):
            raise VocabError(f"token id {token_id} out of range [0, {len(self._tokens)})")
        return self._tokens[token_id]

    def encode(self, text: str) -> list[int]:
        return [self._index.get(tok, UNK_ID) for tok in segment(text)]

    def decode(self, ids: list[int]) -> str:
        return detokenize([self.token(i) for i in ids])

    def strings(self, ids: list[int]) -> list[str]:
        return [self.token(i) for i in ids]

    def is_control(self, token_id: int) -> bool:
        """True for the template markers <param> / </param>."""
        return token_id in CONTROL_IDS

    def save(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(list(self._tokens), fh, ensure_ascii=False)
            fh.write("\n")

    @classmethod
    def load(cls, path: str) -> "Vocab":
        with open(path, encoding="utf-8") as fh:
            try:
                tokens = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ParseError(f"vocab file is not valid JSON: {exc.msg}", offset=exc.pos) from exc
        if not isinstance(tokens, list) or not all(isinstance(t, str) for t in tokens):
            raise ParseError("vocab file must be a JSON array of strings")
        return cls(tokens)


def build_vocab(corpus: list[str], min_count: int = 1) -> Vocab:
    """Count tokens over the corpus and assign ids after the reserved block.

    Ordinary ids are assigned by descending count, ties broken
    lexicographically, so the mapping is a pure function of the corpus.
    Reserved literals appearing in corpus text are never double-counted.
    """
    if min_count < 1:
        raise VocabError(f"min_count must be >= 1, got {min_count}")
    counts: dict[str, int] = {}
    for text in corpus:
        for tok in segment(text):
            if tok not in _RESERVED_SET:
                counts[tok] = counts.get(tok, 0) + 1
    kept = [t for t, c in counts.items() if c >= min_count]
    kept.sort(key=lambda t: (-counts[t], t))
    return Vocab(list(RESERVED) + kept)
