"""Byte-level vocabulary extended with level-labelled Semantic-ID tokens."""
from __future__ import annotations

import re
import string
from dataclasses import dataclass

SPECIALS = ("<pad>", "<bos>", "<eos>", "<system>", "<user>", "<assistant>")
N_BYTES = 256
LEVEL_LABELS = string.ascii_lowercase[:23]  # x, y, z stay free
SUFFIX_LABEL = "x"

_TOKEN_RE = re.compile(r"<[a-z]+(?:_\d+)?>")


@dataclass(frozen=True)
class Vocabulary:
    """Token id layout: 256 bytes, then specials, then SID tokens, then suffix tokens.

    SID tokens occupy one contiguous range, grouped by level: level ``l`` code
    ``k`` is ``<{letter(l)}_{k}>``. Suffix tokens (``<x_n>``) disambiguate items
    whose full code path is shared and sit directly after the SID range.
    """
    levels: int = 0
    size: int = 0
    n_suffix: int = 0

    @property
    def n_text(self) -> int:
        return N_BYTES + len(SPECIALS)

    @property
    def n_sid(self) -> int:
        return self.levels * self.size

    @property
    def n_new(self) -> int:
        return self.n_sid + self.n_suffix

    def __len__(self) -> int:
        return self.n_text + self.n_new

    @property
    def sid_range(self) -> range:
        return range(self.n_text, self.n_text + self.n_sid)

    @property
    def new_range(self) -> range:
        return range(self.n_text, len(self))

    def special(self, name: str) -> int:
        return N_BYTES + SPECIALS.index(name)

    @property
    def pad(self) -> int:
        return self.special("<pad>")

    @property
    def bos(self) -> int:
        return self.special("<bos>")

    @property
    def eos(self) -> int:
        return self.special("<eos>")

    def sid_token(self, level: int, code: int) -> int:
        if not (0 <= level < self.levels and 0 <= code < self.size):
            raise KeyError(f"no SID token for level {level} code {code}")
        return self.n_text + level * self.size + code

    def suffix_token(self, n: int) -> int:
        if not 1 <= n <= self.n_suffix:
            raise KeyError(f"no suffix token {n}")
        return self.n_text + self.n_sid + n - 1

    def sid_tokens(self, sid) -> list[int]:
        ids = [self.sid_token(level, c) for level, c in enumerate(sid.codes)]
        if sid.suffix is not None:
            ids.append(self.suffix_token(sid.suffix))
        return ids

    def level_of(self, token: int) -> int | None:
        if token in self.sid_range:
            return (token - self.n_text) // self.size
        return None

    def token_str(self, token: int) -> str:
        if token < N_BYTES:
            return chr(token)
        if token < self.n_text:
            return SPECIALS[token - N_BYTES]
        if token in self.sid_range:
            level, code = divmod(token - self.n_text, self.size)
            return f"<{LEVEL_LABELS[level]}_{code}>"
        if token < len(self):
            return f"<{SUFFIX_LABEL}_{token - self.n_text - self.n_sid + 1}>"
        raise KeyError(token)

    def decode(self, ids) -> str:
        return "".join(self.token_str(int(t)) for t in ids)

    def encode(self, text: str) -> list[int]:
        """Inverse of :meth:`decode`: markup for known tokens, latin-1 bytes otherwise."""
        named = {self.token_str(t): t for t in range(N_BYTES, len(self))}
        out, pos = [], 0
        for m in _TOKEN_RE.finditer(text):
            if m.group() not in named:
                continue
            out.extend(text[pos:m.start()].encode("latin-1"))
            out.append(named[m.group()])
            pos = m.end()
        out.extend(text[pos:].encode("latin-1"))
        return out

    def bytes_of(self, text: str) -> list[int]:
        return list(text.encode("latin-1"))
