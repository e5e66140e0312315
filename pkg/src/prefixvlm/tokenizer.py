"""Byte-level BPE tokenizer.

The base alphabet is the set of bytes seen in the training corpus; merges are
learned inside whitespace-delimited words (a leading space sticks to the word
that follows it), so decode is plain byte concatenation.
"""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

PAD, BOS, EOS, MASK, SEP = 0, 1, 2, 3, 4
SPECIALS = {PAD: b"<pad>", BOS: b"<bos>", EOS: b"<eos>", MASK: b"<mask>", SEP: b"<sep>"}
N_SPECIAL = len(SPECIALS)

_WORD_RE = re.compile(rb" ?[^\s]+|\s+")


class TokenizerError(ValueError):
    pass


def _words(text: bytes) -> list[bytes]:
    return _WORD_RE.findall(text)


@dataclass
class Vocab:
    pieces: list[bytes]
    merges: list[tuple[int, int]]
    _piece_id: dict[bytes, int] = field(init=False, repr=False)
    _rank: dict[tuple[int, int], int] = field(init=False, repr=False)
    _cache: dict[bytes, tuple[int, ...]] = field(init=False, repr=False)

    def __post_init__(self):
        self._piece_id = {p: i for i, p in enumerate(self.pieces) if i >= N_SPECIAL}
        self._rank = {pair: r for r, pair in enumerate(self.merges)}
        self._cache = {}

    @property
    def size(self) -> int:
        return len(self.pieces)

    def __len__(self) -> int:
        return len(self.pieces)

    def piece(self, i: int) -> bytes:
        return self.pieces[i]

    def token_id(self, piece: bytes | str) -> int:
        if isinstance(piece, str):
            piece = piece.encode("utf-8")
        return self._piece_id[piece]

    # -- encoding ---------------------------------------------------------

    def _encode_word(self, word: bytes, offset: int) -> tuple[int, ...]:
        hit = self._cache.get(word)
        if hit is not None:
            return hit
        ids = []
        for k in range(len(word)):
            tok = self._piece_id.get(word[k : k + 1])
            if tok is None:
                raise TokenizerError(f"unencodable byte 0x{word[k]:02x} at offset {offset + k}")
            ids.append(tok)
        rank = self._rank
        while len(ids) > 1:
            best, best_at = None, -1
            for k in range(len(ids) - 1):
                r = rank.get((ids[k], ids[k + 1]))
                if r is not None and (best is None or r < best):
                    best, best_at = r, k
            if best is None:
                break
            merged = self._piece_id[self.pieces[ids[best_at]] + self.pieces[ids[best_at + 1]]]
            # apply this merge at every occurrence, left to right
            pair = (ids[best_at], ids[best_at + 1])
            out, k = [], 0
            while k < len(ids):
                if k < len(ids) - 1 and (ids[k], ids[k + 1]) == pair:
                    out.append(merged)
                    k += 2
                else:
                    out.append(ids[k])
                    k += 1
            ids = out
        result = tuple(ids)
        self._cache[word] = result
        return result

    def encode(
        self,
        text: str,
        add_bos: bool = False,
        add_eos: bool = False,
        max_len: int | None = None,
        truncate: bool = True,
    ) -> list[int]:
        """Token ids for ``text``.  ``max_len`` counts BOS/EOS; EOS survives truncation."""
        raw = text.encode("utf-8")
        ids: list[int] = [BOS] if add_bos else []
        offset = 0
        for w in _words(raw):
            ids.extend(self._encode_word(w, offset))
            offset += len(w)
        if add_eos:
            ids.append(EOS)
        if max_len is not None and len(ids) > max_len:
            if not truncate:
                raise TokenizerError(f"sequence of {len(ids)} tokens exceeds max length {max_len}")
            ids = ids[: max_len - 1] + [EOS] if add_eos else ids[:max_len]
        return ids

    def decode(self, ids: Iterable[int]) -> str:
        out = bytearray()
        for i in ids:
            i = int(i)
            if i < 0 or i >= len(self.pieces):
                raise TokenizerError(f"id {i} outside vocabulary of size {len(self.pieces)}")
            if i < N_SPECIAL:
                continue
            out += self.pieces[i]
        return out.decode("utf-8", errors="replace")

    # -- persistence ----------------------------------------------------------

    def dumps(self) -> str:
        lines = [f"{i}\t{p.hex()}" for i, p in enumerate(self.pieces)]
        lines.append("#MERGES")
        lines.extend(f"{a} {b}" for a, b in self.merges)
        return "\n".join(lines) + "\n"

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(self.dumps().encode("utf-8"))

    @classmethod
    def loads(cls, text: str) -> "Vocab":
        pieces: list[bytes] = []
        merges: list[tuple[int, int]] = []
        in_merges = False
        for line in text.splitlines():
            if not line:
                continue
            if line == "#MERGES":
                in_merges = True
                continue
            if in_merges:
                a, b = line.split(" ")
                merges.append((int(a), int(b)))
            else:
                idx, hexed = line.split("\t")
                if int(idx) != len(pieces):
                    raise TokenizerError(f"vocab ids must be dense, saw {idx} at row {len(pieces)}")
                pieces.append(bytes.fromhex(hexed))
        return cls(pieces, merges)

    @classmethod
    def load(cls, path: str | Path) -> "Vocab":
        return cls.loads(Path(path).read_bytes().decode("utf-8"))


def train_bpe(corpus: Iterable[str], target_vocab: int, seed: int = 0, max_lines: int | None = None) -> Vocab:
    """Learn merges until ``target_vocab`` pieces exist or every word is one piece.

    The most frequent adjacent pair wins; ties go to the lexicographically
    smallest (left bytes, right bytes).  ``seed`` only matters when
    ``max_lines`` subsamples the corpus.
    """
    lines = list(corpus)
    if not lines:
        raise TokenizerError("empty corpus")
    if max_lines is not None and len(lines) > max_lines:
        keep = np.sort(np.random.default_rng(seed).choice(len(lines), max_lines, replace=False))
        lines = [lines[i] for i in keep]
    word_counts: Counter[bytes] = Counter()
    for line in lines:
        word_counts.update(_words(line.encode("utf-8")))
    alphabet = sorted({b for w in word_counts for b in w})
    minimum = N_SPECIAL + len(alphabet) + 1
    if target_vocab < minimum:
        raise TokenizerError(f"target_vocab {target_vocab} too small; minimum is {minimum}")
    pieces = [SPECIALS[i] for i in range(N_SPECIAL)] + [bytes([b]) for b in alphabet]
    piece_id = {p: i for i, p in enumerate(pieces) if i >= N_SPECIAL}
    words = [[piece_id[bytes([b])] for b in w] for w in sorted(word_counts)]
    counts = [word_counts[w] for w in sorted(word_counts)]
    merges: list[tuple[int, int]] = []
    while len(pieces) < target_vocab:
        pair_counts: Counter[tuple[int, int]] = Counter()
        for seq, c in zip(words, counts):
            for k in range(len(seq) - 1):
                pair_counts[(seq[k], seq[k + 1])] += c
        if not pair_counts:
            break
        top = max(pair_counts.values())
        best = min(
            (p for p, c in pair_counts.items() if c == top),
            key=lambda p: (pieces[p[0]], pieces[p[1]]),
        )
        joined = pieces[best[0]] + pieces[best[1]]
        new_id = piece_id.get(joined)
        if new_id is None:
            new_id = len(pieces)
            pieces.append(joined)
            piece_id[joined] = new_id
        merges.append(best)
        for n, seq in enumerate(words):
            if len(seq) < 2:
                continue
            out, k = [], 0
            while k < len(seq):
                if k < len(seq) - 1 and seq[k] == best[0] and seq[k + 1] == best[1]:
                    out.append(new_id)
                    k += 2
                else:
                    out.append(seq[k])
                    k += 1
            words[n] = out
    return Vocab(pieces, merges)


def mask_tokens(ids, rate: float, rng: np.random.Generator) -> tuple[np.ndarray, dict[int, int]]:
    """MLM corruption: each non-special token is replaced by MASK with probability ``rate``.

    Returns the corrupted ids and ``{position: original id}`` for masked slots.
    """
    if not 0.0 <= rate <= 1.0:
        raise ValueError("mask rate must lie in [0, 1]")
    ids = np.asarray(ids, dtype=np.int64)
    eligible = ids >= N_SPECIAL
    draw = rng.random(ids.shape) < rate
    hit = eligible & draw
    corrupted = ids.copy()
    corrupted[hit] = MASK
    targets = {int(k): int(ids[k]) for k in np.flatnonzero(hit)}
    return corrupted, targets
