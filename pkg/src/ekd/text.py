"""Text pipeline: tokenization, byte-pair encoding, vocabulary, batching.

Both translation sides share one BPE table and one vocabulary so that a
teacher and its students always agree on token ids.  The subword marker is
a two-character ``@@`` suffix on every non-final piece of a word; decoding
strips the marker and rejoins pieces without spaces.
"""

from __future__ import annotations

import hashlib
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ContractError, DataError, LengthError, VocabError

__all__ = [
    "PAD_ID",
    "BOS_ID",
    "EOS_ID",
    "UNK_ID",
    "SPECIALS",
    "MARKER",
    "pretokenize",
    "BpeTable",
    "learn_bpe",
    "Vocabulary",
    "build_joint_vocab",
    "encode",
    "decode",
    "TokenizedBatch",
    "batch_by_tokens",
    "gen_synthetic",
    "synthetic_target",
    "read_corpus",
    "write_corpus",
]

PAD_ID, BOS_ID, EOS_ID, UNK_ID = 0, 1, 2, 3
SPECIALS = ("<pad>", "<bos>", "<eos>", "<unk>")
MARKER = "@@"

_TOKEN_RE = re.compile(r"\w+|[^\w\s]", re.UNICODE)


def pretokenize(text: str) -> list[str]:
    """Split into words and single punctuation marks, preserving case."""
    return _TOKEN_RE.findall(text)


# ---------------------------------------------------------------------------
# Byte-pair encoding
# ---------------------------------------------------------------------------

@dataclass
class BpeTable:
    """Ordered merge list plus the continuation marker."""

    merges: list[tuple[str, str]]
    marker: str = MARKER
    _cache: dict[str, tuple[str, ...]] = field(default_factory=dict, repr=False)
    _ranks: dict[tuple[str, str], int] = field(default=None, repr=False)  # type: ignore[assignment]

    def __post_init__(self):
        if self._ranks is None:
            self._ranks = {pair: i for i, pair in enumerate(self.merges)}

    def segment(self, word: str) -> tuple[str, ...]:
        """Split one word into subword pieces by replaying the merge list."""
        hit = self._cache.get(word)
        if hit is not None:
            return hit
        pieces = list(word)
        while len(pieces) > 1:
            best_rank, best_idx = None, -1
            for i in range(len(pieces) - 1):
                rank = self._ranks.get((pieces[i], pieces[i + 1]))
                if rank is not None and (best_rank is None or rank < best_rank):
                    best_rank, best_idx = rank, i
            if best_rank is None:
                break
            pieces[best_idx : best_idx + 2] = [pieces[best_idx] + pieces[best_idx + 1]]
        result = tuple(pieces)
        self._cache[word] = result
        return result

    def tokens_for_word(self, word: str) -> list[str]:
        """Subword tokens with the marker on every non-final piece."""
        pieces = self.segment(word)
        return [p + self.marker for p in pieces[:-1]] + [pieces[-1]]

    def save(self, path: str | Path) -> None:
        lines = [f"#marker {self.marker}"]
        lines += [f"{a} {b}" for a, b in self.merges]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "BpeTable":
        raw = Path(path).read_text(encoding="utf-8").splitlines()
        if not raw or not raw[0].startswith("#marker "):
            raise DataError(f"BPE table {path} is missing its marker header")
        marker = raw[0][len("#marker "):]
        merges = []
        for ln, line in enumerate(raw[1:], start=2):
            if not line.strip():
                continue
            parts = line.split(" ")
            if len(parts) != 2:
                raise DataError(f"BPE table {path} line {ln} is not a pair: {line!r}")
            merges.append((parts[0], parts[1]))
        return cls(merges, marker=marker)


def _pair_counts(word_freqs: dict[tuple[str, ...], int]) -> Counter:
    counts: Counter = Counter()
    for pieces, freq in word_freqs.items():
        for i in range(len(pieces) - 1):
            counts[(pieces[i], pieces[i + 1])] += freq
    return counts


def _merge_word(pieces: tuple[str, ...], pair: tuple[str, str]) -> tuple[str, ...]:
    out = []
    i = 0
    while i < len(pieces):
        if i + 1 < len(pieces) and pieces[i] == pair[0] and pieces[i + 1] == pair[1]:
            out.append(pieces[i] + pieces[i + 1])
            i += 2
        else:
            out.append(pieces[i])
            i += 1
    return tuple(out)


def learn_bpe(corpus: Iterable[str], num_merges: int) -> BpeTable:
    """Learn merge rules greedily by pair frequency, ties lexicographic.

    Merges never cross word boundaries.  With ``num_merges=0`` the table is
    empty and encoding falls back to characters.
    """
    if num_merges < 0:
        raise ContractError(f"num_merges must be non-negative, got {num_merges}")
    word_counter: Counter = Counter()
    for line in corpus:
        word_counter.update(pretokenize(line))
    if not word_counter:
        raise DataError("cannot learn BPE from an empty corpus")
    word_freqs = {tuple(word): freq for word, freq in word_counter.items()}
    merges: list[tuple[str, str]] = []
    for _ in range(num_merges):
        counts = _pair_counts(word_freqs)
        if not counts:
            break
        best = min(counts.items(), key=lambda kv: (-kv[1], kv[0]))[0]
        merges.append(best)
        word_freqs = {_merge_word(p, best): f for p, f in word_freqs.items()}
    return BpeTable(merges)


# ---------------------------------------------------------------------------
# Vocabulary
# ---------------------------------------------------------------------------

class Vocabulary:
    """Token list where position equals id; first four ids are specials."""

    def __init__(self, tokens: Sequence[str]):
        if tuple(tokens[:4]) != SPECIALS:
            raise VocabError(f"vocabulary must start with {SPECIALS}")
        if len(set(tokens)) != len(tokens):
            raise VocabError("vocabulary contains duplicate tokens")
        self.tokens = list(tokens)
        self.index = {t: i for i, t in enumerate(self.tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def id_of(self, token: str) -> int:
        return self.index.get(token, UNK_ID)

    def token_of(self, idx: int) -> str:
        if not 0 <= idx < len(self.tokens):
            raise VocabError(f"token id {idx} outside vocabulary of size {len(self.tokens)}")
        return self.tokens[idx]

    def content_hash(self) -> str:
        digest = hashlib.sha256("\n".join(self.tokens).encode("utf-8"))
        return digest.hexdigest()

    def save(self, path: str | Path) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        tokens = Path(path).read_text(encoding="utf-8").splitlines()
        return cls(tokens)


def build_joint_vocab(corpora: Iterable[Iterable[str]], bpe: BpeTable) -> Vocabulary:
    """One vocabulary over all corpora, ordered by frequency then token."""
    counts: Counter = Counter()
    for corpus in corpora:
        for line in corpus:
            for word in pretokenize(line):
                counts.update(bpe.tokens_for_word(word))
    if not counts:
        raise DataError("cannot build a vocabulary from empty corpora")
    ordered = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return Vocabulary(list(SPECIALS) + [tok for tok, _ in ordered])


def encode(text: str, bpe: BpeTable, vocab: Vocabulary) -> np.ndarray:
    """Token ids for one sentence, ending with eos; unknown pieces map to unk."""
    ids = []
    for word in pretokenize(text):
        for tok in bpe.tokens_for_word(word):
            ids.append(vocab.id_of(tok))
    ids.append(EOS_ID)
    return np.asarray(ids, dtype=np.int64)


def decode(ids: Sequence[int], vocab: Vocabulary) -> str:
    """Detokenized text: specials dropped, markers stripped, words joined."""
    words: list[str] = []
    part = ""
    for idx in ids:
        idx = int(idx)
        if idx in (PAD_ID, BOS_ID, EOS_ID):
            continue
        tok = vocab.token_of(idx)
        if tok.endswith(MARKER) and len(tok) > len(MARKER):
            part += tok[: -len(MARKER)]
        else:
            words.append(part + tok)
            part = ""
    if part:
        words.append(part)
    return " ".join(words)


# ---------------------------------------------------------------------------
# Batching
# ---------------------------------------------------------------------------

@dataclass
class TokenizedBatch:
    """Padded id matrices plus pad masks; masks are True exactly at pads."""

    src_ids: np.ndarray
    tgt_ids: np.ndarray
    src_pad: np.ndarray
    tgt_pad: np.ndarray
    token_count: int  # non-pad target tokens

    @property
    def rows(self) -> int:
        return self.src_ids.shape[0]


def _pad_matrix(seqs: list[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    width = max(len(s) for s in seqs)
    ids = np.full((len(seqs), width), PAD_ID, dtype=np.int64)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = s
    return ids, ids == PAD_ID


def batch_by_tokens(
    pairs: Sequence[tuple[np.ndarray, np.ndarray]],
    max_tokens: int = 4096,
    seed: int | Sequence[int] = 0,
) -> list[TokenizedBatch]:
    """Length-bucketed batches whose padded target size stays within budget.

    Pairs are sorted by length so padding is tight, sliced greedily, and the
    resulting batches are shuffled in a seed-determined order.  Composition
    is a pure function of the pair list; only batch order depends on the
    seed, so one seed always yields the same epoch.
    """
    if not pairs:
        raise DataError("batch_by_tokens received no pairs")
    if max_tokens < 1:
        raise ContractError(f"max_tokens must be positive, got {max_tokens}")
    for i, (_, tgt) in enumerate(pairs):
        if len(tgt) > max_tokens:
            raise LengthError(
                f"sentence {i} has {len(tgt)} target tokens, over the budget of {max_tokens}"
            )
    order = sorted(
        range(len(pairs)),
        key=lambda i: (len(pairs[i][1]), len(pairs[i][0]), i),
    )
    groups: list[list[int]] = []
    current: list[int] = []
    width = 0
    for i in order:
        t_len = len(pairs[i][1])
        new_width = max(width, t_len)
        if current and (len(current) + 1) * new_width > max_tokens:
            groups.append(current)
            current, width = [i], t_len
        else:
            current.append(i)
            width = new_width
    if current:
        groups.append(current)
    rng = np.random.default_rng(seed)
    rng.shuffle(groups)
    batches = []
    for group in groups:
        src_ids, src_pad = _pad_matrix([pairs[i][0] for i in group])
        tgt_ids, tgt_pad = _pad_matrix([pairs[i][1] for i in group])
        batches.append(
            TokenizedBatch(
                src_ids=src_ids,
                tgt_ids=tgt_ids,
                src_pad=src_pad,
                tgt_pad=tgt_pad,
                token_count=int((~tgt_pad).sum()),
            )
        )
    return batches


# ---------------------------------------------------------------------------
# Synthetic corpus
# ---------------------------------------------------------------------------

_PARITY_EVEN = "peven"
_PARITY_ODD = "podd"


def _content_words(vocab_size: int) -> list[str]:
    digits = max(2, len(str(vocab_size - 1)))
    return [f"w{i:0{digits}d}" for i in range(vocab_size)]


def _bijection(seed: int, vocab_size: int) -> np.ndarray:
    return np.random.default_rng([seed, 1]).permutation(vocab_size)


def synthetic_target(src_line: str, seed: int, vocab_size: int) -> str:
    """The exact rule a perfect translator must learn for ``gen_synthetic``."""
    words = _content_words(vocab_size)
    rank = {w: i for i, w in enumerate(words)}
    perm = _bijection(seed, vocab_size)
    src = src_line.split()
    mapped = [words[perm[rank[w]]] for w in reversed(src)]
    marker = _PARITY_EVEN if len(src) % 2 == 0 else _PARITY_ODD
    return " ".join([marker] + mapped)


def gen_synthetic(
    seed: int,
    n_pairs: int,
    len_range: tuple[int, int] = (3, 12),
    vocab_size: int = 64,
) -> list[tuple[str, str]]:
    """Deterministic toy translation task.

    The source is a uniform random word sequence.  The target applies a
    seed-fixed bijection over the word inventory, reverses the order, and
    prepends a token naming the parity of the source length.  The task
    needs token mapping, position handling, and a global property, which
    is enough to separate model capacities at desk scale.
    """
    lo, hi = len_range
    if not (2 <= lo <= hi <= 64):
        raise ContractError(f"len_range must satisfy 2 <= lo <= hi <= 64, got {len_range}")
    if vocab_size < 8:
        raise ContractError(f"vocab_size must be at least 8, got {vocab_size}")
    if n_pairs < 1:
        raise ContractError(f"n_pairs must be positive, got {n_pairs}")
    words = _content_words(vocab_size)
    rng = np.random.default_rng([seed, 0])
    pairs = []
    for _ in range(n_pairs):
        length = int(rng.integers(lo, hi + 1))
        src_words = [words[int(i)] for i in rng.integers(0, vocab_size, size=length)]
        src_line = " ".join(src_words)
        pairs.append((src_line, synthetic_target(src_line, seed, vocab_size)))
    return pairs


# ---------------------------------------------------------------------------
# Corpus files
# ---------------------------------------------------------------------------

def write_corpus(pairs: Sequence[tuple[str, str]], prefix: str | Path) -> tuple[Path, Path]:
    """Write aligned ``<prefix>.src`` and ``<prefix>.tgt`` files."""
    prefix = Path(prefix)
    src_path = prefix.with_suffix(".src")
    tgt_path = prefix.with_suffix(".tgt")
    src_path.write_text("\n".join(p[0] for p in pairs) + "\n", encoding="utf-8")
    tgt_path.write_text("\n".join(p[1] for p in pairs) + "\n", encoding="utf-8")
    return src_path, tgt_path


def read_corpus(prefix: str | Path) -> list[tuple[str, str]]:
    prefix = Path(prefix)
    src_lines = prefix.with_suffix(".src").read_text(encoding="utf-8").splitlines()
    tgt_lines = prefix.with_suffix(".tgt").read_text(encoding="utf-8").splitlines()
    if len(src_lines) != len(tgt_lines):
        raise DataError(
            f"corpus {prefix} is misaligned: {len(src_lines)} source lines "
            f"vs {len(tgt_lines)} target lines"
        )
    if not src_lines:
        raise DataError(f"corpus {prefix} is empty")
    return list(zip(src_lines, tgt_lines))
