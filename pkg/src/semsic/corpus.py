"""Text ingestion: dictionary, tokenization, knowledge sets and batching."""
from __future__ import annotations

import string
from collections import Counter
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

END = "<END>"
UNK = "<UNK>"
END_ID = 0
UNK_ID = 1
PAD_ID = END_ID

MIN_WORDS = 4
MAX_WORDS = 20
DEFAULT_N = MAX_WORDS + 1

_PUNCT = str.maketrans("", "", string.punctuation)


class CorpusError(ValueError):
    pass


def normalize(text: str) -> list[str]:
    """Lowercase, drop punctuation characters and split on whitespace."""
    return text.lower().translate(_PUNCT).split()


@dataclass(frozen=True)
class Vocabulary:
    words: tuple[str, ...]
    index_of: dict[str, int] = field(compare=False, repr=False)

    @classmethod
    def from_words(cls, words: Sequence[str]) -> "Vocabulary":
        words = tuple(words)
        if not words or words[0] != END:
            raise CorpusError("entry 0 of a vocabulary must be the end marker")
        index_of = {w: i for i, w in enumerate(words)}
        if len(index_of) != len(words):
            raise CorpusError("duplicate words in vocabulary")
        return cls(words, index_of)

    @property
    def size(self) -> int:
        return len(self.words)

    def __len__(self) -> int:
        return len(self.words)

    @property
    def unk_id(self) -> int | None:
        return self.index_of.get(UNK)

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self.words) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").split("\n")
        if lines and lines[-1] == "":
            lines = lines[:-1]
        return cls.from_words(lines)


def build_vocabulary(corpus_lines: Sequence[str], min_count: int = 1,
                     reserve_unk: bool = True, max_size: int | None = None) -> Vocabulary:
    """Build the dictionary from raw sentences.

    Words are ordered by descending count, ties broken lexicographically.
    Index 0 is always ``<END>``; with ``reserve_unk`` index 1 is ``<UNK>``.
    ``max_size`` caps the total size including reserved entries.
    """
    if not corpus_lines:
        raise CorpusError("cannot build a vocabulary from an empty corpus")
    counts = Counter()
    for line in corpus_lines:
        counts.update(normalize(line))
    # normalized words never contain '<', so they cannot collide with reserved tokens
    reserved = [END, UNK] if reserve_unk else [END]
    ranked = sorted((w for w, c in counts.items() if c >= min_count),
                    key=lambda w: (-counts[w], w))
    if max_size is not None:
        ranked = ranked[: max(0, max_size - len(reserved))]
    return Vocabulary.from_words(reserved + ranked)


@dataclass(frozen=True)
class TokenizedSentence:
    token_ids: tuple[int, ...]
    raw_length: int


def tokenize_and_filter(text: str, vocab: Vocabulary,
                        min_words: int = MIN_WORDS,
                        max_words: int = MAX_WORDS) -> TokenizedSentence | None:
    """Map a sentence to ids with the end marker appended.

    Returns None when the word count falls outside ``[min_words, max_words]``.
    Out-of-vocabulary words map to ``<UNK>``; a vocabulary without that entry
    raises instead.
    """
    words = normalize(text)
    if not (min_words <= len(words) <= max_words):
        return None
    unk = vocab.unk_id
    ids = []
    for w in words:
        i = vocab.index_of.get(w, unk)
        if i is None:
            raise CorpusError(f"out-of-vocabulary word {w!r} and no <UNK> entry")
        ids.append(i)
    ids.append(END_ID)
    return TokenizedSentence(tuple(ids), len(words))


def detokenize(ids: Sequence[int], vocab: Vocabulary) -> str:
    """Words up to (excluding) the first end marker, space-joined."""
    out = []
    for i in ids:
        i = int(i)
        if i == END_ID:
            break
        out.append(vocab.words[i])
    return " ".join(out)


@dataclass
class KnowledgeSet:
    """Sentences available to one user.

    ``pairing`` holds one group id per sentence; knowledge sets built by
    :func:`paired_knowledge_sets` share both the ids and the row order.
    """
    user_index: int
    sentences: list[TokenizedSentence]
    vocab: Vocabulary
    pairing: list[int] | None = None

    def __post_init__(self):
        if not self.sentences:
            raise CorpusError(f"knowledge set for user {self.user_index} is empty")
        if self.pairing is not None and len(self.pairing) != len(self.sentences):
            raise CorpusError("pairing length must match sentence count")

    def __len__(self) -> int:
        return len(self.sentences)

    def texts(self) -> list[str]:
        return [detokenize(s.token_ids, self.vocab) for s in self.sentences]

    def subset(self, rows: Sequence[int]) -> "KnowledgeSet":
        pairing = None if self.pairing is None else [self.pairing[r] for r in rows]
        return KnowledgeSet(self.user_index, [self.sentences[r] for r in rows],
                            self.vocab, pairing)


@dataclass
class Batch:
    id_matrix: np.ndarray  # (batch, N) int64
    lengths: np.ndarray    # (batch,) raw word counts

    @property
    def size(self) -> int:
        return self.id_matrix.shape[0]

    @property
    def n(self) -> int:
        return self.id_matrix.shape[1]


def make_batch(sentences: Sequence[TokenizedSentence], n: int = DEFAULT_N) -> Batch:
    ids = np.full((len(sentences), n), PAD_ID, dtype=np.int64)
    lengths = np.empty(len(sentences), dtype=np.int64)
    for row, s in enumerate(sentences):
        if len(s.token_ids) > n:
            raise CorpusError(f"sentence of {s.raw_length} words does not fit N={n}")
        ids[row, : len(s.token_ids)] = s.token_ids
        lengths[row] = s.raw_length
    return Batch(ids, lengths)


def batch_source(ks: KnowledgeSet, batch_size: int, seed: int,
                 n: int = DEFAULT_N, shuffle: bool = True) -> Iterator[Batch]:
    """Yield one epoch of batches.

    The permutation depends only on ``seed`` and the set size, so aligned
    knowledge sets batched with the same seed stay row-aligned. The last
    batch may be smaller than ``batch_size``.
    """
    if batch_size < 1:
        raise CorpusError("batch_size must be >= 1")
    order = np.arange(len(ks))
    if shuffle:
        order = np.random.default_rng(seed).permutation(len(ks))
    for start in range(0, len(order), batch_size):
        rows = order[start: start + batch_size]
        yield make_batch([ks.sentences[r] for r in rows], n)


# -- corpus files -----------------------------------------------------------

def read_pairs(path) -> list[tuple[str, ...]]:
    """Read a tab-separated pair file (premise TAB hypothesis per line)."""
    pairs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            cols = line.split("\t")
            if len(cols) < 2:
                raise CorpusError(f"{path}:{lineno}: expected premise<TAB>hypothesis")
            pairs.append(tuple(cols))
    if not pairs:
        raise CorpusError(f"{path}: no sentence pairs")
    return pairs


def desk_corpus_path() -> Path:
    return Path(str(resources.files("semsic") / "data" / "desk_pairs.tsv"))


def group_by_premise(pairs: Sequence[tuple[str, ...]]) -> list[list[str]]:
    """Collapse pairs into ``[premise, hyp1, hyp2, ...]`` groups, file order kept."""
    groups: dict[str, list[str]] = {}
    for premise, hyp, *_ in pairs:
        groups.setdefault(premise, [premise]).append(hyp)
    return list(groups.values())


def paired_knowledge_sets(pairs: Sequence[tuple[str, ...]], n_users: int,
                          vocab: Vocabulary, max_groups: int | None = None,
                          n: int = DEFAULT_N) -> list[KnowledgeSet]:
    """Row-aligned knowledge sets: user 1 gets the premise, user i>1 its
    (i-1)-th hypothesis. Groups with too few hypotheses or any sentence
    failing the length filter are dropped whole."""
    rows: list[list[TokenizedSentence]] = []
    gids: list[int] = []
    for gid, group in enumerate(group_by_premise(pairs)):
        if len(group) < n_users:
            continue
        toks = [tokenize_and_filter(t, vocab, max_words=min(MAX_WORDS, n - 1))
                for t in group[:n_users]]
        if any(t is None for t in toks):
            continue
        rows.append(toks)
        gids.append(gid)
        if max_groups is not None and len(rows) >= max_groups:
            break
    if not rows:
        raise CorpusError("no premise group satisfies the user count and length filter")
    return [KnowledgeSet(u + 1, [r[u] for r in rows], vocab, list(gids))
            for u in range(n_users)]


def split_rows(n_rows: int, test_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    perm = np.random.default_rng(seed).permutation(n_rows)
    n_test = int(round(n_rows * test_fraction))
    return np.sort(perm[n_test:]), np.sort(perm[:n_test])
