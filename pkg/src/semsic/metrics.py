"""Sentence similarity and BLEU, per user and minimum across users."""
from __future__ import annotations

import hashlib
import math
from collections import Counter
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Mapping, Protocol, Sequence

import numpy as np

EMBED_DIM = 384


class MetricError(ValueError):
    pass


class SentenceEmbedder(Protocol):
    dim: int

    def embed(self, sentence: str) -> np.ndarray: ...


class HashEmbedder:
    """Deterministic fallback: mean of fixed Gaussian word vectors.

    Each word's vector is drawn from a generator seeded by a hash of the
    word, so no vocabulary or download is needed and results are stable
    across processes.
    """

    def __init__(self, dim: int = EMBED_DIM, salt: str = "semsic"):
        self.dim = dim
        self.salt = salt

    @lru_cache(maxsize=65536)
    def word_vector(self, word: str) -> np.ndarray:
        digest = hashlib.blake2b(f"{self.salt}:{word}".encode(), digest_size=8).digest()
        rng = np.random.default_rng(int.from_bytes(digest, "little"))
        return rng.standard_normal(self.dim)

    def embed(self, sentence: str) -> np.ndarray:
        words = sentence.split()
        if not words:
            return np.zeros(self.dim)
        return np.mean([self.word_vector(w) for w in words], axis=0)


class PretrainedEmbedder:
    """sentence-transformers encoder (384-dim MiniLM by default); needs the weights locally or network."""

    def __init__(self, model_name: str = "sentence-transformers/all-MiniLM-L6-v2"):
        from sentence_transformers import SentenceTransformer

        self.model = SentenceTransformer(model_name)
        self.dim = self.model.get_sentence_embedding_dimension()

    def embed(self, sentence: str) -> np.ndarray:
        return np.asarray(self.model.encode(sentence), dtype=np.float64)


def make_embedder(kind: str = "hash") -> SentenceEmbedder:
    if kind == "hash":
        return HashEmbedder()
    if kind == "pretrained":
        return PretrainedEmbedder()
    raise MetricError(f"unknown embedder {kind!r}")


def cosine_similarity(mu: np.ndarray, mu_hat: np.ndarray) -> float:
    mu, mu_hat = np.asarray(mu, float), np.asarray(mu_hat, float)
    na, nb = np.linalg.norm(mu), np.linalg.norm(mu_hat)
    if na == 0 or nb == 0:
        raise MetricError("cosine similarity of a zero vector is undefined")
    return float(np.clip(mu @ mu_hat / (na * nb), 0.0, 1.0))


def text_similarity(text: Sequence[str], decoded: Sequence[str], embedder: SentenceEmbedder) -> float:
    """Mean per-sentence cosine similarity; missing or empty decodes score 0."""
    if not text:
        raise MetricError("empty reference text")
    total = 0.0
    for j, ref in enumerate(text):
        hyp = decoded[j] if j < len(decoded) else ""
        if not hyp.split():
            continue
        total += cosine_similarity(embedder.embed(ref), embedder.embed(hyp))
    return total / len(text)


# -- BLEU ---------------------------------------------------------------------------

def ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def clipped_counts(reference: Sequence[str], candidate: Sequence[str], n: int) -> tuple[int, int]:
    """(clipped matches, candidate n-gram total)."""
    cand = ngrams(candidate, n)
    ref = ngrams(reference, n)
    return sum(min(c, ref[g]) for g, c in cand.items()), sum(cand.values())


def ngram_precision(reference: Sequence[str], candidate: Sequence[str], n: int) -> float:
    match, total = clipped_counts(reference, candidate, n)
    return match / total if total else 0.0


def brevity_term(ref_len: int, cand_len: int, orientation: str = "conventional") -> float:
    """Log-domain brevity term.

    ``conventional``: min(1 - len(S)/len(S^), 0), penalizing short candidates.
    ``printed``: min(1 - len(S^)/len(S), 0), penalizing long candidates.
    """
    if orientation == "conventional":
        return min(1.0 - ref_len / cand_len, 0.0)
    if orientation == "printed":
        return min(1.0 - cand_len / ref_len, 0.0)
    raise MetricError(f"unknown brevity orientation {orientation!r}")


def sentence_bleu(reference: str | Sequence[str], candidate: str | Sequence[str],
                  weights: Sequence[float] = (0.25, 0.25, 0.25, 0.25),
                  orientation: str = "conventional") -> float:
    ref = reference.split() if isinstance(reference, str) else list(reference)
    cand = candidate.split() if isinstance(candidate, str) else list(candidate)
    if not ref:
        raise MetricError("empty reference sentence")
    if not cand:
        return 0.0
    log_sum = 0.0
    for n, w in enumerate(weights, 1):
        if w == 0:
            continue
        match, total = clipped_counts(ref, cand, n)
        if total == 0:
            # candidate shorter than n: the order is uninformative, brevity covers length
            continue
        # smoothing for empty matches: 1 / (2 * candidate n-gram count)
        p = match / total if match else 1.0 / (2.0 * total)
        log_sum += w * math.log(p)
    return float(min(1.0, math.exp(brevity_term(len(ref), len(cand), orientation) + log_sum)))


def uniform_weights(n_max: int) -> tuple[float, ...]:
    return tuple([1.0 / n_max] * n_max)


def bleu(text: Sequence[str], decoded: Sequence[str], n_max: int = 4,
         weights: Sequence[float] | None = None, orientation: str = "conventional") -> float:
    """Sentence-averaged BLEU with weights uniform over orders 1..n_max by default."""
    if not text:
        raise MetricError("empty reference text")
    w = uniform_weights(n_max) if weights is None else tuple(weights)
    total = 0.0
    for j, ref in enumerate(text):
        hyp = decoded[j] if j < len(decoded) else ""
        total += sentence_bleu(ref, hyp, w, orientation)
    return total / len(text)


def bleu_by_order(text: Sequence[str], decoded: Sequence[str], n_max: int = 4,
                  orientation: str = "conventional") -> dict[int, float]:
    """BLEU-n for n = 1..n_max (uniform weights over orders 1..n)."""
    return {n: bleu(text, decoded, n, orientation=orientation) for n in range(1, n_max + 1)}


# -- reports --------------------------------------------------------------------------

@dataclass
class UserMetrics:
    similarity: float
    bleu: dict[int, float]


@dataclass
class MetricReport:
    users: dict[int, UserMetrics]
    zeta: float = 0.0
    min_similarity: float = field(init=False)
    min_bleu: dict[int, float] = field(init=False)

    def __post_init__(self):
        if not self.users:
            raise MetricError("a report needs at least one user")
        self.min_similarity = min(m.similarity for m in self.users.values())
        orders = sorted(set().union(*(m.bleu for m in self.users.values())))
        self.min_bleu = {n: min(m.bleu.get(n, 0.0) for m in self.users.values()) for n in orders}

    @property
    def passes(self) -> bool:
        return self.min_similarity >= self.zeta

    def min_users(self) -> dict[str, set[int]]:
        """Users attaining each minimum (for the CSV min flags)."""
        out = {"similarity": {u for u, m in self.users.items() if m.similarity == self.min_similarity}}
        for n, v in self.min_bleu.items():
            out[f"bleu{n}"] = {u for u, m in self.users.items() if m.bleu.get(n, 0.0) == v}
        return out


def evaluate_users(texts: Mapping[int, Sequence[str]], decoded: Mapping[int, Sequence[str]],
                   embedder: SentenceEmbedder, n_max: int = 4, zeta: float = 0.0,
                   orientation: str = "conventional") -> MetricReport:
    users = {}
    for u, ref in texts.items():
        hyp = decoded.get(u, [])
        users[u] = UserMetrics(text_similarity(ref, hyp, embedder),
                               bleu_by_order(ref, hyp, n_max, orientation))
    return MetricReport(users, zeta)


def min_across_users(report: MetricReport) -> dict[str, float]:
    out = {"similarity": report.min_similarity}
    out.update({f"bleu{n}": v for n, v in report.min_bleu.items()})
    return out
