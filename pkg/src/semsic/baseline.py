"""Classical chain: Huffman source code, optional repetition code, Gray 64-QAM,
and hard-decision symbol-level SIC.

Each sentence gets the same symbol budget as the semantic system
(N * c / 2 symbols), so both share the channel-use count of a frame.
"""
from __future__ import annotations

import heapq
import math
from collections import Counter
from dataclasses import dataclass
from itertools import count
from typing import Iterable, Mapping, Sequence

import numpy as np

from .channel import UserLink, order_users
from .corpus import END, normalize

BITS_PER_SYMBOL = 6


class BaselineError(ValueError):
    pass


# -- Huffman --------------------------------------------------------------------------

@dataclass
class HuffmanCodebook:
    codes: dict[str, str]

    def __post_init__(self):
        self._trie: dict = {}
        for word, code in self.codes.items():
            node = self._trie
            for bit in code[:-1]:
                node = node.setdefault(bit, {})
                if not isinstance(node, dict):
                    raise BaselineError("code is not prefix-free")
            if code[-1] in node:
                raise BaselineError("code is not prefix-free")
            node[code[-1]] = word

    @classmethod
    def from_counts(cls, counts: Mapping[str, float]) -> "HuffmanCodebook":
        """Build from symbol weights; ties resolve by symbol order for determinism."""
        items = sorted((w, s) for s, w in counts.items() if w > 0)
        if not items:
            raise BaselineError("no symbols with positive weight")
        if len(items) == 1:
            return cls({items[0][1]: "0"})
        tiebreak = count()
        heap = [(w, next(tiebreak), {s: ""}) for w, s in items]
        heapq.heapify(heap)
        while len(heap) > 1:
            w0, _, a = heapq.heappop(heap)
            w1, _, b = heapq.heappop(heap)
            merged = {s: "0" + c for s, c in a.items()}
            merged.update({s: "1" + c for s, c in b.items()})
            heapq.heappush(heap, (w0 + w1, next(tiebreak), merged))
        return cls(heap[0][2])

    @classmethod
    def from_sentences(cls, sentences: Iterable[str]) -> "HuffmanCodebook":
        """Word frequencies plus one end marker per sentence."""
        counts: Counter = Counter()
        for s in sentences:
            counts.update(normalize(s))
            counts[END] += 1
        return cls.from_counts(counts)

    def average_length(self, counts: Mapping[str, float]) -> float:
        total = sum(counts.values())
        return sum(counts[s] * len(self.codes[s]) for s in counts) / total


def entropy_bits(counts: Mapping[str, float]) -> float:
    total = sum(counts.values())
    return -sum(c / total * math.log2(c / total) for c in counts.values() if c > 0)


def huffman_encode(words: Sequence[str], codebook: HuffmanCodebook) -> np.ndarray:
    try:
        bits = "".join(codebook.codes[w] for w in words)
    except KeyError as exc:
        raise BaselineError(f"word {exc.args[0]!r} not in the Huffman codebook") from None
    return np.frombuffer(bits.encode(), dtype=np.uint8) - ord("0")


def huffman_decode(bits: Iterable[int], codebook: HuffmanCodebook) -> list[str]:
    """Walk the decode trie; an incomplete trailing codeword is dropped."""
    out = []
    node = codebook._trie
    for b in bits:
        nxt = node.get("1" if b else "0")
        if nxt is None:  # unreachable branch of an incomplete code: restart
            node = codebook._trie
            continue
        if isinstance(nxt, dict):
            node = nxt
        else:
            out.append(nxt)
            node = codebook._trie
    return out


# -- repetition code ----------------------------------------------------------------------

def repetition_encode(bits: np.ndarray, rate_inverse: int = 3) -> np.ndarray:
    return np.repeat(np.asarray(bits, dtype=np.uint8), rate_inverse)


def repetition_decode(bits: np.ndarray, rate_inverse: int = 3) -> np.ndarray:
    bits = np.asarray(bits, dtype=np.uint8)
    usable = len(bits) - len(bits) % rate_inverse
    votes = bits[:usable].reshape(-1, rate_inverse).sum(axis=1)
    return (2 * votes > rate_inverse).astype(np.uint8)


# -- 64-QAM ----------------------------------------------------------------------------------

class QamConstellation:
    """Square Gray-mapped QAM; 3 bits pick the in-phase level, 3 the quadrature level."""

    def __init__(self, order: int = 64):
        side = int(round(math.sqrt(order)))
        if side * side != order or side & (side - 1):
            raise BaselineError("order must be an even power of two")
        self.order = order
        self.bits_per_axis = int(math.log2(side))
        self.levels = np.arange(-(side - 1), side, 2, dtype=np.float64)
        # level index k carries Gray label k ^ (k >> 1)
        gray = np.arange(side) ^ (np.arange(side) >> 1)
        self.label_to_level = np.argsort(gray)
        self.level_to_label = gray
        self.norm = math.sqrt(np.mean(self.levels ** 2) * 2)

    @property
    def bits_per_symbol(self) -> int:
        return 2 * self.bits_per_axis

    @property
    def points(self) -> np.ndarray:
        """All points indexed by their 6-bit label (I bits first)."""
        labels = np.arange(self.order)
        return self.modulate(((labels[:, None] >> np.arange(self.bits_per_symbol)[::-1]) & 1).reshape(-1))

    @property
    def min_distance(self) -> float:
        return 2.0 / self.norm

    def _axis_bits_to_level(self, b: np.ndarray) -> np.ndarray:
        weights = 1 << np.arange(self.bits_per_axis)[::-1]
        return self.levels[self.label_to_level[b @ weights]]

    def modulate(self, bits) -> np.ndarray:
        bits = np.asarray(bits, dtype=np.int64)
        k = self.bits_per_symbol
        if len(bits) % k:
            bits = np.concatenate([bits, np.zeros(k - len(bits) % k, dtype=np.int64)])
        b = bits.reshape(-1, k)
        i = self._axis_bits_to_level(b[:, : self.bits_per_axis])
        q = self._axis_bits_to_level(b[:, self.bits_per_axis:])
        return (i + 1j * q) / self.norm

    def _nearest_level(self, v: np.ndarray) -> np.ndarray:
        side = len(self.levels)
        k = np.rint((v * self.norm + side - 1) / 2).astype(np.int64)
        return np.clip(k, 0, side - 1)

    def demodulate(self, symbols) -> np.ndarray:
        """Nearest-point hard decisions back to bits (separable per axis on the square grid)."""
        s = np.asarray(symbols, dtype=np.complex128)
        out = []
        for axis in (s.real, s.imag):
            labels = self.level_to_label[self._nearest_level(axis)]
            out.append((labels[:, None] >> np.arange(self.bits_per_axis)[::-1]) & 1)
        return np.concatenate(out, axis=1).reshape(-1).astype(np.uint8)

    def slice(self, symbols) -> np.ndarray:
        """Map received symbols to their nearest constellation points."""
        s = np.asarray(symbols, dtype=np.complex128)
        i = self.levels[self._nearest_level(s.real)]
        q = self.levels[self._nearest_level(s.imag)]
        return (i + 1j * q) / self.norm


QAM64 = QamConstellation(64)


def qam64_modulate(bits) -> np.ndarray:
    return QAM64.modulate(bits)


def qam64_demodulate(symbols) -> np.ndarray:
    return QAM64.demodulate(symbols)


# -- framing and SIC --------------------------------------------------------------------------

@dataclass
class ClassicalFrame:
    user_index: int
    symbols: np.ndarray
    scale: float
    power: float


@dataclass(frozen=True)
class ClassicalScheme:
    codebook: HuffmanCodebook
    symbols_per_sentence: int
    repetition: int = 3
    constellation: QamConstellation = QAM64

    @property
    def bit_budget(self) -> int:
        return self.symbols_per_sentence * self.constellation.bits_per_symbol

    def sentence_bits(self, sentence: str) -> np.ndarray:
        bits = huffman_encode(normalize(sentence) + [END], self.codebook)
        if self.repetition > 1:
            bits = repetition_encode(bits, self.repetition)
        out = np.zeros(self.bit_budget, dtype=np.uint8)
        n = min(len(bits), self.bit_budget)
        out[:n] = bits[:n]
        return out

    def decode_sentence(self, bits: np.ndarray) -> str:
        if self.repetition > 1:
            bits = repetition_decode(bits, self.repetition)
        words = []
        for w in huffman_decode(bits, self.codebook):
            if w == END:
                break
            words.append(w)
        return " ".join(words)

    def transmit(self, sentences: Sequence[str], power: float, user_index: int = 0) -> ClassicalFrame:
        bits = np.concatenate([self.sentence_bits(s) for s in sentences])
        x = self.constellation.modulate(bits)
        energy = float(np.sum(np.abs(x) ** 2))
        scale = math.sqrt(len(x) * power / energy)
        return ClassicalFrame(user_index, x * scale, scale, power)

    def receive(self, x_hat: np.ndarray, n_sentences: int) -> list[str]:
        bits = self.constellation.demodulate(x_hat).reshape(n_sentences, -1)
        return [self.decode_sentence(b) for b in bits]


def classical_sic_receive(y: np.ndarray, links: Sequence[UserLink],
                          schemes: Mapping[int, ClassicalScheme],
                          scales: Mapping[int, float], n_sentences: int) -> dict[int, list[str]]:
    """Per user in power order: equalize, slice treating the rest as noise,
    decode, then cancel the re-modulated hard decisions."""
    by_user = {l.index: l for l in links}
    y = np.asarray(y, dtype=np.complex128)
    out = {}
    for u in order_users(links):
        link = by_user[u]
        if link.h == 0:
            raise BaselineError(f"user {u}: zero channel gain")
        x_hat = y / link.h / scales[u]
        scheme = schemes[u]
        out[u] = scheme.receive(x_hat, n_sentences)
        y = y - link.h * scales[u] * scheme.constellation.slice(x_hat)
    return out
