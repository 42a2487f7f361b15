"""Per-user semantic encoder/decoder stacks and symbol framing.

The transmit chain for one user is

    ids -> A e + p_l -> TE -> u -> AE -> r -> zero-pad past the sentence
        -> pack pairs into complex symbols -> scale to power P

and the receive chain reverses it: unpack -> AD -> TD -> softmax(B f).
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import torch
from torch import nn

from .corpus import END_ID, Batch, Vocabulary, detokenize

CHECKPOINT_FORMAT = "semsic-checkpoint"
CHECKPOINT_VERSION = 1


class FramingError(ValueError):
    pass


@dataclass(frozen=True)
class CodecDims:
    """Widths of the semantic codec.

    ``c`` is the number of reals per word after compression (two per complex
    symbol, so ``c=36`` spends 18 channel uses per word). ``L`` is the number
    of sentences carried by one frame.
    """
    d: int = 128
    m: int | None = None
    c: int = 36
    N: int = 21
    L: int = 64
    layers: int = 4
    heads: int = 8
    ff: int | None = None
    dropout: float = 0.1
    ae_hidden: int | None = None

    def __post_init__(self):
        if self.m is None:
            object.__setattr__(self, "m", self.d)
        if self.ff is None:
            object.__setattr__(self, "ff", 4 * self.d)
        if self.ae_hidden is None:
            object.__setattr__(self, "ae_hidden", self.m)
        if self.c % 2:
            raise ValueError(f"compressed width c must be even, got {self.c}")
        if not self.c < self.m:
            raise ValueError(f"compressed width c={self.c} must be below m={self.m}")
        if self.d % self.heads:
            raise ValueError(f"d={self.d} not divisible by heads={self.heads}")

    @property
    def M(self) -> int:
        return self.c * self.N * self.L // 2

    def with_frame(self, L: int) -> "CodecDims":
        return self if L == self.L else replace(self, L=L)


def positional_encoding(position: int, d: int) -> np.ndarray:
    """PE vector for a 1-indexed word position.

    Entry z (1-indexed) is ``cos(l * 10**(-4(z-1)/d))`` for odd z and
    ``sin(l * 10**(-4z/d))`` for even z.
    """
    if d < 1:
        raise ValueError("d must be >= 1")
    z = np.arange(1, d + 1)
    odd = z % 2 == 1
    expo = np.where(odd, -4.0 * (z - 1) / d, -4.0 * z / d)
    arg = position * np.power(10.0, expo)
    return np.where(odd, np.cos(arg), np.sin(arg))


def positional_table(n: int, d: int) -> torch.Tensor:
    """(n, d) table for positions 1..n."""
    return torch.from_numpy(np.stack([positional_encoding(l, d) for l in range(1, n + 1)]))


def _mlp(n_in: int, hidden: int, n_out: int) -> nn.Sequential:
    return nn.Sequential(nn.Linear(n_in, hidden), nn.GELU(), nn.Linear(hidden, n_out))


class EncoderStack(nn.Module):
    """Embedding matrix A, Transformer encoder TE and compressor AE of one user."""

    def __init__(self, user_index: int, vocab_size: int, dims: CodecDims):
        super().__init__()
        self.user_index = user_index
        self.dims = dims
        # embedding weight is A transposed: row w is A e_w
        self.embed = nn.Embedding(vocab_size, dims.d)
        layer = nn.TransformerEncoderLayer(dims.d, dims.heads, dims.ff, dims.dropout,
                                           activation="gelu", batch_first=True)
        self.te = nn.TransformerEncoder(layer, dims.layers, enable_nested_tensor=False)
        self.to_semantic = nn.Identity() if dims.m == dims.d else nn.Linear(dims.d, dims.m)
        self.ae = _mlp(dims.m, dims.ae_hidden, dims.c)
        self.register_buffer("pe", positional_table(dims.N, dims.d), persistent=False)

    @property
    def A(self) -> torch.Tensor:
        return self.embed.weight.T

    def semantic(self, ids: torch.Tensor) -> torch.Tensor:
        """Word semantic vectors u, shape (L, N, m)."""
        f = self.embed(ids) + self.pe[: ids.shape[1]].to(self.embed.weight.dtype)
        return self.to_semantic(self.te(f))

    def compress(self, u: torch.Tensor) -> torch.Tensor:
        return self.ae(u)

    def forward(self, ids: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        u = self.semantic(ids)
        return u, self.compress(u)


class DecoderStack(nn.Module):
    """Decompressor AD, Transformer decoder TD and vocabulary projection B.

    TD runs non-autoregressively: its target stream is the decompressed
    feature sequence plus positional encoding, its memory the same features.
    """

    def __init__(self, user_index: int, vocab_size: int, dims: CodecDims):
        super().__init__()
        self.user_index = user_index
        self.dims = dims
        self.ad = _mlp(dims.c, dims.ae_hidden, dims.m)
        self.from_semantic = nn.Identity() if dims.m == dims.d else nn.Linear(dims.m, dims.d)
        layer = nn.TransformerDecoderLayer(dims.d, dims.heads, dims.ff, dims.dropout,
                                           activation="gelu", batch_first=True)
        self.td = nn.TransformerDecoder(layer, dims.layers)
        self.B = nn.Linear(dims.d, vocab_size, bias=False)
        self.register_buffer("pe", positional_table(dims.N, dims.d), persistent=False)

    def decompress(self, r_hat: torch.Tensor) -> torch.Tensor:
        return self.ad(r_hat)

    def logits(self, u_hat: torch.Tensor) -> torch.Tensor:
        mem = self.from_semantic(u_hat)
        tgt = mem + self.pe[: mem.shape[1]].to(mem.dtype)
        return self.B(self.td(tgt, mem))

    def scores(self, u_hat: torch.Tensor) -> torch.Tensor:
        return torch.softmax(self.logits(u_hat), dim=-1)

    def forward(self, r_hat: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Returns (soft scores (L, N, |W|), decompressed features u_hat)."""
        u_hat = self.decompress(r_hat)
        return self.scores(u_hat), u_hat


# -- framing ----------------------------------------------------------------

def length_mask(lengths, n: int, device=None) -> torch.Tensor:
    """(L, N) bool mask, True for the first ``lengths[j]`` word slots."""
    lengths = torch.as_tensor(np.asarray(lengths), device=device)
    return torch.arange(n, device=device)[None, :] < lengths[:, None]


def frame_features(r: torch.Tensor, lengths) -> torch.Tensor:
    """Zero the compressed vectors of every slot past the sentence's words."""
    mask = length_mask(lengths, r.shape[1], r.device)
    return r * mask[..., None].to(r.dtype)


def pack_symbols(q: torch.Tensor) -> torch.Tensor:
    """Pair consecutive reals (q[2t-1], q[2t]) into complex symbols, flattening all sentences."""
    flat = q.reshape(-1)
    if flat.numel() % 2:
        raise FramingError("cannot pack an odd number of reals")
    pairs = flat.reshape(-1, 2)
    return torch.complex(pairs[:, 0], pairs[:, 1])


def unpack_frame(x_hat: torch.Tensor, dims: CodecDims) -> torch.Tensor:
    """Inverse of :func:`pack_symbols`: complex (M,) -> real (L, N, c)."""
    if x_hat.ndim != 1 or x_hat.shape[0] != dims.M:
        raise FramingError(f"expected {dims.M} symbols, got {tuple(x_hat.shape)}")
    return torch.stack([x_hat.real, x_hat.imag], dim=-1).reshape(dims.L, dims.N, dims.c)


def normalize_power(x_check: torch.Tensor, power: float) -> tuple[torch.Tensor, torch.Tensor]:
    """Scale to average symbol energy ``power``; returns (x, scale)."""
    energy = torch.sum(x_check.real ** 2 + x_check.imag ** 2)
    if not torch.isfinite(energy) or energy.item() == 0.0:
        raise FramingError("zero-energy frame")
    scale = torch.sqrt(x_check.shape[0] * power / energy)
    return x_check * scale, scale


@dataclass
class SymbolFrame:
    user_index: int
    symbols: torch.Tensor  # complex (M,)
    power: float
    scale: torch.Tensor    # normalization factor, shared with the receiver
    lengths: np.ndarray = field(repr=False, default=None)

    @property
    def M(self) -> int:
        return self.symbols.shape[0]


def frame_from_features(r: torch.Tensor, lengths, power: float,
                        user_index: int = 0) -> SymbolFrame:
    q = frame_features(r, lengths)
    x, scale = normalize_power(pack_symbols(q), power)
    return SymbolFrame(user_index, x, power, scale, np.asarray(lengths))


def batch_tensor(batch: Batch, device=None) -> torch.Tensor:
    return torch.as_tensor(batch.id_matrix, device=device)


def encode_text(batch: Batch, enc: EncoderStack, dims: CodecDims, power: float) -> SymbolFrame:
    """Text batch -> power-normalized complex symbol frame of length c*N*L/2."""
    if batch.n != dims.N:
        raise FramingError(f"batch padded to {batch.n}, codec expects N={dims.N}")
    _, r = enc(batch_tensor(batch, enc.embed.weight.device))
    return frame_from_features(r, batch.lengths, power, enc.user_index)


def decode_features(r_hat: torch.Tensor, dec: DecoderStack) -> torch.Tensor:
    return dec(r_hat)[0]


# -- hard decisions -----------------------------------------------------------

def harden(scores) -> np.ndarray:
    """Argmax over the vocabulary axis; ties go to the lowest index."""
    s = scores.detach().cpu().numpy() if isinstance(scores, torch.Tensor) else np.asarray(scores)
    return np.argmax(s, axis=-1)


def decoded_lengths(ids: np.ndarray) -> np.ndarray:
    """Word count before the first end marker of each row (N if none)."""
    ids = np.atleast_2d(ids)
    is_end = ids == END_ID
    return np.where(is_end.any(axis=1), is_end.argmax(axis=1), ids.shape[1])


def harden_and_detokenize(scores, vocab: Vocabulary) -> list[str]:
    return [detokenize(row, vocab) for row in np.atleast_2d(harden(scores))]


def greedy_decode_with_repetition_penalty(scores, penalty: float = 1.2,
                                          exempt: Iterable[int] = (END_ID,)) -> np.ndarray:
    """Left-to-right argmax per sentence; ids already emitted in the sentence
    have their score divided by ``penalty`` (once) before the argmax.
    ``penalty=1`` reduces to :func:`harden`."""
    if penalty < 1:
        raise ValueError("penalty must be >= 1")
    s = scores.detach().cpu().numpy() if isinstance(scores, torch.Tensor) else np.asarray(scores)
    squeeze = s.ndim == 2
    if squeeze:
        s = s[None]
    if penalty == 1:
        out = np.argmax(s, axis=-1)
        return out[0] if squeeze else out
    exempt = set(int(e) for e in exempt)
    out = np.empty(s.shape[:2], dtype=np.int64)
    for j in range(s.shape[0]):
        emitted: set[int] = set()
        for t in range(s.shape[1]):
            row = s[j, t].astype(np.float64, copy=True)
            if emitted:
                idx = np.fromiter(emitted, dtype=np.int64)
                row[idx] /= penalty
            k = int(np.argmax(row))
            out[j, t] = k
            if k not in exempt:
                emitted.add(k)
    return out[0] if squeeze else out


# -- checkpoints --------------------------------------------------------------

def save_checkpoint(path, modules: Mapping[tuple[int, str], nn.Module], meta: dict | None = None) -> None:
    """Write all parameters keyed by (user_index, component)."""
    params = {}
    for (user, component), module in sorted(modules.items()):
        for name, t in module.state_dict().items():
            params[f"{user}/{component}/{name}"] = t.detach().cpu().clone()
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    torch.save({"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION,
                "meta": dict(meta or {}), "params": params}, path)


def load_checkpoint(path) -> tuple[dict[tuple[int, str], dict[str, torch.Tensor]], dict]:
    blob = torch.load(path, map_location="cpu", weights_only=True)
    if blob.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a semsic checkpoint")
    if blob.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {blob.get('version')}")
    states: dict[tuple[int, str], dict[str, torch.Tensor]] = {}
    for key, t in blob["params"].items():
        user, component, name = key.split("/", 2)
        states.setdefault((int(user), component), {})[name] = t
    return states, blob["meta"]


def parameter_digest(modules: Sequence[nn.Module]) -> str:
    """SHA-256 over raw parameter bytes, for freeze checks."""
    import hashlib
    h = hashlib.sha256()
    for module in modules:
        for name, t in sorted(module.state_dict().items()):
            h.update(name.encode())
            h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()

