"""Semantic successive interference cancellation at the base station.

Users are decoded strongest first. After user i is decoded, its features are
re-encoded (``r~ = AE_i(u^_i)``), re-framed, and ``h_i x~_i`` is subtracted
from the received signal. With side information enabled, each later user's
received features are fused with the cached ``r~`` of the users already
decoded through its integrated feature generator (IFG).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .channel import UserLink, order_users
from .codec import (CodecDims, DecoderStack, EncoderStack, decoded_lengths,
                    frame_features, harden, normalize_power, pack_symbols,
                    unpack_frame)
from .corpus import PAD_ID


class SicError(ValueError):
    pass


# -- generalized divisive normalization -----------------------------------------

class GDN(nn.Module):
    r"""Generalized divisive normalization over the channel axis of (B, C, T).

    y_i = x_i / sqrt(beta_i + sum_j gamma_ij x_j^2), or the product for the
    inverse layer. beta and gamma are kept non-negative through a squared
    reparametrization with a small pedestal.
    """

    _pedestal = 2.0 ** -36

    def __init__(self, channels: int, inverse: bool = False, beta_min: float = 1e-6,
                 gamma_init: float = 0.1):
        super().__init__()
        self.inverse = inverse
        self.beta_min = beta_min
        p = self._pedestal
        self.beta = nn.Parameter(torch.sqrt(torch.ones(channels) + p))
        self.gamma = nn.Parameter(torch.sqrt(gamma_init * torch.eye(channels) + p))

    def _nonneg(self, raw: torch.Tensor, minimum: float = 0.0) -> torch.Tensor:
        bound = (minimum + self._pedestal) ** 0.5
        return torch.clamp(raw, min=bound) ** 2 - self._pedestal

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        beta = self._nonneg(self.beta, self.beta_min)
        gamma = self._nonneg(self.gamma)
        norm = torch.einsum("ij,bjt->bit", gamma, x * x) + beta[None, :, None]
        return x * torch.sqrt(norm) if self.inverse else x * torch.rsqrt(norm)


class FeatureExtractor(nn.Module):
    """Two 1-D convolutions over word slots, each followed by GDN."""

    def __init__(self, c: int, kernel: int = 3):
        super().__init__()
        pad = kernel // 2
        self.net = nn.Sequential(
            nn.Conv1d(c, 2 * c, kernel, padding=pad), GDN(2 * c),
            nn.Conv1d(2 * c, c, kernel, padding=pad), GDN(c),
        )

    def forward(self, r: torch.Tensor) -> torch.Tensor:
        # (L, N, c) -> (L, c, N) for convolution over word positions
        return self.net(r.transpose(1, 2))


class IFGNet(nn.Module):
    """Integrated feature generator for the user decoded at position ``n_side``.

    ``g = ReLU(theta(pi(r^), Omega_1(r~_1), ..., Omega_k(r~_k)) + r^)``
    """

    def __init__(self, user_index: int, n_side: int, c: int, kernel: int = 3):
        super().__init__()
        if n_side < 1:
            raise SicError("an IFG needs at least one side-information input")
        self.user_index = user_index
        self.n_side = n_side
        self.pi = FeatureExtractor(c, kernel)
        self.omegas = nn.ModuleList(FeatureExtractor(c, kernel) for _ in range(n_side))
        pad = kernel // 2
        self.theta = nn.Sequential(
            nn.ConvTranspose1d(c * (n_side + 1), 2 * c, kernel, padding=pad), GDN(2 * c, inverse=True),
            nn.ConvTranspose1d(2 * c, c, kernel, padding=pad), GDN(c, inverse=True),
        )
        self.zero_fusion = False  # test hook: force theta's output to zero

    def forward(self, r_hat: torch.Tensor, side: Sequence[torch.Tensor]) -> torch.Tensor:
        if len(side) != self.n_side:
            raise SicError(f"IFG of user {self.user_index} expects {self.n_side} side inputs, got {len(side)}")
        feats = [self.pi(r_hat)] + [om(s) for om, s in zip(self.omegas, side)]
        fused = self.theta(torch.cat(feats, dim=1)).transpose(1, 2)
        if self.zero_fusion:
            fused = torch.zeros_like(fused)
        return F.relu(fused + r_hat)


@dataclass
class SideInfoCache:
    users: list[int] = field(default_factory=list)
    features: list[torch.Tensor] = field(default_factory=list)

    def append(self, user: int, r_tilde: torch.Tensor) -> None:
        if self.features and r_tilde.shape != self.features[0].shape:
            raise SicError("side-information tensors must share one shape")
        self.users.append(user)
        self.features.append(r_tilde)

    def __len__(self) -> int:
        return len(self.features)


def ifg_fuse(r_hat: torch.Tensor, cache: SideInfoCache, net: IFGNet) -> torch.Tensor:
    if len(cache) == 0:
        raise SicError("side-information mode needs at least one decoded user")
    return net(r_hat, cache.features)


# -- container ------------------------------------------------------------------

class SemanticSystem(nn.Module):
    """All per-user stacks of one MAC deployment, keyed by user index."""

    def __init__(self, vocab_size: int, dims: CodecDims, users: Sequence[int] = (), use_si: bool = False):
        super().__init__()
        self.vocab_size = vocab_size
        self.dims = dims
        self.use_si = use_si
        self.encoders = nn.ModuleDict()
        self.decoders = nn.ModuleDict()
        self.ifgs = nn.ModuleDict()
        for u in users:
            self.add_user(u)

    @property
    def users(self) -> list[int]:
        return sorted(int(k) for k in self.encoders.keys())

    def add_user(self, u: int, enc: EncoderStack | None = None, dec: DecoderStack | None = None) -> None:
        self.encoders[str(u)] = enc if enc is not None else EncoderStack(u, self.vocab_size, self.dims)
        self.decoders[str(u)] = dec if dec is not None else DecoderStack(u, self.vocab_size, self.dims)

    def enc(self, u: int) -> EncoderStack:
        return self.encoders[str(u)]

    def dec(self, u: int) -> DecoderStack:
        return self.decoders[str(u)]

    def ifg(self, u: int) -> IFGNet:
        if str(u) not in self.ifgs:
            raise SicError(f"user {u} has no IFG; call ensure_ifgs with the decode order")
        return self.ifgs[str(u)]

    def _new_ifg(self, u: int, n_side: int) -> IFGNet:
        ref = next(self.encoders.parameters(), None)
        net = IFGNet(u, n_side, self.dims.c)
        return net if ref is None else net.to(device=ref.device, dtype=ref.dtype)

    def ensure_ifgs(self, order: Sequence[int]) -> list[int]:
        """Create IFG nets matching each user's position in ``order``.

        Returns the users that received a fresh (re-initialized) IFG.
        """
        fresh = []
        for pos, u in enumerate(order):
            if pos == 0:
                continue
            key = str(u)
            if key not in self.ifgs or self.ifgs[key].n_side != pos:
                self.ifgs[key] = self._new_ifg(u, pos)
                fresh.append(u)
        return fresh

    def user_modules(self, u: int) -> list[nn.Module]:
        mods = [self.enc(u), self.dec(u)]
        if str(u) in self.ifgs:
            mods.append(self.ifg(u))
        return mods

    def checkpoint_modules(self) -> dict[tuple[int, str], nn.Module]:
        out: dict[tuple[int, str], nn.Module] = {}
        for u in self.users:
            out[(u, "encoder")] = self.enc(u)
            out[(u, "decoder")] = self.dec(u)
        for key, net in self.ifgs.items():
            out[(int(key), f"ifg{net.n_side}")] = net
        return out

    def load_states(self, states: Mapping[tuple[int, str], dict]) -> None:
        # stacks first so IFGs pick up the loaded dtype
        for (u, component), state in sorted(states.items(), key=lambda kv: kv[0][1].startswith("ifg")):
            dtype = next((t.dtype for t in state.values() if torch.is_floating_point(t)), None)
            if component == "encoder":
                if str(u) not in self.encoders:
                    self.add_user(u)
                if dtype is not None:
                    self.enc(u).to(dtype)
                self.enc(u).load_state_dict(state)
            elif component == "decoder":
                if str(u) not in self.decoders:
                    self.add_user(u)
                if dtype is not None:
                    self.dec(u).to(dtype)
                self.dec(u).load_state_dict(state)
            elif component.startswith("ifg"):
                n_side = int(component[3:])
                self.ifgs[str(u)] = self._new_ifg(u, n_side)
                if dtype is not None:
                    self.ifg(u).to(dtype)
                self.ifg(u).load_state_dict(state)
            else:
                raise SicError(f"unknown checkpoint component {component!r}")


# -- receiver operations ----------------------------------------------------------

def equalize(y: torch.Tensor, link: UserLink) -> torch.Tensor:
    if link.h == 0:
        raise SicError(f"user {link.index}: zero channel gain cannot be equalized")
    return y / link.h


def frame_dims(dims: CodecDims, m: int) -> CodecDims:
    per_sentence = dims.c * dims.N // 2
    if m % per_sentence:
        raise SicError(f"{m} symbols is not a whole number of sentences")
    return dims.with_frame(m // per_sentence)


def reencode_cancel(y: torch.Tensor, u_hat: torch.Tensor, enc: EncoderStack, link: UserLink,
                    lengths) -> tuple[torch.Tensor, torch.Tensor]:
    """Regenerate the user's symbols from decoded semantic features and cancel them.

    ``r~ = AE(u^)`` is framed with the decoded sentence lengths and scaled to
    the user's power exactly as the transmitter does. Returns ``(y - h x~, r~)``.
    """
    r_tilde = frame_features(enc.compress(u_hat), lengths)
    if not np.any(np.asarray(lengths)):
        return y, r_tilde  # every sentence decoded empty: nothing to cancel
    x_tilde, _ = normalize_power(pack_symbols(r_tilde), link.power)
    return y - link.h * x_tilde, r_tilde


def ids_to_tensor(ids: np.ndarray, device=None) -> torch.Tensor:
    """Hard ids with the first end marker and everything after it reset to padding."""
    ids = np.array(np.atleast_2d(ids), dtype=np.int64)
    cols = np.arange(ids.shape[1])[None, :]
    ids[cols >= decoded_lengths(ids)[:, None]] = PAD_ID
    return torch.as_tensor(ids, device=device)


def reencode_text(ids: np.ndarray, enc: EncoderStack, link: UserLink) -> torch.Tensor:
    """``h * ENC(T^)``: full re-encoding from hard-decoded text."""
    lengths = decoded_lengths(ids)
    _, r = enc(ids_to_tensor(ids, enc.embed.weight.device))
    if not np.any(lengths):
        return torch.zeros_like(pack_symbols(r))
    x, _ = normalize_power(pack_symbols(frame_features(r, lengths)), link.power)
    return link.h * x


Decision = Callable[[torch.Tensor], np.ndarray]


@dataclass
class SicOutput:
    order: list[int]
    scores: dict[int, torch.Tensor]
    ids: dict[int, np.ndarray]
    residual: torch.Tensor
    cache: SideInfoCache


def sic_forward(y: torch.Tensor, links: Sequence[UserLink], system: SemanticSystem,
                scales: Mapping[int, torch.Tensor], use_si: bool | None = None,
                users: Sequence[int] | None = None, decide: Decision = harden,
                cancel_last: bool = False, detach_side: bool = False,
                order: Sequence[int] | None = None) -> SicOutput:
    """Successive decoding over ``users`` (default: every link) in power order.

    ``order`` overrides the ranking (e.g. the nominal order under fading);
    ``users`` are then decoded in their relative order within it. Scores stay
    differentiable; hard decisions from ``decide`` only set the sentence
    lengths used when re-framing the cancelled signal.
    """
    use_si = system.use_si if use_si is None else use_si
    by_user = {l.index: l for l in links}
    chosen = list(users if users is not None else by_user)
    if order is None:
        order = order_users([by_user[u] for u in chosen])
    else:
        missing = set(chosen) - set(order)
        if missing:
            raise SicError(f"users {sorted(missing)} missing from the decode order")
        order = [u for u in order if u in set(chosen)]
    dims = frame_dims(system.dims, y.shape[0])
    cache = SideInfoCache()
    scores: dict[int, torch.Tensor] = {}
    ids: dict[int, np.ndarray] = {}
    for pos, u in enumerate(order):
        r_hat = unpack_frame(equalize(y, by_user[u]), dims) / scales[u]
        if use_si and pos > 0:
            r_hat = ifg_fuse(r_hat, cache, system.ifg(u))
        s, u_hat = system.dec(u)(r_hat)
        scores[u] = s
        ids[u] = decide(s)
        if pos < len(order) - 1 or cancel_last:
            y, r_tilde = reencode_cancel(y, u_hat, system.enc(u), by_user[u], decoded_lengths(ids[u]))
            cache.append(u, r_tilde.detach() if detach_side else r_tilde)
    return SicOutput(order, scores, ids, y, cache)


def semantic_sic_decode(y: torch.Tensor, links: Sequence[UserLink], system: SemanticSystem,
                        scales: Mapping[int, torch.Tensor], use_si: bool | None = None,
                        decide: Decision = harden, order: Sequence[int] | None = None) -> dict[int, np.ndarray]:
    """Hard-decoded word ids (L, N) per user index."""
    with torch.no_grad():
        return sic_forward(y, links, system, scales, use_si, decide=decide, order=order).ids


@dataclass(frozen=True)
class TwoPhasePlan:
    """Partition of old users around the weakest new user.

    ``g1`` are old users decoded before the weakest new user, ``g2`` the rest.
    """
    g1: tuple[int, ...]
    g2: tuple[int, ...]
    new_users: tuple[int, ...]

    @classmethod
    def from_links(cls, links: Sequence[UserLink], old_users: Sequence[int],
                   new_users: Sequence[int]) -> "TwoPhasePlan":
        old, new = set(old_users), set(new_users)
        if old & new:
            raise SicError("old and new users overlap")
        if not new:
            return cls((), tuple(sorted(old)), ())
        order = order_users([l for l in links if l.index in old | new])
        last_new = max(order.index(u) for u in new)
        g1 = tuple(u for u in order[:last_new] if u in old)
        g2 = tuple(u for u in order[last_new:] if u in old)
        return cls(g1, g2, tuple(u for u in order if u in new))

    @property
    def phase_one(self) -> tuple[int, ...]:
        return self.g1 + self.new_users


def two_phase_decode(y: torch.Tensor, links: Sequence[UserLink], plan: TwoPhasePlan,
                     system: SemanticSystem, scales: Mapping[int, torch.Tensor],
                     use_si: bool | None = None, decide: Decision = harden,
                     order: Sequence[int] | None = None) -> dict[int, np.ndarray]:
    """Decoding after partial retraining.

    Phase I runs SIC over G1 and the new users to recover the new users'
    texts. Phase II subtracts ``sum h ENC(T^)`` of the new users from the
    original signal and runs the unchanged old-user decoder. ``system`` holds
    the frozen old stacks next to the new ones; G1 users sit at the same decode
    positions in both phases, so their IFGs serve both.
    """
    by_user = {l.index: l for l in links}
    old_links = [by_user[u] for u in plan.g1 + plan.g2]
    with torch.no_grad():
        if not plan.new_users:
            return sic_forward(y, old_links, system, scales, use_si, decide=decide, order=order).ids
        phase1 = sic_forward(y, links, system, scales, use_si, users=plan.phase_one,
                             decide=decide, order=order)
        y2 = y
        for u in plan.new_users:
            y2 = y2 - reencode_text(phase1.ids[u], system.enc(u), by_user[u])
        out = sic_forward(y2, old_links, system, scales, use_si, decide=decide, order=order).ids
    out.update({u: phase1.ids[u] for u in plan.new_users})
    return out
