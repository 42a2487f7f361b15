"""K-user uplink multiple access channel.

Received signal per channel use: ``y = sum_i h_i x_i + z`` with
``z ~ CN(0, sigma^2)``. Per-user receive SNR is ``P_i |h_i|^2 / sigma^2``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Sequence

import torch

from .codec import SymbolFrame

# Per-user receive SNR (dB) for case indices 1..7.
TWO_PLUS_ONE = {
    1: (-3.29, -5.95, -9.0),
    2: (-0.29, -2.95, -6.0),
    3: (2.71, 0.05, -3.0),
    4: (5.71, 3.05, 0.0),
    5: (8.71, 6.05, 3.0),
    6: (11.71, 9.05, 6.0),
    7: (14.71, 12.05, 9.0),
}
THREE_PLUS_TWO = {
    1: (-3.29, -5.95, -6.27, -7.49, -9.0),
    2: (-0.29, -2.95, -3.27, -4.49, -6.0),
    3: (2.71, 0.05, -0.27, -1.49, -3.0),
    4: (5.71, 3.05, 2.73, 1.51, 0.0),
    5: (8.71, 6.05, 5.73, 4.51, 3.0),
    6: (11.71, 9.05, 8.73, 7.51, 6.0),
    7: (14.71, 12.05, 11.73, 10.51, 9.0),
}
CASE_TABLES = {"two_plus_one": TWO_PLUS_ONE, "three_plus_two": THREE_PLUS_TWO}
# users already in the MAC before the new ones join
OLD_USERS = {"two_plus_one": 2, "three_plus_two": 3}

MODELS = ("awgn", "rayleigh")


class ChannelError(ValueError):
    pass


@dataclass(frozen=True)
class UserLink:
    index: int
    power: float
    h: complex = 1.0
    noise_power: float = 1.0

    def __post_init__(self):
        if not self.power > 0:
            raise ChannelError(f"user {self.index}: power must be positive")

    @property
    def received_power(self) -> float:
        return self.power * abs(self.h) ** 2

    @property
    def snr_db(self) -> float:
        return 10.0 * math.log10(self.received_power / self.noise_power)


@dataclass(frozen=True)
class ChannelConfig:
    noise_power: float = 1.0
    model: str = "awgn"
    case_index: int | None = None
    seed: int = 0

    def __post_init__(self):
        if not self.noise_power > 0:
            raise ChannelError("noise power must be positive")
        if self.model not in MODELS:
            raise ChannelError(f"unknown channel model {self.model!r}")


@dataclass
class ReceivedFrame:
    y: torch.Tensor  # complex (M,)

    @property
    def M(self) -> int:
        return self.y.shape[0]


def order_users(links: Sequence[UserLink]) -> list[int]:
    """User indices by descending P|h|^2; ties keep the lower index first."""
    if not links:
        raise ChannelError("no users to order")
    return [l.index for l in sorted(links, key=lambda l: (-l.received_power, l.index))]


def link_for_snr(index: int, snr_db: float, noise_power: float = 1.0, h: complex = 1.0) -> UserLink:
    power = noise_power * 10.0 ** (snr_db / 10.0) / abs(h) ** 2
    return UserLink(index, power, h, noise_power)


def configure_case(table: str, case_index: int, model: str = "awgn",
                   noise_power: float = 1.0) -> tuple[list[UserLink], float]:
    """Links reproducing one row of an SNR case table (noise power fixed).

    For ``rayleigh`` the returned links carry the nominal unit gain; the
    average SNR is met because E|h|^2 = 1 for the per-frame draws of
    :func:`draw_fading`.
    """
    if table not in CASE_TABLES:
        raise ChannelError(f"unknown case table {table!r}")
    if model not in MODELS:
        raise ChannelError(f"unknown channel model {model!r}")
    rows = CASE_TABLES[table]
    if case_index not in rows:
        raise ChannelError(f"case index must be in 1..{len(rows)}, got {case_index!r}")
    links = [link_for_snr(i + 1, snr, noise_power) for i, snr in enumerate(rows[case_index])]
    order = order_users(links)
    if order != [l.index for l in links]:
        raise ChannelError(f"case {case_index} of {table} violates the decode ordering")
    return links, noise_power


def draw_fading(links: Sequence[UserLink], generator: torch.Generator | None = None) -> list[UserLink]:
    """Block fading: one h ~ CN(0, 1) per user per frame."""
    g = torch.randn(len(links), 2, generator=generator, dtype=torch.float64) / math.sqrt(2.0)
    return [replace(l, h=complex(g[i, 0].item(), g[i, 1].item())) for i, l in enumerate(links)]


def complex_noise(m: int, noise_power: float, generator: torch.Generator | None = None,
                  dtype=torch.float32) -> torch.Tensor:
    std = math.sqrt(noise_power / 2.0)
    parts = torch.randn(m, 2, generator=generator, dtype=torch.float64) * std
    return torch.complex(parts[:, 0].to(dtype), parts[:, 1].to(dtype))


def transmit_mac(frames: Sequence[SymbolFrame], links: Sequence[UserLink], noise_power: float,
                 generator: torch.Generator | None = None) -> ReceivedFrame:
    """Superpose the users' frames through their gains and add complex Gaussian noise.

    ``noise_power=0`` gives the noiseless superposition. Frames and links are
    matched by user index.
    """
    if not frames:
        raise ChannelError("no frames to transmit")
    by_user = {l.index: l for l in links}
    m = frames[0].M
    y = None
    for f in frames:
        if f.M != m:
            raise ChannelError(f"frame lengths differ: {f.M} vs {m}")
        if f.user_index not in by_user:
            raise ChannelError(f"no link for user {f.user_index}")
        term = by_user[f.user_index].h * f.symbols
        y = term if y is None else y + term
    if noise_power > 0:
        y = y + complex_noise(m, noise_power, generator, y.real.dtype)
    return ReceivedFrame(y)
