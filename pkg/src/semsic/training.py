"""Losses and the training stages: single-user pretraining, joint K-user
training, and full or partial retraining after new users join.
"""
from __future__ import annotations

import copy
import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
import torch
from torch import nn

from .channel import UserLink, draw_fading, order_users, transmit_mac
from .codec import (CodecDims, encode_text,
                    parameter_digest, save_checkpoint, unpack_frame)
from .corpus import Batch, KnowledgeSet, batch_source
from .sic import SemanticSystem, SicError, TwoPhasePlan, equalize, frame_dims, sic_forward

log = logging.getLogger(__name__)

P_MIN = 1e-12
STAGES = ("pretrain_single", "joint_K", "retrain_full", "retrain_partial")


class TrainingError(RuntimeError):
    pass


class DivergenceError(TrainingError):
    pass


@dataclass(frozen=True)
class OptimizerConfig:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.98
    epsilon: float = 1e-8
    weight_decay: float = 5e-4

    def __post_init__(self):
        for name in ("learning_rate", "beta1", "beta2", "epsilon", "weight_decay"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not (self.beta1 < 1 and self.beta2 < 1):
            raise ValueError("betas must be below 1")

    def build(self, params: Iterable[nn.Parameter]) -> torch.optim.Optimizer:
        return torch.optim.Adam(params, lr=self.learning_rate, betas=(self.beta1, self.beta2),
                                eps=self.epsilon, weight_decay=self.weight_decay)


@dataclass
class TrainingPlan:
    stage: str
    epochs: int
    batch_size: int = 64
    seed: int = 0
    tau: dict[int, float] | None = None
    xi: int | None = None
    rho: int | None = None
    mask_padding: bool = True
    log_path: str | Path | None = None
    checkpoint_path: str | Path | None = None
    max_steps: int | None = None  # cap per run, for smoke tests
    log_header: str | None = None  # written as a leading "# ..." line of the CSV log

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"unknown stage {self.stage!r}")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.tau is not None and any(not t > 0 for t in self.tau.values()):
            raise ValueError("tradeoff weights must be positive")


@dataclass
class LossReport:
    per_user: dict[int, float]
    aggregate: float
    epoch: int
    step: int
    seconds: float = 0.0


@dataclass
class TrainResult:
    system: SemanticSystem
    history: list[LossReport] = field(default_factory=list)

    def epoch_means(self) -> dict[int, float]:
        sums: dict[int, list[float]] = {}
        for r in self.history:
            sums.setdefault(r.epoch, []).append(r.aggregate)
        return {e: float(np.mean(v)) for e, v in sorted(sums.items())}

    @property
    def seconds_per_iteration(self) -> float:
        if not self.history:
            return float("nan")
        return float(np.mean([r.seconds for r in self.history]))


# -- losses ---------------------------------------------------------------------

def loss_ce(scores: torch.Tensor, ids, lengths=None, mask_padding: bool = True) -> torch.Tensor:
    """Two-term binary cross-entropy (base 2) between one-hot targets and scores.

    Summed over word positions and vocabulary entries, averaged over
    sentences. Positions after each sentence's end marker are ignored when
    ``mask_padding`` is set (``lengths`` are raw word counts, so the end slot
    itself is kept). Computed in float64.
    """
    ids = torch.as_tensor(np.asarray(ids), device=scores.device)
    p = scores.to(torch.float64).clamp(P_MIN, 1.0 - P_MIN)
    log_not = torch.log2(1.0 - p)
    p_true = torch.gather(p, -1, ids.unsqueeze(-1)).squeeze(-1)
    # q log p + (1-q) log(1-p) summed over the vocabulary
    per_pos = log_not.sum(-1) + torch.log2(p_true) - torch.log2(1.0 - p_true)
    if mask_padding and lengths is not None:
        n = scores.shape[1]
        keep = torch.arange(n, device=scores.device)[None, :] <= torch.as_tensor(
            np.asarray(lengths), device=scores.device)[:, None]
        per_pos = per_pos * keep.to(per_pos.dtype)
    return -per_pos.sum(-1).mean()


def loss_joint(losses: Mapping[int, torch.Tensor] | Sequence[torch.Tensor]):
    values = list(losses.values()) if isinstance(losses, Mapping) else list(losses)
    if not values:
        raise TrainingError("joint loss needs at least one user")
    return sum(values[1:], values[0])


def loss_fp(losses: Mapping[int, torch.Tensor], xi: int, rho: int,
            tau: Mapping[int, float] | None = None):
    """Tradeoff-weighted sum over user indices xi..rho (inclusive)."""
    if xi > rho:
        raise TrainingError(f"empty user range {xi}..{rho}")
    total = None
    for i in range(xi, rho + 1):
        if i not in losses:
            raise TrainingError(f"no loss for user {i}")
        w = 1.0 if tau is None else tau.get(i, 1.0)
        if not w > 0:
            raise TrainingError("tradeoff weights must be positive")
        term = w * losses[i]
        total = term if total is None else total + term
    return total


# -- plumbing ---------------------------------------------------------------------

def seed_everything(seed: int) -> None:
    torch.manual_seed(seed)
    np.random.seed(seed % 2 ** 32)


def channel_generator(seed: int) -> torch.Generator:
    return torch.Generator().manual_seed(seed + 1_000_003)


class TrainingLog:
    """CSV log: step, epoch, loss per user, aggregate, seconds per iteration."""

    def __init__(self, path, users: Sequence[int], header: str | None = None):
        self.path = Path(path) if path is not None else None
        self.users = list(users)
        self._fh = None
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self._fh = open(self.path, "w", newline="")
            if header:
                self._fh.write(f"# {header}\n")
            self._w = csv.writer(self._fh)
            self._w.writerow(["step", "epoch"] + [f"loss_user{u}" for u in self.users]
                             + ["aggregate", "seconds_per_it"])

    def write(self, r: LossReport) -> None:
        if self._fh is None:
            return
        self._w.writerow([r.step, r.epoch] + [f"{r.per_user.get(u, float('nan')):.10g}" for u in self.users]
                         + [f"{r.aggregate:.10g}", f"{r.seconds:.6f}"])

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None


def aligned_batches(sets: Mapping[int, KnowledgeSet], batch_size: int, seed: int,
                    n: int) -> Iterable[dict[int, Batch]]:
    """One epoch of row-aligned batches for every user (same permutation seed)."""
    sizes = {len(ks) for ks in sets.values()}
    if len(sizes) != 1:
        raise TrainingError("knowledge sets must have equal sizes for joint batching")
    sources = {u: batch_source(ks, batch_size, seed, n) for u, ks in sets.items()}
    while True:
        try:
            yield {u: next(src) for u, src in sources.items()}
        except StopIteration:
            return


def transmit_batches(batches: Mapping[int, Batch], system: SemanticSystem, links: Sequence[UserLink],
                     noise_power: float, generator: torch.Generator, fading: bool = False):
    """Encode every user's batch, superpose through the MAC.

    Returns (y, links as seen for this frame, scales).
    """
    frames = [encode_text(b, system.enc(u), system.dims.with_frame(b.size),
                          next(l.power for l in links if l.index == u))
              for u, b in batches.items()]
    frame_links = draw_fading(links, generator) if fading else list(links)
    rx = transmit_mac(frames, frame_links, noise_power, generator)
    return rx.y, frame_links, {f.user_index: f.scale for f in frames}


def _check_finite(value: float, stage: str, step: int) -> None:
    if not math.isfinite(value):
        raise DivergenceError(f"{stage}: non-finite loss at step {step}")


def _run(stage: str, plan: TrainingPlan, system: SemanticSystem, params: list[nn.Parameter],
         sets: Mapping[int, KnowledgeSet], opt_cfg: OptimizerConfig,
         step_losses: Callable[[dict[int, Batch]], dict[int, torch.Tensor]],
         aggregate: Callable[[dict[int, torch.Tensor]], torch.Tensor],
         log_users: Sequence[int]) -> TrainResult:
    result = TrainResult(system)
    if plan.epochs == 0 or not params:
        return result
    seed_everything(plan.seed)
    optimizer = opt_cfg.build(params)
    tlog = TrainingLog(plan.log_path, log_users, plan.log_header)
    step = 0
    system.train()
    try:
        for epoch in range(1, plan.epochs + 1):
            for batches in aligned_batches(sets, plan.batch_size, plan.seed * 7919 + epoch, system.dims.N):
                t0 = time.perf_counter()
                losses = step_losses(batches)
                total = aggregate(losses)
                value = float(total.item())
                _check_finite(value, stage, step)
                optimizer.zero_grad(set_to_none=True)
                total.backward()
                optimizer.step()
                step += 1
                report = LossReport({u: float(l.item()) for u, l in losses.items()}, value, epoch, step,
                                    time.perf_counter() - t0)
                result.history.append(report)
                tlog.write(report)
                if plan.max_steps is not None and step >= plan.max_steps:
                    break
            if result.history:
                log.info("%s epoch %d: loss %.4f", stage, epoch, result.epoch_means()[epoch])
            if plan.max_steps is not None and step >= plan.max_steps:
                break
    finally:
        tlog.close()
        system.eval()
    if plan.checkpoint_path is not None:
        save_checkpoint(plan.checkpoint_path, system.checkpoint_modules(),
                        {"stage": stage, "seed": plan.seed, "steps": step})
    return result


# -- stages -------------------------------------------------------------------------

def pretrain_single_user(user: int, ks: KnowledgeSet, vocab_size: int, dims: CodecDims,
                         opt_cfg: OptimizerConfig, plan: TrainingPlan, link: UserLink,
                         noise_power: float = 1.0, fading: bool = False) -> TrainResult:
    """End-to-end training of one user's stacks through a single-user channel."""
    seed_everything(plan.seed)
    system = SemanticSystem(vocab_size, dims, [user])
    link = UserLink(user, link.power, link.h, link.noise_power)
    gen = channel_generator(plan.seed)

    def step(batches):
        b = batches[user]
        y, links, scales = transmit_batches(batches, system, [link], noise_power, gen, fading)
        fdims = frame_dims(dims, y.shape[0])
        r_hat = unpack_frame(equalize(y, links[0]), fdims) / scales[user]
        scores, _ = system.dec(user)(r_hat)
        return {user: loss_ce(scores, b.id_matrix, b.lengths, plan.mask_padding)}

    return _run("pretrain_single", plan, system, list(system.parameters()), {user: ks},
                opt_cfg, step, loss_joint, [user])


def assemble_system(vocab_size: int, dims: CodecDims, pretrained: Mapping[int, SemanticSystem] | None,
                    users: Sequence[int], use_si: bool, seed: int) -> SemanticSystem:
    """K-user system, copying each user's stacks from its pretrained system when given."""
    seed_everything(seed)
    system = SemanticSystem(vocab_size, dims, use_si=use_si)
    for u in users:
        if pretrained is not None and u in pretrained:
            src = pretrained[u]
            system.add_user(u, copy.deepcopy(src.enc(u)), copy.deepcopy(src.dec(u)))
        else:
            system.add_user(u)
    return system


def _sic_losses(system: SemanticSystem, links: Sequence[UserLink], noise_power: float,
                gen: torch.Generator, fading: bool, mask_padding: bool,
                users: Sequence[int] | None = None, order: Sequence[int] | None = None):
    def step(batches):
        y, frame_links, scales = transmit_batches(batches, system, links, noise_power, gen, fading)
        out = sic_forward(y, frame_links, system, scales, users=users, order=order)
        return {u: loss_ce(out.scores[u], batches[u].id_matrix, batches[u].lengths, mask_padding)
                for u in out.order}
    return step


def train_initial_K(sets: Mapping[int, KnowledgeSet], system: SemanticSystem, links: Sequence[UserLink],
                    opt_cfg: OptimizerConfig, plan: TrainingPlan, noise_power: float = 1.0,
                    fading: bool = False) -> TrainResult:
    """Joint training of all K users through the MAC and the SIC receiver."""
    order = order_users(links)
    seed_everything(plan.seed)  # fresh IFGs must not depend on earlier RNG use
    if system.use_si:
        system.ensure_ifgs(order)
    gen = channel_generator(plan.seed)
    step = _sic_losses(system, links, noise_power, gen, fading, plan.mask_padding, order=order)
    return _run("joint_K", plan, system, list(system.parameters()), sets, opt_cfg, step,
                loss_joint, order)


def retrain(mode: str, system: SemanticSystem, old_users: Sequence[int], new_users: Sequence[int],
            sets: Mapping[int, KnowledgeSet], links: Sequence[UserLink], opt_cfg: OptimizerConfig,
            plan: TrainingPlan, noise_power: float = 1.0, fading: bool = False) -> TrainResult:
    """Retrain after ``new_users`` join a system trained for ``old_users``.

    ``system`` must already hold stacks for the new users (typically
    pretrained). ``full`` trains everything on the weighted loss over users
    ``xi..rho`` (default all). ``partial`` freezes the old stacks and IFGs,
    runs only the first decoding phase (old users decoded before the weakest
    new user, then the new users) and weights the new users' losses.
    """
    if mode not in ("full", "partial"):
        raise ValueError(f"unknown retraining mode {mode!r}")
    all_users = sorted(set(old_users) | set(new_users))
    missing = [u for u in all_users if u not in system.users]
    if missing:
        raise TrainingError(f"system has no stacks for users {missing}")
    order = order_users([l for l in links if l.index in all_users])
    gen = channel_generator(plan.seed)
    seed_everything(plan.seed)
    if mode == "full":
        if system.use_si:
            system.ensure_ifgs(order)
        xi = plan.xi if plan.xi is not None else min(all_users)
        rho = plan.rho if plan.rho is not None else max(all_users)
        step = _sic_losses(system, links, noise_power, gen, fading, plan.mask_padding, order=order)
        return _run("retrain_full", plan, system, list(system.parameters()), sets, opt_cfg, step,
                    lambda ls: loss_fp(ls, xi, rho, plan.tau), order)

    tp = TwoPhasePlan.from_links([l for l in links if l.index in all_users], old_users, new_users)
    phase_one = [u for u in order if u in tp.phase_one]
    for u in old_users:
        for m in system.user_modules(u):
            m.requires_grad_(False)
    if system.use_si:
        for pos, u in enumerate(phase_one):
            if pos > 0 and u in tp.g1 and system.ifg(u).n_side != pos:
                raise SicError(f"old user {u} changed decode position in phase one")
        system.ensure_ifgs(phase_one)
    params = [p for u in new_users for m in system.user_modules(u) for p in m.parameters()]
    xi = plan.xi if plan.xi is not None else min(new_users)
    rho = plan.rho if plan.rho is not None else max(new_users)
    inner = _sic_losses(system, links, noise_power, gen, fading, plan.mask_padding,
                        users=phase_one, order=order)

    def step(batches):
        # frozen old stacks still run in eval mode so dropout cannot perturb them
        for u in old_users:
            for m in system.user_modules(u):
                m.eval()
        losses = inner({u: batches[u] for u in phase_one})
        return losses

    frozen = {u: parameter_digest(system.user_modules(u)) for u in old_users}
    result = _run("retrain_partial", plan, system, params, {u: sets[u] for u in phase_one}, opt_cfg,
                  step, lambda ls: loss_fp(ls, xi, rho, plan.tau), phase_one)
    for u in old_users:
        if parameter_digest(system.user_modules(u)) != frozen[u]:
            raise TrainingError(f"partial retraining modified frozen user {u}")
        for m in system.user_modules(u):
            m.requires_grad_(True)
    return result


def add_new_users(system: SemanticSystem, pretrained: Mapping[int, SemanticSystem],
                  new_users: Sequence[int]) -> SemanticSystem:
    """Copy of ``system`` extended with pretrained stacks for the new users."""
    out = copy.deepcopy(system)
    for u in new_users:
        src = pretrained.get(u)
        if src is None:
            out.add_user(u)
        else:
            out.add_user(u, copy.deepcopy(src.enc(u)), copy.deepcopy(src.dec(u)))
    return out
