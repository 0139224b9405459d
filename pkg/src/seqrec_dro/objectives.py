"""Batch-loss aggregators: ERM, class-balanced, IPW, CVaR and group DRO.

Every aggregator maps per-user (or per-position) losses to a scalar whose
gradient reaches the model through those losses. Hyperparameter state that
evolves during training (the group distribution used by GDRO/SDRO) lives in
:class:`GroupWeights` and is updated outside autograd.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Mapping, Sequence

import numpy as np
import torch

from .errors import ConfigError, NumericError
from .groups import ItemFrequencyTable
from .model import BatchLosses

KINDS = ("ERM", "CB", "CBlog", "IPW", "IPWlog", "GDRO", "SDRO", "CVaR")
GROUP_KINDS = ("IPW", "IPWlog", "GDRO", "SDRO")


@dataclass
class ObjectiveConfig:
    kind: str = "ERM"
    alpha: float | None = None
    eta: float | None = None
    beta: float = 0.1
    group_axis: str | None = None
    streaming: str = "ema"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown objective {self.kind!r}; expected one of {KINDS}")
        if self.kind == "CVaR":
            if self.alpha is None or not 0 < self.alpha <= 1:
                raise ConfigError("CVaR needs alpha in (0, 1]")
        if self.kind in ("GDRO", "SDRO"):
            if self.eta is None or not self.eta > 0:
                raise ConfigError(f"{self.kind} needs eta > 0")
        if not 0 < self.beta <= 1:
            raise ConfigError("beta must be in (0, 1]")
        if self.streaming not in ("ema", "literal"):
            raise ConfigError("streaming must be 'ema' or 'literal'")
        if self.group_axis not in (None, "pop", "seq"):
            raise ConfigError("group_axis must be 'pop' or 'seq'")

    @property
    def needs_groups(self) -> bool:
        return self.kind in GROUP_KINDS

    @property
    def label(self) -> str:
        base = self.kind
        if self.needs_groups and self.group_axis:
            base += f"_{self.group_axis}"
        return base


def _per_user(b) -> torch.Tensor:
    return b.per_user if isinstance(b, BatchLosses) else torch.as_tensor(b, dtype=torch.float64)


def erm_loss(b) -> torch.Tensor:
    return _per_user(b).mean()


# ---------------------------------------------------------------------------
# cost-sensitive weighting


@dataclass
class ItemWeightTable:
    """Dense lookup of ``w(i) = total / f(i)`` indexed by item id (0 = padding).

    Items never seen in training carry NaN so a lookup on them fails loudly.
    """

    w: np.ndarray
    w_log: np.ndarray

    @classmethod
    def from_frequencies(cls, freqs: ItemFrequencyTable, catalogue_size: int | None = None) -> "ItemWeightTable":
        size = (catalogue_size if catalogue_size is not None else max(freqs.freq, default=0)) + 1
        w = np.full(size, np.nan)
        for item, f in freqs.freq.items():
            w[item] = freqs.total / f
        w[0] = 0.0
        return cls.from_weights(w)

    @classmethod
    def from_weights(cls, w) -> "ItemWeightTable":
        w = np.asarray(w, dtype=np.float64)
        with np.errstate(divide="ignore", invalid="ignore"):
            w_log = np.log(w)
        w_log[0] = 0.0
        return cls(w, w_log)

    def lookup(self, targets: torch.Tensor, log_variant: bool) -> torch.Tensor:
        table = torch.from_numpy(self.w_log if log_variant else self.w)
        t = torch.as_tensor(targets, dtype=torch.long)
        if t.numel() and int(t.max()) >= len(table):
            raise KeyError("target item outside the weight table")
        out = table[t]
        if torch.isnan(out).any():
            missing = sorted(set(t[torch.isnan(out)].tolist()))
            raise KeyError(f"items without training frequency: {missing[:5]}")
        return out


def cb_loss(b: BatchLosses, table: ItemWeightTable, log_variant: bool = False) -> torch.Tensor:
    """Per-position losses weighted by inverse target frequency, then averaged."""
    w = table.lookup(b.targets, log_variant)
    per_user = (w * b.per_position).sum(dim=1) / b.normalizer
    return per_user.mean()


@dataclass
class GroupWeightTable:
    """``w(g) = sum_g f(g) / f(g)`` from group user counts ``f``."""

    f: dict[str, int]
    w: dict[str, float] = field(init=False)
    w_log: dict[str, float] = field(init=False)

    def __post_init__(self):
        self.f = {g: n for g, n in self.f.items() if n > 0}
        total = sum(self.f.values())
        self.w = {g: total / n for g, n in self.f.items()}
        self.w_log = {g: math.log(v) for g, v in self.w.items()}

    @classmethod
    def from_labels(cls, labels: Mapping[int, str]) -> "GroupWeightTable":
        counts: dict[str, int] = {}
        for g in labels.values():
            counts[g] = counts.get(g, 0) + 1
        return cls(counts)


def _labels_for(users: Sequence, labels: Mapping) -> list:
    try:
        return [labels[u] for u in users]
    except KeyError as e:
        raise KeyError(f"user {e.args[0]} has no group label") from None


def ipw_loss(b, table: GroupWeightTable, labels: Mapping, log_variant: bool = False, users=None) -> torch.Tensor:
    users = b.user_ids if users is None else users
    weights = table.w_log if log_variant else table.w
    w = torch.tensor([weights[g] for g in _labels_for(users, labels)], dtype=torch.float64)
    return (w * _per_user(b)).mean()


# ---------------------------------------------------------------------------
# CVaR


def cvar_weights(losses, alpha: float) -> np.ndarray:
    """Maximising ``q`` for the capped-simplex CVaR problem.

    The top ``floor(alpha*B)`` losses get the cap ``1/(alpha*B)``, the next
    one gets the leftover mass. Ties go to the earlier batch position.
    """
    x = np.asarray(losses, dtype=np.float64)
    B = len(x)
    if B == 0:
        raise ValueError("empty batch")
    if not 0 < alpha <= 1:
        raise ValueError("alpha must be in (0, 1]")
    q = np.zeros(B)
    cap = 1.0 / (alpha * B)
    m = min(math.floor(alpha * B), B)
    order = np.argsort(-x, kind="stable")
    q[order[:m]] = cap
    rest = 1.0 - m * cap
    if m < B and rest > 0:
        q[order[m]] = rest
    return q


def cvar_loss(b, alpha: float) -> torch.Tensor:
    """Average loss over the worst ``alpha`` fraction of the batch.

    The weights are held constant during differentiation, which yields a
    valid subgradient of the pointwise maximum.
    """
    per_user = _per_user(b)
    if alpha >= 1:
        return erm_loss(b)
    q = torch.from_numpy(cvar_weights(per_user.detach().numpy(), alpha))
    return (q * per_user).sum()


def cvar_lp_oracle(losses, alpha) -> float:
    """Exact value of ``max q.l s.t. sum q = 1, 0 <= q <= 1/(alpha*B)``.

    Water-filling in rational arithmetic over the float inputs; used to check
    :func:`cvar_loss`.
    """
    vals = [Fraction(float(v)) for v in losses]
    cap = 1 / (Fraction(alpha) * len(vals))
    remaining = Fraction(1)
    total = Fraction(0)
    for v in sorted(vals, reverse=True):
        if remaining <= 0:
            break
        take = cap if cap < remaining else remaining
        total += take * v
        remaining -= take
    return float(total)


# ---------------------------------------------------------------------------
# group DRO state


@dataclass
class GroupWeights:
    groups: tuple[str, ...]
    omega: np.ndarray
    streaming: np.ndarray | None = None
    last_raw: np.ndarray | None = None
    t: int = 0

    @classmethod
    def uniform(cls, groups: Sequence[str]) -> "GroupWeights":
        k = len(groups)
        if k == 0:
            raise ValueError("no groups")
        nan = np.full(k, np.nan)
        return cls(tuple(groups), np.full(k, 1.0 / k), nan.copy(), nan.copy(), 0)

    def as_dict(self) -> dict[str, float]:
        return dict(zip(self.groups, self.omega.tolist()))

    def _vector(self, group_losses: Mapping[str, float]) -> np.ndarray:
        unknown = set(group_losses) - set(self.groups)
        if unknown:
            raise KeyError(f"unknown groups {sorted(unknown)}")
        v = np.array([float(group_losses.get(g, 0.0)) for g in self.groups])
        if not np.all(np.isfinite(v)):
            raise NumericError(f"non-finite group loss: {dict(group_losses)}")
        return v


def eg_update(state: GroupWeights, group_losses: Mapping[str, float], eta: float) -> GroupWeights:
    """Exponentiated gradient ascent on the group simplex.

    Groups missing from ``group_losses`` are treated as having zero loss.
    """
    if not math.isfinite(eta):
        raise NumericError("non-finite step size")
    L = state._vector(group_losses)
    shift = eta * L
    shift -= shift.max()
    if not shift.any():
        return replace(state, t=state.t + 1)
    w = state.omega * np.exp(shift)
    w /= w.sum()
    tiny = np.finfo(np.float64).tiny
    if np.any(w < tiny):
        w = np.maximum(w, tiny)
        w /= w.sum()
    return replace(state, omega=w, t=state.t + 1)


def streaming_update(
    state: GroupWeights,
    group_losses: Mapping[str, float],
    beta: float,
    eta: float,
    mode: str = "ema",
) -> GroupWeights:
    """Smooth the group losses, then take an :func:`eg_update` step on them.

    ``mode='ema'`` blends with the previous estimate; ``'literal'`` blends
    with the previous raw batch loss. The first observation of a group seeds
    the recurrence with itself. Absent groups keep their estimate and enter
    the ascent step with zero loss.
    """
    L = state._vector(group_losses)
    present = np.array([g in group_losses for g in state.groups])
    est = state.streaming.copy()
    raw = state.last_raw.copy()
    prev = est if mode == "ema" else raw
    prev = np.where(np.isnan(prev), L, prev)
    est = np.where(present, (1 - beta) * prev + beta * L, est)
    raw = np.where(present, L, raw)
    step = {g: float(v) for g, v, p in zip(state.groups, est, present) if p}
    out = eg_update(state, step, eta)
    return replace(out, streaming=est, last_raw=raw)


def group_batch_losses(b, labels: Mapping, users=None) -> dict[str, torch.Tensor]:
    """Mean per-user loss of every group present in the batch."""
    users = b.user_ids if users is None else users
    per_user = _per_user(b)
    members: dict[str, list[int]] = {}
    for pos, g in enumerate(_labels_for(users, labels)):
        members.setdefault(g, []).append(pos)
    return {g: per_user[torch.tensor(idx)].mean() for g, idx in members.items()}


def gdro_loss(state: GroupWeights, b, labels: Mapping, users=None, group_losses=None) -> torch.Tensor:
    """``sum_g omega_g * L_g`` over groups present in the batch."""
    if group_losses is None:
        group_losses = group_batch_losses(b, labels, users)
    omega = state.as_dict()
    total = None
    for g in state.groups:
        if g in group_losses:
            term = omega[g] * group_losses[g]
            total = term if total is None else total + term
    if total is None:
        return _per_user(b).sum() * 0.0
    return total


# ---------------------------------------------------------------------------


class Objective:
    """Stateful wrapper the training loop calls once per mini-batch."""

    def __init__(
        self,
        config: ObjectiveConfig,
        item_table: ItemWeightTable | None = None,
        labels: Mapping | None = None,
        groups: Sequence[str] | None = None,
    ):
        self.config = config
        self.item_table = item_table
        self.labels = labels
        if config.kind in ("CB", "CBlog") and item_table is None:
            raise ConfigError(f"{config.kind} needs an item weight table")
        if config.needs_groups:
            if labels is None:
                raise ConfigError(f"{config.kind} needs group labels")
            self.group_table = GroupWeightTable.from_labels(labels)
            groups = groups or sorted(set(labels.values()))
            self.state = GroupWeights.uniform(groups)
        else:
            self.state = None
        self.last_group_losses: dict[str, float] = {}

    def __call__(self, b: BatchLosses) -> torch.Tensor:
        c = self.config
        if c.kind == "ERM":
            return erm_loss(b)
        if c.kind in ("CB", "CBlog"):
            return cb_loss(b, self.item_table, log_variant=c.kind == "CBlog")
        if c.kind == "CVaR":
            return cvar_loss(b, c.alpha)
        if c.kind in ("IPW", "IPWlog"):
            self.last_group_losses = {g: float(v.detach()) for g, v in group_batch_losses(b, self.labels).items()}
            return ipw_loss(b, self.group_table, self.labels, log_variant=c.kind == "IPWlog")
        group_losses = group_batch_losses(b, self.labels)
        detached = {g: float(v.detach()) for g, v in group_losses.items()}
        if c.kind == "GDRO":
            self.state = eg_update(self.state, detached, c.eta)
        else:
            self.state = streaming_update(self.state, detached, c.beta, c.eta, c.streaming)
        self.last_group_losses = detached
        return gdro_loss(self.state, b, self.labels, group_losses=group_losses)
