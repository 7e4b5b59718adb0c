"""Composite steering/collision loss with a beta schedule and hard mining."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .ops import PROB_EPS


@dataclass(frozen=True)
class HardMining:
    start_fraction: float = 1.0
    end_fraction: float = 0.25
    min_k: int = 8

    def __post_init__(self):
        for name in ("start_fraction", "end_fraction"):
            value = getattr(self, name)
            if not 0 < value <= 1:
                raise ValueError(f"hard_mining.{name} must be in (0, 1], got {value}")
        if self.min_k < 1:
            raise ValueError("hard_mining.min_k must be at least 1")


@dataclass(frozen=True)
class LossConfig:
    total_epochs: int = 100
    beta_max: float = 1.0
    beta_start_epoch: int = 10
    hard_mining: HardMining = field(default_factory=HardMining)

    def __post_init__(self):
        if isinstance(self.hard_mining, dict):
            object.__setattr__(self, "hard_mining", HardMining(**self.hard_mining))
        if not self.beta_start_epoch < self.total_epochs:
            raise ValueError("beta_start_epoch must be smaller than total_epochs")
        if self.beta_max < 0:
            raise ValueError("beta_max must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)


def beta_schedule(epoch: int, cfg: LossConfig) -> float:
    """BCE weight: zero up to ``beta_start_epoch``, then logarithmic up to ``beta_max``."""
    if not 1 <= epoch <= cfg.total_epochs:
        raise ValueError(f"epoch {epoch} outside 1..{cfg.total_epochs}")
    if epoch <= cfg.beta_start_epoch:
        return 0.0
    span = cfg.total_epochs - cfg.beta_start_epoch + 1
    return cfg.beta_max * math.log(epoch - cfg.beta_start_epoch + 1) / math.log(span)


def k_schedule(n: int, epoch: int, cfg: LossConfig) -> int:
    """Number of hardest samples kept, shrinking linearly with the epoch."""
    hm = cfg.hard_mining
    fraction = hm.start_fraction + (hm.end_fraction - hm.start_fraction) * epoch / cfg.total_epochs
    return min(n, max(hm.min_k, round(n * fraction)))


def hard_mine_topk(per_sample_losses, k: int) -> np.ndarray:
    """Sorted indices of the ``k`` largest losses; ties go to the lowest index."""
    losses = np.asarray(per_sample_losses, dtype=np.float64)
    if not 1 <= k <= losses.size:
        raise ValueError(f"k={k} outside 1..{losses.size}")
    return np.sort(np.argsort(-losses, kind="stable")[:k])


@dataclass
class LossResult:
    total: float
    mse: float
    bce: float
    beta: float
    k: int
    selected_reg: np.ndarray
    selected_cls: np.ndarray
    # d(total)/d(steering) and d(total)/d(collision probability), per sample
    d_steering: np.ndarray = None
    d_prob: np.ndarray = None

    @property
    def selected_indices(self) -> tuple[np.ndarray, np.ndarray]:
        return self.selected_reg, self.selected_cls


def per_sample_errors(steering, prob, steering_target, collision_target):
    """Squared steering error and clamped binary cross-entropy, per sample."""
    s = np.asarray(steering, np.float64)
    p = np.clip(np.asarray(prob, np.float64), PROB_EPS, 1 - PROB_EPS)
    y = np.asarray(collision_target, np.float64)
    sq = (s - np.asarray(steering_target, np.float64)) ** 2
    bce = -(y * np.log(p) + (1 - y) * np.log(1 - p))
    return sq, bce


def loss(
    steering,
    prob,
    steering_target,
    collision_target,
    epoch: int,
    cfg: LossConfig,
    k: Optional[int] = None,
    selected: Optional[tuple] = None,
) -> LossResult:
    """Loss = MSE + beta(epoch) * BCE over independently hard-mined subsets.

    ``k`` overrides the schedule; ``selected`` fixes both subsets, which is
    how gradient checks keep the selection constant.
    """
    n = np.asarray(steering).size
    if n == 0:
        raise ValueError("empty batch")
    sq, bce = per_sample_errors(steering, prob, steering_target, collision_target)
    if k is None:
        k = k_schedule(n, epoch, cfg)
    k = min(max(k, 1), n)
    if selected is None:
        sel_reg, sel_cls = hard_mine_topk(sq, k), hard_mine_topk(bce, k)
    else:
        sel_reg, sel_cls = (np.asarray(s, dtype=np.intp) for s in selected)
    beta = beta_schedule(epoch, cfg)
    mse_val = float(sq[sel_reg].mean())
    bce_val = float(bce[sel_cls].mean())

    s = np.asarray(steering, np.float64)
    d_steer = np.zeros(n)
    d_steer[sel_reg] = 2.0 * (s[sel_reg] - np.asarray(steering_target, np.float64)[sel_reg]) / sel_reg.size
    raw_p = np.asarray(prob, np.float64)
    p = np.clip(raw_p, PROB_EPS, 1 - PROB_EPS)
    y = np.asarray(collision_target, np.float64)
    d_prob = np.zeros(n)
    if beta > 0:
        inside = (raw_p > PROB_EPS) & (raw_p < 1 - PROB_EPS)
        grad = (-y / p + (1 - y) / (1 - p)) / sel_cls.size * beta
        mask = np.zeros(n, dtype=bool)
        mask[sel_cls] = True
        d_prob = np.where(mask & inside, grad, 0.0)
    return LossResult(mse_val + beta * bce_val, mse_val, bce_val, beta, int(k), sel_reg, sel_cls, d_steer, d_prob)
