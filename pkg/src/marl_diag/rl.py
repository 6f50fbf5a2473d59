"""Epsilon-greedy multi-label action selection, rewards, TD targets/losses, experience replay."""
from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .numerics import Tensor

log = logging.getLogger(__name__)


@dataclass
class EpsilonSchedule:
    eps_min: float = 0.2
    total_steps: int = 1000
    mode: str = "train"

    def __post_init__(self):
        if not 0 <= self.eps_min <= 1:
            raise ConfigError("eps_min must lie in [0, 1]")
        if self.mode not in ("train", "eval"):
            raise ConfigError(f"unknown schedule mode {self.mode!r}")


def epsilon_at(step: int, sched: EpsilonSchedule) -> float:
    """Linear decay from 1 to ``eps_min`` over ``total_steps``; zero in eval mode."""
    if sched.mode == "eval":
        return 0.0
    if sched.total_steps <= 0:
        raise ConfigError("total_steps must be positive")
    if step < 0:
        raise ValueError("step must be nonnegative")
    return max(sched.eps_min, 1.0 - (1.0 - sched.eps_min) * step / sched.total_steps)


@dataclass
class RLConfig:
    gamma: float = 0.9
    tau: float = 0.5
    lambda_p: float = 1.0
    lambda_ptd: float = 1.0
    lambda_td: float = 1.0
    lambda_d: float = 1.0
    target_sync: int = 0  # steps between target syncs; 0 syncs at the start of every episode
    n_priors: int = 2

    def __post_init__(self):
        if not 0 <= self.gamma < 1:
            raise ConfigError("gamma must lie in [0, 1)")
        if not 0 < self.tau < 1:
            raise ConfigError("tau must lie in (0, 1)")
        for name in ("lambda_p", "lambda_ptd", "lambda_td", "lambda_d"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be nonnegative")


@dataclass
class ActionVector:
    a: np.ndarray  # C entries in {0, 1}
    explored: bool = False


def select_actions(probs, eps: float, tau: float, rng: np.random.Generator) -> ActionVector:
    """Thresholded multi-label choice with the top-score deletion rule for exploration.

    Exploit: every class at or above ``tau`` plus the argmax. Explore: drop the
    argmax, keep the rest at or above ``tau``, and fall back to the runner-up
    when nothing survives. Ties go to the lowest class index.
    """
    p = np.asarray(probs, dtype=np.float64)
    u = rng.random()
    a = _choose(p[None], np.array([u < eps]), tau)[0]
    explored = bool(u < eps) and p.size >= 2
    return ActionVector(a, explored)


def select_actions_batch(probs, eps: float, tau: float, rng: np.random.Generator):
    """Row-wise :func:`select_actions`; consumes one uniform draw per row in order."""
    p = np.asarray(probs, dtype=np.float64)
    explore = rng.random(p.shape[0]) < eps
    return _choose(p, explore, tau), explore & (p.shape[1] >= 2)


def _choose(p: np.ndarray, explore: np.ndarray, tau: float) -> np.ndarray:
    B, C = p.shape
    rows = np.arange(B)
    top = p.argmax(axis=1)
    a = (p >= tau).astype(np.int8)
    if C < 2:
        if explore.any():
            log.info("explore branch needs at least two classes; exploiting instead")
        explore = np.zeros_like(explore)
    # exploit rows always include the argmax
    ex = ~explore
    a[rows[ex], top[ex]] = 1
    if explore.any():
        r = rows[explore]
        a[r, top[r]] = 0
        empty = r[a[r].sum(axis=1) == 0]
        if empty.size:
            masked = p[empty].copy()
            masked[np.arange(empty.size), top[empty]] = -np.inf
            a[empty, masked.argmax(axis=1)] = 1
    return a


def compute_reward(a, labels) -> np.ndarray:
    a = np.asarray(a)
    labels = np.asarray(labels)
    if a.shape != labels.shape:
        raise ValueError(f"action shape {a.shape} does not match label shape {labels.shape}")
    return np.where(a == labels, 1.0, -1.0)


def q_values(logits: Tensor, a) -> Tensor:
    """Per-class two-action values Q(a=1)=z, Q(a=0)=-z, picked at the chosen action."""
    sign = 2.0 * np.asarray(a, dtype=logits.dtype) - 1.0
    return logits * sign


def td_target(r, next_logits, gamma: float) -> np.ndarray:
    """``r + gamma * max_a Q(s', a)``; with antisymmetric values the max is ``|z'|``.

    Returns a plain array so no gradient can flow through the target.
    """
    z = next_logits.data if isinstance(next_logits, Tensor) else np.asarray(next_logits)
    return np.asarray(r, dtype=z.dtype) + gamma * np.abs(z)


def td_loss(q: Tensor, target) -> Tensor:
    y = target.data if isinstance(target, Tensor) else np.asarray(target)
    diff = q - y.astype(q.dtype)
    return (diff * diff).mean() * 0.5


def total_loss(l_p, l_ptd, l_td, l_d, cfg: RLConfig | None = None):
    cfg = cfg or RLConfig()
    terms = []
    if cfg.lambda_p:
        terms += [x * cfg.lambda_p for x in l_p]
    if cfg.lambda_ptd:
        terms += [x * cfg.lambda_ptd for x in l_ptd]
    if cfg.lambda_td and l_td is not None:
        terms.append(l_td * cfg.lambda_td)
    if cfg.lambda_d and l_d is not None:
        terms.append(l_d * cfg.lambda_d)
    out = 0.0
    for t in terms:
        out = t + out if isinstance(t, Tensor) else out + t
    return out


@dataclass
class Transition:
    s: dict  # feature source -> detached array
    a: np.ndarray
    r: np.ndarray
    s_next: dict
    episode: int = 0
    step: int = 0


class ReplayBuffer:
    """Fixed-capacity FIFO of transitions with seeded uniform sampling."""

    def __init__(self, capacity: int, seed: int = 0):
        if capacity < 1:
            raise ConfigError("replay capacity must be positive")
        self.capacity = capacity
        self._store: deque = deque(maxlen=capacity)
        self.rng = np.random.default_rng(seed)
        self.pushes = 0

    def __len__(self) -> int:
        return len(self._store)

    def push(self, t: Transition) -> None:
        self._store.append(t)
        self.pushes += 1

    def sample(self, batch: int, rng: np.random.Generator | None = None):
        """Uniform sample without replacement, or ``None`` when fewer than ``batch`` are stored."""
        if len(self._store) < batch:
            log.info("replay holds %d transitions, need %d; skipping update", len(self._store), batch)
            return None
        rng = rng or self.rng
        idx = rng.choice(len(self._store), size=batch, replace=False)
        return [self._store[i] for i in idx]

    def items(self) -> list:
        return list(self._store)


def replay_push(buf: ReplayBuffer, t: Transition) -> None:
    buf.push(t)


def replay_sample(buf: ReplayBuffer, batch: int, rng: np.random.Generator | None = None):
    return buf.sample(batch, rng)
