"""Trajectory containers and the entropy primitives shared by every module.

Entropies are in nats. Aggregation over a batch is nested: tokens are
averaged within a turn, turns within a trajectory, trajectories within the
batch.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

PROB_SUM_TOL = 1e-9


class EntropyInputError(ValueError):
    """Raised for malformed probability vectors or empty aggregations."""


@dataclass(frozen=True)
class Observation:
    """What the policy sees at the start of a turn.

    ``detail`` carries the environment's internal state so that ``step`` can
    stay a pure function of ``(observation, action)``; policies must only
    read ``feature_tag`` and ``turn_index``.
    """

    state_id: int
    turn_index: int
    feature_tag: int
    task_id: int = 0
    done: bool = False
    success: bool = False
    detail: tuple = ()


def _check_probs(probs: np.ndarray) -> np.ndarray:
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 1 or p.size == 0:
        raise EntropyInputError("probability vector must be one-dimensional and non-empty")
    if not np.all(np.isfinite(p)) or np.any(p < 0.0):
        raise EntropyInputError("probability vector has negative or non-finite entries")
    if abs(p.sum() - 1.0) > PROB_SUM_TOL:
        raise EntropyInputError(f"probabilities sum to {p.sum()!r}, not 1")
    return p


def token_entropy(probs: Sequence[float] | np.ndarray) -> float:
    """Shannon entropy ``-sum p ln p`` with ``0 ln 0 = 0``."""
    p = _check_probs(probs)
    nz = p[p > 0.0]
    return float(-np.sum(nz * np.log(nz)))


@dataclass(frozen=True)
class TokenStep:
    probs: np.ndarray
    chosen: int
    logprob: float
    entropy: float

    @classmethod
    def from_probs(cls, probs: np.ndarray, chosen: int) -> "TokenStep":
        p = _check_probs(probs)
        if not 0 <= chosen < p.size:
            raise EntropyInputError(f"chosen token {chosen} outside vocabulary of size {p.size}")
        if p[chosen] <= 0.0:
            raise EntropyInputError("chosen token has zero probability")
        return cls(probs=p, chosen=int(chosen), logprob=math.log(p[chosen]), entropy=token_entropy(p))


@dataclass(frozen=True)
class Turn:
    observation: Observation
    steps: tuple[TokenStep, ...]
    decoded_action: int

    def __post_init__(self):
        if len(self.steps) == 0:
            raise EntropyInputError("a turn needs at least one token step")

    @property
    def tokens(self) -> tuple[int, ...]:
        return tuple(s.chosen for s in self.steps)


@dataclass(frozen=True)
class Trajectory:
    turns: tuple[Turn, ...]
    terminal_reward: int
    task_id: int
    rollout_seed: int

    def __post_init__(self):
        if self.terminal_reward not in (0, 1):
            raise ValueError(f"terminal reward must be 0 or 1, got {self.terminal_reward!r}")

    @property
    def horizon(self) -> int:
        return len(self.turns)

    def rewards(self) -> list[int]:
        """Per-turn rewards; only the last one can be nonzero."""
        r = [0] * len(self.turns)
        if r:
            r[-1] = self.terminal_reward
        return r


@dataclass(frozen=True)
class Batch:
    trajectories: tuple[Trajectory, ...]
    rl_step: int = 0
    metadata: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if len(self.trajectories) == 0:
            raise EntropyInputError("batch must contain at least one trajectory")

    def __len__(self) -> int:
        return len(self.trajectories)


def trajectory_mean_entropy(traj: Trajectory) -> float:
    """Mean over turns of the per-turn mean token entropy."""
    if not traj.turns:
        raise EntropyInputError("trajectory has no turns")
    per_turn = []
    for turn in traj.turns:
        if not turn.steps:
            raise EntropyInputError("turn has no token steps")
        per_turn.append(math.fsum(s.entropy for s in turn.steps) / len(turn.steps))
    return math.fsum(per_turn) / len(per_turn)


def batch_mean_entropy(batch: Batch) -> float:
    if len(batch.trajectories) == 0:
        raise EntropyInputError("empty batch")
    return math.fsum(trajectory_mean_entropy(t) for t in batch.trajectories) / len(batch.trajectories)


def flat_token_mean_entropy(batch: Batch) -> float:
    """Diagnostic only: plain mean over every token in the batch.

    Differs from :func:`batch_mean_entropy` whenever turns have unequal
    token counts; training never uses it.
    """
    values = [s.entropy for t in batch.trajectories for turn in t.turns for s in turn.steps]
    if not values:
        raise EntropyInputError("empty batch")
    return math.fsum(values) / len(values)
