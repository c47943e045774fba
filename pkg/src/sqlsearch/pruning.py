"""Step-wise confidence threshold for candidate pruning.

Early steps (t <= t0) keep anything scoring at least ``lam`` times the mean
candidate score; later steps keep only the best-scoring tie class.  Scores
are self-rewards, which are positive, so the soft threshold scales sensibly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence, TypeVar

from .errors import ConfigError, EmptyCandidateSet

T = TypeVar("T")


@dataclass
class PruningConfig:
    lam: float = 0.9
    t0: int = 4
    enabled: bool = True

    def __post_init__(self):
        # 0.0 is admitted so that a sweep can switch the soft phase off entirely
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError("pruning lambda must lie in [0, 1]")
        if self.t0 < 1:
            raise ConfigError("pruning t0 must be >= 1")

    @classmethod
    def for_depth(cls, max_depth: int, lam: float = 0.9, enabled: bool = True) -> "PruningConfig":
        return cls(lam=lam, t0=max(1, max_depth // 2), enabled=enabled)


@dataclass(frozen=True)
class StepScores:
    step: int
    scores: tuple[float, ...]


def threshold(scores: StepScores, config: PruningConfig) -> float:
    if not scores.scores:
        raise EmptyCandidateSet("no candidate scores at step %d" % scores.step)
    best = max(scores.scores)
    if scores.step > config.t0:
        return best
    soft = config.lam * math.fsum(scores.scores) / len(scores.scores)
    # lam * mean <= max holds exactly; clamp away float rounding so the best always passes
    return min(soft, best)


def filter_candidates(candidates: Sequence[T], scores: StepScores, config: PruningConfig) -> list[T]:
    """Keep candidates whose score reaches the step threshold, in input order."""
    if len(candidates) != len(scores.scores):
        raise ValueError("candidates and scores must align")
    if not candidates:
        raise EmptyCandidateSet("nothing to filter")
    if not config.enabled:
        return list(candidates)
    tau = threshold(scores, config)
    return [c for c, s in zip(candidates, scores.scores) if s >= tau]


def retention_bound(n: int, lam: float) -> float:
    """Factor k such that s* >= k * (mean of the other n-1 scores) survives the soft phase."""
    return lam * (n - 1) / (n - lam)
