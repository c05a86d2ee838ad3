"""Difficulty curriculum: a level D that rises as the eval error falls."""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

P_UNIFORM_ALL = 0.10
P_UNIFORM_UPTO = 0.25
# remaining 0.65: d = D + e


@dataclass(frozen=True)
class CurriculumState:
    level: int = 1
    max_level: int = 1
    batches_since_increase: int = 0

    def __post_init__(self):
        if not 1 <= self.level <= self.max_level:
            raise ValueError(f"level {self.level} outside [1, {self.max_level}]")


def geometric_extra(rng: np.random.Generator) -> int:
    """e >= 0 with P(e = k) = 2^-(k+1)."""
    return int(rng.geometric(0.5)) - 1


def sample_difficulty_detail(state: CurriculumState, max_difficulty: int,
                             rng: np.random.Generator) -> tuple[int, int, int]:
    """Returns (d, branch, e); branch 0 = uniform over all, 1 = uniform up to D+e, 2 = D+e."""
    if max_difficulty < 1:
        raise ValueError("max_difficulty must be >= 1")
    u = rng.random()
    e = geometric_extra(rng)
    top = min(state.level + e, max_difficulty)
    if u < P_UNIFORM_ALL:
        return int(rng.integers(1, max_difficulty + 1)), 0, e
    if u < P_UNIFORM_ALL + P_UNIFORM_UPTO:
        return int(rng.integers(1, top + 1)), 1, e
    return top, 2, e


def sample_difficulty(state: CurriculumState, max_difficulty: int, rng: np.random.Generator) -> int:
    return sample_difficulty_detail(state, max_difficulty, rng)[0]


def update_level(state: CurriculumState, eval_error: float, threshold: float,
                 min_level_duration: int, batches_elapsed: int = 0) -> CurriculumState:
    """Raise the level by one when the error is low and enough batches passed."""
    if not 0 < threshold < 1:
        raise ValueError("threshold must lie in (0, 1)")
    count = state.batches_since_increase + batches_elapsed
    if eval_error < threshold and count >= min_level_duration and state.level < state.max_level:
        return replace(state, level=state.level + 1, batches_since_increase=0)
    return replace(state, batches_since_increase=count)
