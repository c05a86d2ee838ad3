import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from nram.curriculum import CurriculumState, sample_difficulty, sample_difficulty_detail, update_level


def test_trivial_level_always_one():
    rng = np.random.default_rng(0)
    assert {sample_difficulty(CurriculumState(1, 1), 1, rng) for _ in range(500)} == {1}


def test_branch_three_at_level():
    rng = np.random.default_rng(1)
    n = 200_000
    hits = 0
    for _ in range(n):
        d, branch, e = sample_difficulty_detail(CurriculumState(5, 20), 20, rng)
        hits += branch == 2 and e == 0
    assert abs(hits / n - 0.325) < 0.01


@given(st.integers(1, 30), st.integers(0, 30), st.integers(0, 2**32 - 1))
def test_samples_in_range(max_d, level_off, seed):
    level = min(1 + level_off, max_d)
    rng = np.random.default_rng(seed)
    for _ in range(20):
        assert 1 <= sample_difficulty(CurriculumState(level, max_d), max_d, rng) <= max_d


def test_update_level_rules():
    s = CurriculumState(2, 5, 100)
    assert update_level(s, 0.01, 0.05, 100).level == 3
    assert update_level(s, 0.01, 0.05, 100).batches_since_increase == 0
    assert update_level(s, 0.5, 0.05, 100).level == 2
    assert update_level(CurriculumState(2, 5, 10), 0.01, 0.05, 100, 50).batches_since_increase == 60
    assert update_level(CurriculumState(5, 5, 999), 0.0, 0.05, 1).level == 5
    with pytest.raises(ValueError):
        update_level(s, 0.0, 1.5, 1)
    with pytest.raises(ValueError):
        CurriculumState(6, 5)
