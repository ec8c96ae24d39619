"""Timing checks: merge cost is linear in n·d, one ALS iteration grows with max(d1, d2)²."""

import time
from collections.abc import Callable

import numpy as np
import pytest

from frommerge.lora import LoraMergeConfig, merge_lora_layer
from frommerge.merge import TaskVector, from_merge

RUNS = 5


def _median_time(fn: Callable[[], float]) -> float:
    fn()
    return float(np.median([fn() for _ in range(RUNS)]))


def _time_from_merge(vectors: list[TaskVector]) -> float:
    started = time.perf_counter()
    from_merge(vectors, k=1.0)
    return time.perf_counter() - started


@pytest.mark.slow
def test_from_merge_scales_linearly(make_vectors: Callable[..., list[TaskVector]]) -> None:
    small = make_vectors(4, {f"l{i}": (256, 256) for i in range(8)}, seed=0)
    large = make_vectors(8, {f"l{i}": (256, 256) for i in range(8)}, seed=1)

    ratio = _median_time(lambda: _time_from_merge(large)) / _median_time(lambda: _time_from_merge(small))
    assert 1.5 <= ratio <= 3.0, f"doubling n*d scaled time by {ratio:.2f}"


def _als_seconds_per_iteration(d: int, rank: int) -> Callable[[], float]:
    rng = np.random.default_rng(d)
    thetas = [rng.standard_normal((d, d)) for _ in range(3)]
    cfg = LoraMergeConfig(rank_out=rank, max_iters=10, converged_tol=0.0, loss_tol=float("inf"))

    def run() -> float:
        _, _, trace = merge_lora_layer(thetas, cfg, "scaling")
        return trace.seconds / len(trace.losses)

    return run


@pytest.mark.slow
def test_als_iteration_scales_with_layer_size() -> None:
    ratio = _median_time(_als_seconds_per_iteration(512, 8)) / _median_time(_als_seconds_per_iteration(256, 8))
    assert 2.5 <= ratio <= 6.0, f"doubling max(d1, d2) scaled per-iteration time by {ratio:.2f}"
