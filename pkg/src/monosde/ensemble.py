"""Path-parallel ensembles over fixed-size chunks of stream ids.

Chunk boundaries depend only on the number of paths and the chunk size,
never on the worker count, and results are concatenated in stream order, so
serial and parallel runs produce the same arrays bit for bit.
"""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from typing import Callable, Iterable, Sequence

import numpy as np

from .integrate import solve_sde
from .paths import TimeGrid, sample_ensemble
from .zoo import model_zoo

WORKERS_ENV = "MONOSDE_WORKERS"
CHUNK_SIZE = 256


def default_workers() -> int:
    raw = os.environ.get(WORKERS_ENV, "1")
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"{WORKERS_ENV} must be an integer, got {raw!r}") from None
    return max(1, n)


def chunk_ids(n_paths: int, chunk_size: int = CHUNK_SIZE) -> list[range]:
    return [range(a, min(a + chunk_size, n_paths)) for a in range(0, n_paths, chunk_size)]


def parallel_map(fn: Callable, items: Sequence, workers: int | None = None) -> list:
    """Ordered map; ``fn`` and items must be picklable when ``workers > 1``."""
    workers = default_workers() if workers is None else int(workers)
    if workers <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ProcessPoolExecutor(max_workers=min(workers, len(items))) as pool:
        return list(pool.map(fn, items))


def _simulate_chunk(args) -> np.ndarray:
    name, params, x0, T, n_steps, seed, scheme, ids = args
    model = model_zoo(name, params)
    paths = sample_ensemble(TimeGrid(T, n_steps), model.m, seed, ids)
    return solve_sde(model, x0, paths, scheme).states


def simulate_ensemble(
    name: str,
    params: dict,
    x0,
    grid: TimeGrid,
    n_paths: int,
    seed: int,
    scheme: str = "implicit",
    workers: int | None = None,
    chunk_size: int = CHUNK_SIZE,
) -> np.ndarray:
    """States ``(n_paths, n+1, d)`` of a zoo model driven by streams ``0..n_paths-1``."""
    x0 = np.asarray(x0, dtype=float)
    tasks = [(name, dict(params), x0, grid.T, grid.n_steps, seed, scheme, list(ids)) for ids in chunk_ids(n_paths, chunk_size)]
    return np.concatenate(parallel_map(_simulate_chunk, tasks, workers), axis=0)


def per_path_map(fn: Callable, n_paths: int, workers: int | None = None, extra: Iterable = ()) -> list:
    """Apply ``fn((path_id, *extra))`` to every path id, in order."""
    extra = tuple(extra)
    return parallel_map(fn, [(i,) + extra for i in range(n_paths)], workers)
