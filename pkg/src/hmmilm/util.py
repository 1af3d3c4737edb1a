"""Seed derivation, worker pools, and float formatting helpers."""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor

import numpy as np

_NESTED_ENV = "HMMILM_NESTED"
_THREADS_ENV = "HMMILM_THREADS"


def worker_count() -> int:
    """Worker cap: HMMILM_THREADS if set, else the CPU count."""
    raw = os.environ.get(_THREADS_ENV)
    if raw:
        try:
            n = int(raw)
        except ValueError:
            n = 1
        return max(1, n)
    return max(1, os.cpu_count() or 1)


def seed_sequence(master_seed: int, *path: int) -> np.random.SeedSequence:
    """Deterministic child SeedSequence for a job addressed by `path`.

    Streams depend only on (master seed, path), never on scheduling, so
    results are identical for any worker count.
    """
    return np.random.SeedSequence(entropy=master_seed, spawn_key=tuple(path))


def rng_for(master_seed: int, *path: int) -> np.random.Generator:
    return np.random.default_rng(seed_sequence(master_seed, *path))


def parallel_map(fn, items, max_workers: int | None = None):
    """Map `fn` over `items`, preserving order.

    Uses a process pool when more than one worker is available and we are
    not already inside a pool worker; falls back to a sequential loop
    otherwise.  Output order (and content) never depends on the pool size.
    """
    items = list(items)
    workers = min(max_workers or worker_count(), len(items)) if items else 0
    if workers <= 1 or os.environ.get(_NESTED_ENV):
        return [fn(item) for item in items]
    env_token = os.environ.get(_NESTED_ENV)
    os.environ[_NESTED_ENV] = "1"
    try:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(fn, items))
    finally:
        if env_token is None:
            os.environ.pop(_NESTED_ENV, None)
        else:
            os.environ[_NESTED_ENV] = env_token


def fmt_float(x) -> str:
    """Format a float with 17 significant digits (exact round trip)."""
    return "%.17g" % float(x)
