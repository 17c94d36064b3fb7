import os
import zlib
from typing import Union

import numpy as np

from margokit.exceptions import ConfigError

SeedKey = Union[int, str]

THREADS_ENV = "MARGOKIT_THREADS"
AUTO_THREADS_CAP = 4


def id_gen(scope: str, resource_name: str, index: int) -> str:
    return f"{scope}-{resource_name}-{index:04d}"


def _seed_key(key: SeedKey) -> int:
    if isinstance(key, str):
        return zlib.crc32(key.encode("utf-8"))
    if key < 0:
        raise ValueError(f"seed keys must be non-negative, got {key}")
    return int(key)


def child_seed(master_seed: int, *keys: SeedKey) -> int:
    """Derive a 64-bit seed for the named stream `keys` under `master_seed`.

    Streams are isolated: ("data", 3) and ("features", 3) never share state,
    and the mapping is stable across numpy versions (SeedSequence hashing).
    """
    if master_seed < 0:
        raise ValueError(f"master seed must be non-negative, got {master_seed}")
    seq = np.random.SeedSequence(
        entropy=master_seed, spawn_key=tuple(_seed_key(k) for k in keys)
    )
    lo, hi = seq.generate_state(2, dtype=np.uint32)
    return (int(hi) << 32) | int(lo)


def make_rng(master_seed: int, *keys: SeedKey) -> np.random.Generator:
    return np.random.default_rng(child_seed(master_seed, *keys))


def resolve_threads() -> int:
    raw = os.environ.get(THREADS_ENV, "0").strip() or "0"
    try:
        threads = int(raw)
    except ValueError:
        raise ConfigError(f"{THREADS_ENV} must be an integer, got {raw!r}")
    if threads < 0:
        raise ConfigError(f"{THREADS_ENV} must be >= 0, got {threads}")
    if threads == 0:
        return max(1, min(os.cpu_count() or 1, AUTO_THREADS_CAP))
    return threads
