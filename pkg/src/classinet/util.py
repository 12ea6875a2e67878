"""Shared plumbing: seeded sub-streams, parallel map, float formatting."""

from __future__ import annotations

import hashlib
import json
import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, Sequence, TypeVar

import numpy as np

T = TypeVar("T")
U = TypeVar("U")


def child_seed(seed: int, *tags) -> int:
    """Derive a named sub-stream seed from a root seed.

    Every random choice in the pipeline draws from a stream named by
    (root seed, tag path), so components can be re-seeded independently
    and runs are reproducible across platforms.
    """
    payload = repr((int(seed),) + tuple(tags)).encode("utf-8")
    digest = hashlib.sha256(payload).digest()
    return int.from_bytes(digest[:8], "little")


def substream(seed: int, *tags) -> np.random.Generator:
    """Generator for the named sub-stream of `seed`."""
    return np.random.default_rng(child_seed(seed, *tags))


def parallel_map(
    fn: Callable[[T], U],
    items: Sequence[T],
    workers: int | None = None,
) -> list[U]:
    """Order-preserving map, threaded when workers > 1.

    Results are collected by input index, so the output is deterministic
    regardless of scheduling. Tasks must not share mutable state.
    """
    if workers is None:
        workers = os.cpu_count() or 1
    if workers <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def format_weight(x: float) -> str:
    """Render a float with 17 significant digits; round-trips bit-exactly."""
    return "%.17g" % x


def json_dumps(obj) -> str:
    """Canonical JSON rendering (sorted keys, no whitespace churn)."""
    return json.dumps(obj, sort_keys=True, separators=(", ", ": "))


def json_render(obj) -> str:
    """JSON with floats printed at 17 significant digits.

    Round-trips float64 exactly and keeps artifact bytes stable across
    platforms. Keys are sorted.
    """
    if isinstance(obj, bool) or obj is None or isinstance(obj, (int, str)):
        return json.dumps(obj)
    if isinstance(obj, float):
        if obj != obj or obj in (float("inf"), float("-inf")):
            raise ValueError("non-finite float in artifact")
        return format_weight(obj)
    if isinstance(obj, dict):
        parts = (
            f"{json.dumps(str(k))}: {json_render(v)}"
            for k, v in sorted(obj.items(), key=lambda kv: str(kv[0]))
        )
        return "{" + ", ".join(parts) + "}"
    if isinstance(obj, (list, tuple)):
        return "[" + ", ".join(json_render(v) for v in obj) + "]"
    raise TypeError(f"cannot render {type(obj).__name__} as JSON")


def popcount(arr: np.ndarray) -> int:
    """Total number of set bits in a uint8 array."""
    return int(np.bitwise_count(arr).sum())


def popcount_rows(arr: np.ndarray) -> np.ndarray:
    """Per-row set-bit counts of a 2-D uint8 array."""
    return np.bitwise_count(arr).sum(axis=1)


def sha256_hex(data: bytes, length: int = 16) -> str:
    return hashlib.sha256(data).hexdigest()[:length]


def fingerprint_vectors(vectors: Iterable) -> str:
    """Stable content hash of a collection of sparse vectors."""
    h = hashlib.sha256()
    for v in vectors:
        h.update(np.asarray(v.indices, dtype=np.int64).tobytes())
        h.update(np.asarray(v.values, dtype=np.float64).tobytes())
    return h.hexdigest()[:16]
