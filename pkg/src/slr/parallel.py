"""Order-preserving parallel map; results never depend on the worker count."""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, TypeVar

from .config import ConfigError

T = TypeVar("T")
R = TypeVar("R")


def resolve_threads(threads: int | None = None) -> int:
    """Explicit value, else ``$SLR_THREADS``, else 1."""
    if threads is None:
        raw = os.environ.get("SLR_THREADS", "").strip() or "1"
        try:
            threads = int(raw)
        except ValueError:
            raise ConfigError(f"SLR_THREADS must be an integer, got {raw!r}") from None
    if int(threads) < 1:
        raise ConfigError(f"thread count must be >= 1, got {threads}")
    return int(threads)


def ordered_map(fn: Callable[[T], R], items: Iterable[T], threads: int | None = 1) -> list[R]:
    items = list(items)
    n = resolve_threads(threads)
    if n == 1 or len(items) < 2:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))
