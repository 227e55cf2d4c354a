import os
from concurrent.futures import ThreadPoolExecutor

ENV_THREADS = "HOTDIST_THREADS"


def max_workers() -> int:
    """Worker cap from HOTDIST_THREADS, falling back to the machine's core count."""
    value = os.environ.get(ENV_THREADS, "").strip()
    if value:
        try:
            n = int(value)
        except ValueError:
            raise ValueError(f"{ENV_THREADS} must be a positive integer, got {value!r}") from None
        if n < 1:
            raise ValueError(f"{ENV_THREADS} must be a positive integer, got {value!r}")
        return n
    return os.cpu_count() or 1


def pmap(fn, items, workers: int | None = None) -> list:
    """Ordered map; results come back in input order regardless of scheduling."""
    items = list(items)
    workers = max_workers() if workers is None else workers
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=min(workers, len(items))) as ex:
        return list(ex.map(fn, items))
