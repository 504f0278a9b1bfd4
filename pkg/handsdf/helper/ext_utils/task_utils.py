from asyncio import get_running_loop
from concurrent.futures import ThreadPoolExecutor
from functools import partial
from threading import local

import numpy as np

from handsdf import cpu_no

THREAD_POOL = ThreadPoolExecutor(max_workers=cpu_no)
thread_count = cpu_no
_worker = local()


def set_thread_count(count: int):
    """
    Resizes the shared worker pool.

    Args:
        count: Number of worker threads. 0 or less falls back to the cpu count.
    """
    global THREAD_POOL, thread_count  # noqa: PLW0603
    count = count if count > 0 else cpu_no
    if count == thread_count:
        return
    THREAD_POOL.shutdown(wait=True)
    THREAD_POOL = ThreadPoolExecutor(max_workers=count)
    thread_count = count


async def sync_to_async(func, *args, wait=True, **kwargs):
    """
    Runs a synchronous function in the shared thread pool.

    Args:
        func: The synchronous function to run.
        *args: Arguments to pass to the function.
        wait: If True (default), awaits the result. Otherwise, returns the future.
        **kwargs: Keyword arguments to pass to the function.

    Returns:
        The result of the function if wait is True, otherwise the Future object.
    """
    pfunc = partial(func, *args, **kwargs)
    future = get_running_loop().run_in_executor(THREAD_POOL, pfunc)
    return await future if wait else future


def _run_chunk(func, chunk):
    _worker.active = True
    try:
        return func(chunk)
    finally:
        _worker.active = False


def parallel_map(func, points, chunk_size=8192):
    """
    Applies a row-wise function over chunks of an array on the shared pool.

    The split is the same for any worker count and chunks are concatenated
    in input order, so every row sees the same batch shapes and the result
    is bit-identical whatever the thread count. With one thread, or from
    inside a chunk, the chunks run inline.

    Args:
        func: Callable taking an (m, ...) array and returning an (m, ...) array.
        points: The array to split along its first axis.
        chunk_size: Rows per task.

    Returns:
        The concatenated outputs.
    """
    points = np.asarray(points)
    count = len(points)
    if count <= chunk_size:
        return func(points)
    chunks = [points[i : i + chunk_size] for i in range(0, count, chunk_size)]
    if thread_count == 1 or getattr(_worker, "active", False):
        results = map(func, chunks)
    else:
        results = THREAD_POOL.map(partial(_run_chunk, func), chunks)
    return np.concatenate(list(results), axis=0)
