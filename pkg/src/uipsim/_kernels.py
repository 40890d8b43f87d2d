"""Numeric kernels: BFS over a CSR adjacency and bulk prefix-proximity.

Two implementations of each kernel exist side by side. The jitted versions
compile with numba when it is importable; the fallback versions are pure
numpy. Selection happens once at import: set UIPSIM_PURE_NUMPY=1 to force
the numpy path even when numba is present. Both paths produce identical
arrays, which the test suite checks.
"""

from __future__ import annotations

import os

import numpy as np

PURE_NUMPY_ENV = "UIPSIM_PURE_NUMPY"

UNREACHED = np.int32(-1)


def _bfs_distances_loop(indptr, indices, n, src, dist):
    # plain frontier BFS with a preallocated ring queue; nopython-friendly
    for i in range(n):
        dist[i] = -1
    queue = np.empty(n, dtype=np.int64)
    head = 0
    tail = 0
    dist[src] = 0
    queue[tail] = src
    tail += 1
    while head < tail:
        u = queue[head]
        head += 1
        du = dist[u]
        for k in range(indptr[u], indptr[u + 1]):
            v = indices[k]
            if dist[v] < 0:
                dist[v] = du + 1
                queue[tail] = v
                tail += 1
    return dist


def _proximity_block_loop(values, other, width, out):
    # common-prefix length between each value and `other`, msb first
    for i in range(values.shape[0]):
        x = values[i] ^ other
        if x == 0:
            out[i] = width
        else:
            n = 0
            while x != 0:
                x >>= np.uint64(1)
                n += 1
            out[i] = width - n
    return out


def bfs_distances_numpy(indptr: np.ndarray, indices: np.ndarray, n: int, src: int) -> np.ndarray:
    """Level-synchronous BFS using only numpy array ops."""
    dist = np.full(n, -1, dtype=np.int32)
    dist[src] = 0
    frontier = np.array([src], dtype=np.int64)
    level = 0
    while frontier.size:
        level += 1
        starts = indptr[frontier]
        ends = indptr[frontier + 1]
        counts = ends - starts
        if counts.sum() == 0:
            break
        # gather all neighbor slices of the frontier in one flat array
        offsets = np.repeat(ends - counts.cumsum(), counts) + np.arange(counts.sum())
        neighbors = indices[offsets]
        fresh = neighbors[dist[neighbors] < 0]
        if fresh.size == 0:
            break
        fresh = np.unique(fresh)
        dist[fresh] = level
        frontier = fresh
    return dist


def proximity_block_numpy(values: np.ndarray, other: int, width: int) -> np.ndarray:
    """Vectorized common-prefix length via integer bit-length, no floats."""
    x = values.astype(np.uint64) ^ np.uint64(other)
    length = np.zeros(x.shape[0], dtype=np.int32)
    live = x.copy()
    for shift in (32, 16, 8, 4, 2, 1):
        big = live >= (np.uint64(1) << np.uint64(shift))
        length[big] += shift
        live[big] >>= np.uint64(shift)
    length[x != 0] += 1  # bit_length = position of highest set bit + 1
    out = np.full(x.shape[0], width, dtype=np.int32)
    nz = x != 0
    out[nz] = width - length[nz]
    return out


def _numba_requested() -> bool:
    return os.environ.get(PURE_NUMPY_ENV, "").strip() not in ("1", "true", "yes")


bfs_distances_numba = None
proximity_block_numba = None

if _numba_requested():
    try:
        from numba import njit

        bfs_distances_numba = njit(cache=True)(_bfs_distances_loop)
        proximity_block_numba = njit(cache=True)(_proximity_block_loop)
    except ImportError:  # pragma: no cover - depends on environment
        bfs_distances_numba = None
        proximity_block_numba = None

USING_NUMBA = bfs_distances_numba is not None


def bfs_distances(indptr: np.ndarray, indices: np.ndarray, n: int, src: int) -> np.ndarray:
    """Hop distance from ``src`` to every node; -1 where unreachable."""
    if USING_NUMBA:
        dist = np.empty(n, dtype=np.int32)
        return bfs_distances_numba(indptr, indices, n, src, dist)
    return bfs_distances_numpy(indptr, indices, n, src)


def proximity_block(values: np.ndarray, other: int, width: int) -> np.ndarray:
    """Proximity of each id value in ``values`` (uint64) to ``other``."""
    if width > 64:
        raise ValueError("block proximity kernel only supports widths <= 64")
    if USING_NUMBA:
        out = np.empty(values.shape[0], dtype=np.int32)
        return proximity_block_numba(values.astype(np.uint64), np.uint64(other), width, out)
    return proximity_block_numpy(values, other, width)
