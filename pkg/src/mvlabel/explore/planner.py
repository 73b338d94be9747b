"""Fast-marching arrival times on a grid and steepest-descent path extraction."""

from __future__ import annotations

import heapq
import math

import numpy as np

from .mapping import FREE, OccupancyGrid

SQRT2 = math.sqrt(2.0)
_AXIS = ((-1, 0), (1, 0), (0, -1), (0, 1))
_DIAG = ((-1, -1), (-1, 1), (1, -1), (1, 1))


class UnreachableError(RuntimeError):
    pass


def _solve(a: float, b: float, h: float) -> float:
    """Upwind update from two orthogonal neighbour values with spacing ``h``."""
    if a > b:
        a, b = b, a
    if math.isinf(b) or b - a >= h:
        return a + h
    return 0.5 * (a + b + math.sqrt(2 * h * h - (a - b) ** 2))


def _diag_ok(free, i, j, di, dj) -> bool:
    return free[i + di, j] and free[i, j + dj]


def fast_marching(free: np.ndarray, goal, stop_at=None) -> np.ndarray:
    """Arrival times (in cells) from ``goal`` over ``free`` cells, unit speed.

    Each trial cell takes the smaller of two first-order Godunov updates: the
    axis-aligned stencil with spacing 1 and the 45-degree stencil over the
    diagonal neighbours with spacing sqrt(2). Diagonal neighbours are only
    used when both cells they straddle are free. Blocked cells stay at
    ``inf``. Marching stops early once ``stop_at`` is accepted.
    """
    free = np.asarray(free, dtype=bool)
    H, W = free.shape
    pad = np.zeros((H + 2, W + 2), dtype=bool)
    pad[1:-1, 1:-1] = free
    T = np.full((H + 2, W + 2), np.inf)
    done = np.zeros_like(pad)
    gi, gj = goal[0] + 1, goal[1] + 1
    if not pad[gi, gj]:
        raise UnreachableError(f"goal {tuple(goal)} is not free")
    stop = None if stop_at is None else (stop_at[0] + 1, stop_at[1] + 1)
    T[gi, gj] = 0.0
    heap = [(0.0, gi, gj)]
    while heap:
        t, i, j = heapq.heappop(heap)
        if done[i, j]:
            continue
        done[i, j] = True
        if (i, j) == stop:
            break
        for di, dj in _AXIS + _DIAG:
            ni, nj = i + di, j + dj
            if not pad[ni, nj] or done[ni, nj]:
                continue
            a = min(T[ni - 1, nj] if done[ni - 1, nj] else math.inf,
                     T[ni + 1, nj] if done[ni + 1, nj] else math.inf)
            b = min(T[ni, nj - 1] if done[ni, nj - 1] else math.inf,
                    T[ni, nj + 1] if done[ni, nj + 1] else math.inf)
            best = _solve(a, b, 1.0) if min(a, b) < math.inf else math.inf
            d1 = d2 = math.inf
            for si, sj in ((-1, -1), (1, 1)):
                if done[ni + si, nj + sj] and _diag_ok(pad, ni, nj, si, sj):
                    d1 = min(d1, T[ni + si, nj + sj])
            for si, sj in ((-1, 1), (1, -1)):
                if done[ni + si, nj + sj] and _diag_ok(pad, ni, nj, si, sj):
                    d2 = min(d2, T[ni + si, nj + sj])
            if min(d1, d2) < math.inf:
                best = min(best, _solve(d1, d2, SQRT2))
            if best < T[ni, nj]:
                T[ni, nj] = best
                heapq.heappush(heap, (best, ni, nj))
    out = T[1:-1, 1:-1].copy()
    out[~done[1:-1, 1:-1]] = np.inf
    return out


def path_length(path) -> float:
    """Euclidean length of a cell path (1 per axis step, sqrt(2) per diagonal)."""
    p = np.asarray(path, dtype=float)
    if len(p) < 2:
        return 0.0
    return float(np.sum(np.linalg.norm(np.diff(p, axis=0), axis=1)))


def descend(T: np.ndarray, free: np.ndarray, start, goal) -> list[tuple[int, int]]:
    """Follow the steepest per-length decrease of ``T`` from ``start`` to ``goal``."""
    H, W = T.shape
    path = [tuple(int(x) for x in start)]
    cur = path[0]
    goal = tuple(int(x) for x in goal)
    for _ in range(H * W):
        if cur == goal:
            return path
        i, j = cur
        best, nxt = 0.0, None
        for di, dj in _AXIS + _DIAG:
            ni, nj = i + di, j + dj
            if not (0 <= ni < H and 0 <= nj < W) or not free[ni, nj]:
                continue
            if di and dj and not (free[i + di, j] and free[i, j + dj]):
                continue
            slope = (T[i, j] - T[ni, nj]) / (SQRT2 if di and dj else 1.0)
            if slope > best:
                best, nxt = slope, (ni, nj)
        if nxt is None:
            raise UnreachableError(f"descent stalled at {cur}")
        path.append(nxt)
        cur = nxt
    raise UnreachableError("descent did not terminate")


def line_of_sight(free: np.ndarray, a, b) -> bool:
    """True when the straight segment between cell centres ``a`` and ``b`` stays on free cells."""
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    n = max(int(np.ceil(np.abs(b - a).max() * 4)), 1)
    t = np.linspace(0.0, 1.0, n + 1)[:, None]
    cells = np.unique(np.floor(a + (b - a) * t + 0.5).astype(np.int64), axis=0)
    return bool(free[cells[:, 0], cells[:, 1]].all())


def simplify_path(free: np.ndarray, path) -> list[tuple[int, int]]:
    """Greedy string pulling: keep only the corners needed for line of sight."""
    free = np.asarray(free, dtype=bool)
    out = [path[0]]
    i = 0
    while i < len(path) - 1:
        j = len(path) - 1
        while j > i + 1 and not line_of_sight(free, path[i], path[j]):
            j -= 1
        out.append(path[j])
        i = j
    return out


def plan_path(grid, start, goal) -> list[tuple[int, int]]:
    """Fast-marching path between two free cells of an occupancy grid (or bool free mask).

    Unknown and occupied cells are impassable.
    """
    free = grid.cells == FREE if isinstance(grid, OccupancyGrid) else np.asarray(grid, dtype=bool)
    start = tuple(int(x) for x in start)
    goal = tuple(int(x) for x in goal)
    for name, c in (("start", start), ("goal", goal)):
        if not (0 <= c[0] < free.shape[0] and 0 <= c[1] < free.shape[1]) or not free[c]:
            raise UnreachableError(f"{name} {c} is not a free cell")
    T = fast_marching(free, goal, stop_at=start)
    if not np.isfinite(T[start]):
        raise UnreachableError(f"goal {goal} unreachable from {start}")
    return descend(T, free, start, goal)


def dijkstra(free: np.ndarray, goal) -> np.ndarray:
    """8-connected shortest distances to ``goal`` without corner cutting."""
    free = np.asarray(free, dtype=bool)
    H, W = free.shape
    D = np.full((H, W), np.inf)
    D[goal] = 0.0
    heap = [(0.0, goal[0], goal[1])]
    while heap:
        d, i, j = heapq.heappop(heap)
        if d > D[i, j]:
            continue
        for di, dj in _AXIS + _DIAG:
            ni, nj = i + di, j + dj
            if not (0 <= ni < H and 0 <= nj < W) or not free[ni, nj]:
                continue
            if di and dj and not (free[i + di, j] and free[i, j + dj]):
                continue
            nd = d + (SQRT2 if di and dj else 1.0)
            if nd < D[ni, nj]:
                D[ni, nj] = nd
                heapq.heappush(heap, (nd, ni, nj))
    return D
