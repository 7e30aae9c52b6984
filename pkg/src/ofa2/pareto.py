"""Dominance, non-dominated sorting, crowding distance and exact 2-D hypervolume.

All routines treat every objective as minimised.  Points are ``(n, m)``
arrays (or anything ``np.asarray`` turns into one); the sorting and
hypervolume fast paths are specialised to ``m == 2``.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np


def _points(points) -> np.ndarray:
    if hasattr(points, "__len__") and len(points) and hasattr(points[0], "as_tuple"):
        points = [p.as_tuple() for p in points]
    arr = np.asarray(points, dtype=np.float64)
    if arr.size == 0:
        return arr.reshape(0, 2)
    if arr.ndim != 2:
        raise ValueError(f"points must be a 2-D array, got shape {arr.shape}")
    return arr


def dominates(a: Sequence[float], b: Sequence[float]) -> bool:
    """True iff ``a`` is no worse than ``b`` everywhere and differs somewhere."""
    if hasattr(a, "as_tuple"):
        a = a.as_tuple()
    if hasattr(b, "as_tuple"):
        b = b.as_tuple()
    le = all(x <= y for x, y in zip(a, b))
    return le and tuple(a) != tuple(b)


def _front_dominates(last: tuple[float, float], p1: float, p2: float) -> bool:
    q1, q2 = last
    return q2 < p2 or (q2 == p2 and q1 < p1)


def non_dominated_sort(points) -> list[list[int]]:
    """Partition indices into successive non-dominated fronts.

    For two objectives this is an O(n log n) sweep: points are visited in
    lexicographic order and each goes to the first front that does not
    dominate it, found by bisection.  Other dimensions fall back to the
    quadratic peeling algorithm.
    """
    pts = _points(points)
    n = pts.shape[0]
    if n == 0:
        return []
    if pts.shape[1] != 2:
        return _sort_generic(pts)
    f1 = pts[:, 0].tolist()
    f2 = pts[:, 1].tolist()
    order = np.lexsort((pts[:, 1], pts[:, 0])).tolist()
    fronts: list[list[int]] = []
    lasts: list[tuple[float, float]] = []
    for i in order:
        p1, p2 = f1[i], f2[i]
        lo, hi = 0, len(fronts)
        while lo < hi:
            mid = (lo + hi) // 2
            if _front_dominates(lasts[mid], p1, p2):
                lo = mid + 1
            else:
                hi = mid
        if lo == len(fronts):
            fronts.append([i])
            lasts.append((p1, p2))
        else:
            fronts[lo].append(i)
            lasts[lo] = (p1, p2)
    return [sorted(f) for f in fronts]


def _sort_generic(pts: np.ndarray) -> list[list[int]]:
    le = np.all(pts[:, None, :] <= pts[None, :, :], axis=2)
    lt = np.any(pts[:, None, :] < pts[None, :, :], axis=2)
    dom = le & lt  # dom[i, j]: i dominates j
    count = dom.sum(axis=0)
    remaining = np.ones(len(pts), dtype=bool)
    fronts = []
    while remaining.any():
        front = np.flatnonzero(remaining & (count == 0))
        fronts.append(front.tolist())
        remaining[front] = False
        count = count - dom[front].sum(axis=0)
    return fronts


def front_ranks(points) -> np.ndarray:
    """Rank (front index) of every point."""
    fronts = non_dominated_sort(points)
    rank = np.empty(sum(len(f) for f in fronts), dtype=np.int64)
    for k, f in enumerate(fronts):
        rank[f] = k
    return rank


def crowding_distance(points) -> np.ndarray:
    """Normalised Manhattan crowding distance of each point in one front.

    Boundary points per objective get ``inf``; an objective whose range is
    zero adds nothing to interior points.
    """
    pts = _points(points)
    n, m = pts.shape
    dist = np.zeros(n)
    if n <= 2:
        dist[:] = np.inf
        return dist
    for j in range(m):
        order = np.argsort(pts[:, j], kind="stable")
        col = pts[order, j]
        span = col[-1] - col[0]
        dist[order[0]] = np.inf
        dist[order[-1]] = np.inf
        if span > 0:
            dist[order[1:-1]] += (col[2:] - col[:-2]) / span
    return dist


def hypervolume_2d(points, ref: Sequence[float]) -> float:
    """Exact area dominated by ``points`` and bounded by ``ref``.

    Points that are not strictly better than ``ref`` in both objectives add
    nothing.  Sweep over the first objective, accumulating horizontal slabs.
    """
    pts = _points(points)
    r1, r2 = float(ref[0]), float(ref[1])
    if pts.shape[0] == 0:
        return 0.0
    inside = pts[(pts[:, 0] < r1) & (pts[:, 1] < r2)]
    if inside.shape[0] == 0:
        return 0.0
    order = np.lexsort((inside[:, 1], inside[:, 0]))
    area = 0.0
    best = r2
    for x, y in inside[order].tolist():
        if y < best:
            area += (r1 - x) * (best - y)
            best = y
    return area


def hv_contributions_2d(points, ref: Sequence[float]) -> np.ndarray:
    """Exclusive hypervolume contribution of each point of a mutually non-dominated set.

    Duplicated points contribute zero, as does anything outside the
    reference box.  The input must not contain dominated points.
    """
    pts = _points(points)
    n = pts.shape[0]
    contrib = np.zeros(n)
    r1, r2 = float(ref[0]), float(ref[1])
    inside = np.flatnonzero((pts[:, 0] < r1) & (pts[:, 1] < r2))
    if inside.size == 0:
        return contrib
    sub = pts[inside]
    order = np.lexsort((sub[:, 1], sub[:, 0]))
    xs = sub[order, 0]
    ys = sub[order, 1]
    nxt = np.append(xs[1:], r1)
    prv = np.insert(ys[:-1], 0, r2)
    contrib[inside[order]] = (nxt - xs) * (prv - ys)
    return contrib


def pareto_filter(points) -> list[int]:
    """Indices of the non-dominated points, one representative per duplicate.

    The lowest index wins among duplicates; the result is ordered by the first
    objective (then the second).
    """
    pts = _points(points)
    n = pts.shape[0]
    if n == 0:
        return []
    if pts.shape[1] != 2:
        front = _sort_generic(pts)[0]
        seen, keep = set(), []
        for i in front:
            key = tuple(pts[i])
            if key not in seen:
                seen.add(key)
                keep.append(i)
        return keep
    order = np.lexsort((np.arange(n), pts[:, 1], pts[:, 0]))
    keep = []
    best = np.inf
    for i in order.tolist():
        y = pts[i, 1]
        if y < best:
            keep.append(i)
            best = y
    return keep
