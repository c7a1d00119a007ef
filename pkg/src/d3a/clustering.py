"""Density-based clustering used by Tier 1."""

from __future__ import annotations

from collections import deque
from typing import Callable, Sequence, TypeVar, Union

import numpy as np

NOISE = -1

P = TypeVar("P")


def _neighbourhoods(points, dist, eps):
    n = len(points)
    if isinstance(dist, np.ndarray):
        mat = dist
    else:
        mat = np.empty((n, n))
        for i in range(n):
            mat[i, i] = dist(points[i], points[i])
            for j in range(i + 1, n):
                mat[i, j] = mat[j, i] = dist(points[i], points[j])
    return [np.flatnonzero(mat[i] <= eps).tolist() for i in range(n)]


def dbscan(
    points: Sequence[P],
    dist: Union[Callable[[P, P], float], np.ndarray],
    eps: float,
    min_pts: int,
) -> list[int]:
    """Label each point with a cluster id (0, 1, ...) or ``NOISE``.

    ``dist`` is either a pairwise function or a precomputed square matrix.
    A point is core when at least ``min_pts`` points (itself included) lie
    within ``eps``. Points are visited in input order, so clusters are
    numbered by their first core point and a border point reachable from
    several clusters joins the first one discovered.
    """
    if eps <= 0:
        raise ValueError("eps must be > 0")
    if min_pts < 1:
        raise ValueError("min_pts must be >= 1")
    n = len(points)
    if n == 0:
        return []
    nbrs = _neighbourhoods(points, dist, eps)
    labels = [None] * n
    cluster = -1
    for i in range(n):
        if labels[i] is not None:
            continue
        if len(nbrs[i]) < min_pts:
            labels[i] = NOISE
            continue
        cluster += 1
        labels[i] = cluster
        queue = deque(nbrs[i])
        while queue:
            j = queue.popleft()
            if labels[j] == NOISE:
                labels[j] = cluster
            if labels[j] is not None:
                continue
            labels[j] = cluster
            if len(nbrs[j]) >= min_pts:
                queue.extend(nbrs[j])
    return labels
