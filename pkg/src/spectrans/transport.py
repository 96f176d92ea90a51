"""Exact discrete optimal transport between equal-size complex point clouds."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .errors import InvalidInputError, PreconditionError, SizeMismatchError


@dataclass(frozen=True)
class SpectrumCloud:
    points: np.ndarray
    labels: Optional[np.ndarray] = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=complex).ravel()
        if pts.size < 1:
            raise InvalidInputError("a spectrum cloud needs at least one point")
        object.__setattr__(self, "points", pts)
        if self.labels is not None:
            lab = np.asarray(self.labels, dtype=float).ravel()
            if lab.size != pts.size:
                raise SizeMismatchError("labels and points differ in length")
            object.__setattr__(self, "labels", lab)

    def __len__(self):
        return self.points.size


@dataclass(frozen=True)
class TransportPlan:
    assignment: np.ndarray
    total_cost: float
    w2: float

    @property
    def size(self) -> int:
        return self.assignment.size


def _as_points(x) -> np.ndarray:
    if isinstance(x, SpectrumCloud):
        return x.points
    return np.asarray(x, dtype=complex).ravel()


def squared_cost_matrix(A, B) -> np.ndarray:
    a, b = _as_points(A), _as_points(B)
    if a.size != b.size:
        raise SizeMismatchError(f"clouds have sizes {a.size} and {b.size}")
    d = a[:, None] - b[None, :]
    return d.real**2 + d.imag**2


# ------------------------------------------------------------------ Hungarian


def _hungarian(n: int, row: Callable[[int], np.ndarray], col_min_row: np.ndarray, col_min: np.ndarray):
    """Shortest-augmenting-path assignment with row/column potentials.

    ``row(i)`` returns the costs of row ``i``; ``col_min[j]`` and
    ``col_min_row[j]`` are the minimum of column ``j`` and a row attaining it.
    Returns ``(row_to_col, u, v)``.
    """
    u = np.zeros(n)
    v = col_min.astype(float).copy()
    owner = np.full(n, -1)  # column -> row
    match = np.full(n, -1)  # row -> column
    for j in range(n):
        i = col_min_row[j]
        if match[i] < 0:
            match[i] = j
            owner[j] = i

    inf = np.inf
    for start in np.nonzero(match < 0)[0]:
        minv = np.full(n, inf)
        way = np.full(n, -1)
        used = np.zeros(n, dtype=bool)
        used_rows = [start]
        i0, j0 = start, -1
        while True:
            cur = row(i0) - u[i0] - v
            free = ~used
            better = free & (cur < minv)
            minv[better] = cur[better]
            way[better] = j0
            cand = np.where(free, minv, inf)
            j1 = int(np.argmin(cand))
            delta = cand[j1]
            rows = np.asarray(used_rows)
            u[rows] += delta
            v[used] -= delta
            minv[free] -= delta
            used[j1] = True
            j0 = j1
            if owner[j0] < 0:
                break
            i0 = owner[j0]
            used_rows.append(i0)
        while j0 >= 0:
            j1 = way[j0]
            i = start if j1 < 0 else owner[j1]
            owner[j0] = i
            match[i] = j0
            j0 = j1
    return match, u, v


def _lexicographic_canonical(C, match, u, v, tol):
    """Smallest permutation (lexicographically) among optimal assignments."""
    n = C.shape[0]
    tight = (C - u[:, None] - v[None, :]) <= tol
    owner = np.empty(n, dtype=int)
    owner[match] = np.arange(n)
    for i in range(n):
        for j in np.nonzero(tight[i])[0]:
            if j >= match[i]:
                break
            r = owner[j]
            if r < i:
                continue
            # alternating path from row r to column match[i] through rows > i
            target = match[i]
            prev = {r: None}
            queue = deque([r])
            found = None
            while queue and found is None:
                x = queue.popleft()
                for jj in np.nonzero(tight[x])[0]:
                    if jj == target:
                        found = (x, jj)
                        break
                    y = owner[jj]
                    if y > i and y not in prev:
                        prev[y] = (x, jj)
                        queue.append(y)
            if found is None:
                continue
            x, jj = found
            # rotate: x takes jj, each predecessor passes its column down the chain
            while True:
                owner[jj] = x
                old = match[x]
                match[x] = jj
                step = prev[x]
                if step is None:
                    break
                x, jj = step[0], old
            match[i] = j
            owner[j] = i
            break
    return match


def min_cost_matching(C) -> TransportPlan:
    """Exact minimum-cost perfect matching of a square non-negative cost matrix.

    Ties are broken towards the lexicographically smallest permutation.
    """
    C = np.asarray(C, dtype=float)
    if C.ndim != 2 or C.shape[0] != C.shape[1]:
        raise SizeMismatchError("cost matrix must be square")
    if not np.all(np.isfinite(C)):
        raise InvalidInputError("cost matrix has non-finite entries")
    if np.any(C < 0):
        raise PreconditionError("cost matrix has negative entries")
    n = C.shape[0]
    if n == 0:
        raise InvalidInputError("empty cost matrix")
    col_min_row = np.argmin(C, axis=0)
    match, u, v = _hungarian(n, lambda i: C[i], col_min_row, C[col_min_row, np.arange(n)])
    tol = 1e-12 * max(1.0, float(C.max()))
    match = _lexicographic_canonical(C, match, u, v, tol)
    total = float(C[np.arange(n), match].sum())
    return TransportPlan(match, total, total / n)


def match_clouds(A, B):
    """Optimal assignment between two clouds without forming the full cost matrix up front."""
    a, b = _as_points(A), _as_points(B)
    if a.size != b.size:
        raise SizeMismatchError(f"clouds have sizes {a.size} and {b.size}")
    n = a.size
    tree = cKDTree(np.column_stack([a.real, a.imag]))
    dist, nearest = tree.query(np.column_stack([b.real, b.imag]))
    nearest = np.asarray(nearest)

    def row(i):
        d = a[i] - b
        return d.real**2 + d.imag**2

    col_min = np.abs(a[nearest] - b) ** 2
    match, _, _ = _hungarian(n, row, nearest, col_min)
    d = a - b[match]
    total = float(np.sum(d.real**2 + d.imag**2))
    return match, total


def wasserstein2(A, B) -> float:
    """``W^2 = min_sigma (1/N) sum_i |A_i - B_sigma(i)|^2``."""
    a = _as_points(A)
    _, total = match_clouds(a, B)
    return total / a.size


def transport_plan(A, B) -> TransportPlan:
    return min_cost_matching(squared_cost_matrix(A, B))


def metric_fd(H, mu: float, dmu: float, N: int) -> float:
    """Finite-size Wasserstein metric from ring spectra at ``mu +- dmu/2``.

    The squared cost is normalised by the number of unit cells ``N`` so the
    result is directly comparable with the band-summed thermodynamic metric.
    """
    from .model import pbc_spectrum

    if not dmu > 0:
        raise PreconditionError("dmu must be positive")
    if dmu >= 2 * np.pi / N:
        raise PreconditionError(f"dmu = {dmu} must be below the momentum spacing 2 pi / N = {2 * np.pi / N:.3g}")
    a = pbc_spectrum(H, N, mu + dmu / 2)
    b = pbc_spectrum(H, N, mu - dmu / 2)
    _, total = match_clouds(a, b)
    return total / N / dmu**2


def brute_force_matching(C) -> tuple:
    """Minimum over all permutations; only for tiny test instances."""
    from itertools import permutations

    C = np.asarray(C, dtype=float)
    n = C.shape[0]
    best, best_perm = np.inf, None
    idx = np.arange(n)
    for perm in permutations(range(n)):
        cost = C[idx, perm].sum()
        if cost < best - 1e-12 * max(1.0, abs(best) if np.isfinite(best) else 1.0):
            best, best_perm = cost, perm
    return np.array(best_perm), float(best)


def read_cloud_csv(path) -> SpectrumCloud:
    from .io import read_csv_columns

    cols = read_csv_columns(path)
    try:
        pts = np.asarray(cols["re"]) + 1j * np.asarray(cols["im"])
    except KeyError:
        raise InvalidInputError(f"{path}: cloud CSV needs columns re, im") from None
    return SpectrumCloud(pts, cols.get("k"))


def write_cloud_csv(path, cloud, labels: Optional[Sequence[float]] = None):
    from .io import write_csv

    pts = _as_points(cloud)
    if labels is None and isinstance(cloud, SpectrumCloud):
        labels = cloud.labels
    cols = {"re": pts.real, "im": pts.imag}
    if labels is not None:
        cols["k"] = np.asarray(labels, dtype=float)
    return write_csv(path, cols)
