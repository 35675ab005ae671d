"""Hot numeric kernels with numba-accelerated and pure-numpy implementations.

Every public function here has two implementations: an explicit-loop version
compiled with ``numba.njit`` and a vectorized numpy fallback.  The integer-
and boolean-valued kernels produce bitwise identical results on both paths;
the float-valued segment-distance kernel agrees to within last-ulp rounding
(the two paths associate the arithmetic differently).  The numpy path is
selected when numba is not importable or when the environment variable
``MFL_NO_NUMBA`` is set to ``1`` (useful for debugging and for the benchmark
in ``benchmarks/bench_kernels.py``).
"""

from __future__ import annotations

import os

import numpy as np

try:
    from numba import njit

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAS_NUMBA = False

USE_NUMBA = HAS_NUMBA and os.environ.get("MFL_NO_NUMBA", "0") != "1"


# ---------------------------------------------------------------------------
# k-nearest-neighbour indices


def knn_indices_np(query: np.ndarray, ref: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k nearest ``ref`` points per ``query`` point.

    Nearest first; exact distance ties broken by lower index. ``k`` may not
    exceed ``len(ref)``.
    """
    diff = query[:, None, :] - ref[None, :, :]
    d2 = diff[..., 0] ** 2 + diff[..., 1] ** 2 + diff[..., 2] ** 2
    order = np.argsort(d2, axis=1, kind="stable")
    return np.ascontiguousarray(order[:, :k]).astype(np.int64)


def _knn_indices_loop(query, ref, k):
    n = query.shape[0]
    m = ref.shape[0]
    out = np.empty((n, k), dtype=np.int64)
    best_d = np.empty(k, dtype=np.float64)
    for i in range(n):
        count = 0
        for j in range(m):
            dx = query[i, 0] - ref[j, 0]
            dy = query[i, 1] - ref[j, 1]
            dz = query[i, 2] - ref[j, 2]
            d2 = dx * dx + dy * dy + dz * dz
            if count < k:
                pos = count
                while pos > 0 and best_d[pos - 1] > d2:
                    best_d[pos] = best_d[pos - 1]
                    out[i, pos] = out[i, pos - 1]
                    pos -= 1
                best_d[pos] = d2
                out[i, pos] = j
                count += 1
            elif d2 < best_d[k - 1]:
                pos = k - 1
                while pos > 0 and best_d[pos - 1] > d2:
                    best_d[pos] = best_d[pos - 1]
                    out[i, pos] = out[i, pos - 1]
                    pos -= 1
                best_d[pos] = d2
                out[i, pos] = j
    return out


# ---------------------------------------------------------------------------
# ball query


def ball_query_np(
    centroids: np.ndarray, points: np.ndarray, radius: float, max_samples: int
) -> np.ndarray:
    """Up to ``max_samples`` point indices within ``radius`` of each centroid.

    Nearest first, padded by repeating the nearest hit.  A centroid with no
    point inside the radius falls back to its single globally nearest point.
    """
    diff = centroids[:, None, :] - points[None, :, :]
    d2 = diff[..., 0] ** 2 + diff[..., 1] ** 2 + diff[..., 2] ** 2
    order = np.argsort(d2, axis=1, kind="stable")
    sorted_d2 = np.take_along_axis(d2, order, axis=1)
    r2 = radius * radius
    out = np.empty((centroids.shape[0], max_samples), dtype=np.int64)
    for i in range(centroids.shape[0]):
        hits = order[i, : np.searchsorted(sorted_d2[i], r2, side="right")]
        if hits.size == 0:
            out[i, :] = order[i, 0]
        elif hits.size >= max_samples:
            out[i, :] = hits[:max_samples]
        else:
            out[i, : hits.size] = hits
            out[i, hits.size :] = hits[0]
    return out


def _ball_query_loop(centroids, points, radius, max_samples):
    n = centroids.shape[0]
    m = points.shape[0]
    r2 = radius * radius
    out = np.empty((n, max_samples), dtype=np.int64)
    cand_d = np.empty(max_samples, dtype=np.float64)
    for i in range(n):
        count = 0
        nearest_j = 0
        nearest_d = np.inf
        for j in range(m):
            dx = centroids[i, 0] - points[j, 0]
            dy = centroids[i, 1] - points[j, 1]
            dz = centroids[i, 2] - points[j, 2]
            d2 = dx * dx + dy * dy + dz * dz
            if d2 < nearest_d:
                nearest_d = d2
                nearest_j = j
            if d2 <= r2:
                if count < max_samples:
                    pos = count
                    while pos > 0 and cand_d[pos - 1] > d2:
                        cand_d[pos] = cand_d[pos - 1]
                        out[i, pos] = out[i, pos - 1]
                        pos -= 1
                    cand_d[pos] = d2
                    out[i, pos] = j
                    count += 1
                elif d2 < cand_d[max_samples - 1]:
                    pos = max_samples - 1
                    while pos > 0 and cand_d[pos - 1] > d2:
                        cand_d[pos] = cand_d[pos - 1]
                        out[i, pos] = out[i, pos - 1]
                        pos -= 1
                    cand_d[pos] = d2
                    out[i, pos] = j
        if count == 0:
            for s in range(max_samples):
                out[i, s] = nearest_j
        else:
            for s in range(count, max_samples):
                out[i, s] = out[i, 0]
    return out


# ---------------------------------------------------------------------------
# farthest point sampling


def farthest_point_sample_np(points: np.ndarray, k: int, start: int = 0) -> np.ndarray:
    """Greedy max-min selection of ``k`` indices starting at ``start``."""
    n = points.shape[0]
    sel = np.empty(k, dtype=np.int64)
    sel[0] = start
    d2 = np.sum((points - points[start]) ** 2, axis=1)
    for s in range(1, k):
        nxt = int(np.argmax(d2))
        sel[s] = nxt
        d2 = np.minimum(d2, np.sum((points - points[nxt]) ** 2, axis=1))
    return sel


def _fps_loop(points, k, start):
    n = points.shape[0]
    sel = np.empty(k, dtype=np.int64)
    d2 = np.empty(n, dtype=np.float64)
    sel[0] = start
    for j in range(n):
        dx = points[j, 0] - points[start, 0]
        dy = points[j, 1] - points[start, 1]
        dz = points[j, 2] - points[start, 2]
        d2[j] = dx * dx + dy * dy + dz * dz
    for s in range(1, k):
        best = 0
        best_d = d2[0]
        for j in range(1, n):
            if d2[j] > best_d:
                best_d = d2[j]
                best = j
        sel[s] = best
        for j in range(n):
            dx = points[j, 0] - points[best, 0]
            dy = points[j, 1] - points[best, 1]
            dz = points[j, 2] - points[best, 2]
            nd = dx * dx + dy * dy + dz * dz
            if nd < d2[j]:
                d2[j] = nd
    return sel


# ---------------------------------------------------------------------------
# point-to-segment distances


def point_segment_distances_np(
    points: np.ndarray, seg_a: np.ndarray, seg_b: np.ndarray
) -> np.ndarray:
    """Distance from each point (N,3) to each segment (B,3)//(B,3) -> (N,B).

    Zero-length segments degrade to point distance.
    """
    ab = seg_b - seg_a  # (B,3)
    ab2 = np.sum(ab**2, axis=1)  # (B,)
    ap = points[:, None, :] - seg_a[None, :, :]  # (N,B,3)
    with np.errstate(invalid="ignore", divide="ignore"):
        t = np.einsum("nbk,bk->nb", ap, ab) / ab2[None, :]
    t = np.where(ab2[None, :] > 0.0, t, 0.0)
    t = np.clip(t, 0.0, 1.0)
    closest = seg_a[None, :, :] + t[..., None] * ab[None, :, :]
    d = points[:, None, :] - closest
    return np.sqrt(d[..., 0] ** 2 + d[..., 1] ** 2 + d[..., 2] ** 2)


def _point_segment_distances_loop(points, seg_a, seg_b):
    n = points.shape[0]
    b = seg_a.shape[0]
    out = np.empty((n, b), dtype=np.float64)
    for j in range(b):
        abx = seg_b[j, 0] - seg_a[j, 0]
        aby = seg_b[j, 1] - seg_a[j, 1]
        abz = seg_b[j, 2] - seg_a[j, 2]
        ab2 = abx * abx + aby * aby + abz * abz
        for i in range(n):
            apx = points[i, 0] - seg_a[j, 0]
            apy = points[i, 1] - seg_a[j, 1]
            apz = points[i, 2] - seg_a[j, 2]
            if ab2 > 0.0:
                t = (apx * abx + apy * aby + apz * abz) / ab2
                if t < 0.0:
                    t = 0.0
                elif t > 1.0:
                    t = 1.0
            else:
                t = 0.0
            dx = apx - t * abx
            dy = apy - t * aby
            dz = apz - t * abz
            out[i, j] = np.sqrt(dx * dx + dy * dy + dz * dz)
    return out


# ---------------------------------------------------------------------------
# cell-averaging CFAR along the leading (range) axis


def cfar_mask_np(
    heatmap: np.ndarray, train_cells: int, guard_cells: int, scale_factor: float
) -> np.ndarray:
    """CA-CFAR detection mask along axis 0 of a (range, ...) heatmap.

    Training cells on both sides of the cell under test, excluding the guard
    band; edge cells use whatever training cells exist in bounds.
    """
    r = heatmap.shape[0]
    flat = heatmap.reshape(r, -1)
    csum = np.zeros((r + 1, flat.shape[1]), dtype=np.float64)
    np.cumsum(flat, axis=0, out=csum[1:])

    def window_sum(lo, hi):  # sum over range cells [lo, hi) clipped to bounds
        lo = np.clip(lo, 0, r)
        hi = np.clip(hi, 0, r)
        return csum[hi] - csum[lo], np.maximum(hi - lo, 0)

    idx = np.arange(r)
    left_sum, left_n = window_sum(idx - guard_cells - train_cells, idx - guard_cells)
    right_sum, right_n = window_sum(idx + guard_cells + 1, idx + guard_cells + train_cells + 1)
    total = left_sum + right_sum
    count = (left_n + right_n).astype(np.float64)[:, None]
    with np.errstate(invalid="ignore", divide="ignore"):
        mean = total / count
    detect = np.zeros_like(flat, dtype=np.bool_)
    valid = count[:, 0] > 0
    detect[valid] = flat[valid] > scale_factor * mean[valid]
    return detect.reshape(heatmap.shape)


def _cfar_mask_loop(flat, train_cells, guard_cells, scale_factor):
    r, c = flat.shape
    out = np.zeros((r, c), dtype=np.bool_)
    for j in range(c):
        for i in range(r):
            acc = 0.0
            n = 0
            lo = i - guard_cells - train_cells
            hi = i - guard_cells
            for t in range(max(lo, 0), max(hi, 0)):
                acc += flat[t, j]
                n += 1
            lo = i + guard_cells + 1
            hi = i + guard_cells + train_cells + 1
            for t in range(min(lo, r), min(hi, r)):
                acc += flat[t, j]
                n += 1
            if n > 0 and flat[i, j] > scale_factor * (acc / n):
                out[i, j] = True
    return out


# ---------------------------------------------------------------------------
# dispatch

if USE_NUMBA:
    _knn_indices_jit = njit(cache=True)(_knn_indices_loop)
    _ball_query_jit = njit(cache=True)(_ball_query_loop)
    _fps_jit = njit(cache=True)(_fps_loop)
    _psd_jit = njit(cache=True)(_point_segment_distances_loop)
    _cfar_jit = njit(cache=True)(_cfar_mask_loop)

    def knn_indices(query, ref, k):
        return _knn_indices_jit(
            np.ascontiguousarray(query, dtype=np.float64),
            np.ascontiguousarray(ref, dtype=np.float64),
            k,
        )

    def ball_query_indices(centroids, points, radius, max_samples):
        return _ball_query_jit(
            np.ascontiguousarray(centroids, dtype=np.float64),
            np.ascontiguousarray(points, dtype=np.float64),
            float(radius),
            max_samples,
        )

    def farthest_point_sample(points, k, start=0):
        return _fps_jit(np.ascontiguousarray(points, dtype=np.float64), k, start)

    def point_segment_distances(points, seg_a, seg_b):
        return _psd_jit(
            np.ascontiguousarray(points, dtype=np.float64),
            np.ascontiguousarray(seg_a, dtype=np.float64),
            np.ascontiguousarray(seg_b, dtype=np.float64),
        )

    def cfar_mask(heatmap, train_cells, guard_cells, scale_factor):
        r = heatmap.shape[0]
        flat = np.ascontiguousarray(heatmap.reshape(r, -1), dtype=np.float64)
        return _cfar_jit(flat, train_cells, guard_cells, float(scale_factor)).reshape(
            heatmap.shape
        )

else:
    def knn_indices(query, ref, k):
        return knn_indices_np(
            np.asarray(query, dtype=np.float64), np.asarray(ref, dtype=np.float64), k
        )

    def ball_query_indices(centroids, points, radius, max_samples):
        return ball_query_np(
            np.asarray(centroids, dtype=np.float64),
            np.asarray(points, dtype=np.float64),
            float(radius),
            max_samples,
        )

    def farthest_point_sample(points, k, start=0):
        return farthest_point_sample_np(np.asarray(points, dtype=np.float64), k, start)

    def point_segment_distances(points, seg_a, seg_b):
        return point_segment_distances_np(
            np.asarray(points, dtype=np.float64),
            np.asarray(seg_a, dtype=np.float64),
            np.asarray(seg_b, dtype=np.float64),
        )

    def cfar_mask(heatmap, train_cells, guard_cells, scale_factor):
        return cfar_mask_np(
            np.asarray(heatmap, dtype=np.float64), train_cells, guard_cells, float(scale_factor)
        )
