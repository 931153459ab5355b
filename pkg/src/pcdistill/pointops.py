"""Brute-force spatial operators on small point sets.

Every function here is pure and breaks distance ties by the lowest index, so
results depend only on the arguments.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

INTERP_K = 3
INTERP_EPS = 1e-8


@dataclass(frozen=True)
class PointCloud:
    positions: np.ndarray
    features: np.ndarray | None = None

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=np.float64)
        if pos.ndim != 2 or pos.shape[1] != 3 or pos.shape[0] < 1:
            raise ValueError(f"positions must be N x 3 with N >= 1, got {pos.shape}")
        object.__setattr__(self, "positions", pos)
        if self.features is not None:
            feat = np.asarray(self.features, dtype=np.float64)
            if feat.ndim == 1:
                feat = feat[:, None]
            if feat.shape[0] != pos.shape[0]:
                raise ValueError(
                    f"features have {feat.shape[0]} rows, positions have {pos.shape[0]}"
                )
            object.__setattr__(self, "features", feat)

    def __len__(self):
        return self.positions.shape[0]


@dataclass(frozen=True)
class NeighborIndex:
    indices: np.ndarray  # (n_q, k) int
    distances: np.ndarray  # (n_q, k) float, nondecreasing per row


def _as_positions(x) -> np.ndarray:
    if isinstance(x, PointCloud):
        return x.positions
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise ValueError(f"expected an N x 3 position array, got shape {arr.shape}")
    if arr.shape[0] == 0:
        raise ValueError("empty point set")
    return arr


def pairwise_dist(a, b) -> np.ndarray:
    """Euclidean distance matrix, entry (i, j) = |a_i - b_j|."""
    a = _as_positions(a)
    b = _as_positions(b)
    diff = a[:, None, :] - b[None, :, :]
    return np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))


def fps(cloud, m: int, seed: int | None = 0, start: int | None = None) -> np.ndarray:
    """Farthest point sampling.

    The first index is drawn uniformly with a PRNG seeded by ``seed`` unless
    ``start`` pins it; each further pick maximizes the distance to the
    already-selected set.
    """
    pos = _as_positions(cloud)
    n = pos.shape[0]
    if m < 1 or m > n:
        raise ValueError(f"cannot sample m={m} points from a cloud of {n}")
    if start is None:
        start = int(np.random.default_rng(seed).integers(n))
    elif not 0 <= start < n:
        raise ValueError(f"start index {start} out of range for {n} points")

    selected = np.empty(m, dtype=np.int64)
    selected[0] = start
    min_d2 = np.full(n, np.inf)
    last = start
    for i in range(1, m):
        diff = pos - pos[last]
        d2 = np.einsum("ij,ij->i", diff, diff)
        np.minimum(min_d2, d2, out=min_d2)
        min_d2[last] = -np.inf  # never reselect, even among duplicates
        last = int(np.argmax(min_d2))
        selected[i] = last
    return selected


def knn(query, reference, k: int) -> NeighborIndex:
    ref = _as_positions(reference)
    q = _as_positions(query)
    if k < 1 or k > ref.shape[0]:
        raise ValueError(f"k={k} invalid for a reference set of {ref.shape[0]} points")
    dist = pairwise_dist(q, ref)
    order = np.argsort(dist, axis=1, kind="stable")[:, :k]
    return NeighborIndex(order, np.take_along_axis(dist, order, axis=1))


def interp_weights(pos_coarse, pos_fine, k_interp: int = INTERP_K):
    """Neighbor indices and normalized inverse-squared-distance weights.

    ``k_interp`` is clipped to the coarse set size.
    """
    pos_coarse = _as_positions(pos_coarse)
    k = min(k_interp, pos_coarse.shape[0])
    nb = knn(pos_fine, pos_coarse, k)
    w = 1.0 / (nb.distances**2 + INTERP_EPS)
    w /= w.sum(axis=1, keepdims=True)
    return nb.indices, w


def interp_upsample(feat_coarse, pos_coarse, pos_fine, k_interp: int = INTERP_K) -> np.ndarray:
    feat_coarse = np.asarray(feat_coarse, dtype=np.float64)
    if feat_coarse.shape[0] == 0:
        raise ValueError("empty coarse set")
    idx, w = interp_weights(pos_coarse, pos_fine, k_interp)
    return np.einsum("nk,nkd->nd", w, feat_coarse[idx])


def nearest_index(pos_fine, pos_coarse) -> np.ndarray:
    """For each coarse position, the index of the nearest fine position."""
    return knn(pos_coarse, pos_fine, 1).indices[:, 0]


def nn_downsample(feat_fine, pos_fine, pos_coarse) -> np.ndarray:
    feat_fine = np.asarray(feat_fine, dtype=np.float64)
    if feat_fine.shape[0] == 0:
        raise ValueError("empty fine set")
    return feat_fine[nearest_index(pos_fine, pos_coarse)]


def repeat_global(feat, n: int) -> np.ndarray:
    feat = np.asarray(feat, dtype=np.float64).reshape(1, -1)
    if n < 1:
        raise ValueError("repeat count must be >= 1")
    return np.repeat(feat, n, axis=0)


def normalize_unit(positions: np.ndarray):
    """Center on the centroid and scale into the unit ball.

    Returns ``(normalized, center, scale)`` so that
    ``normalized * scale + center`` recovers the input.
    """
    pos = _as_positions(positions)
    center = pos.mean(axis=0)
    shifted = pos - center
    scale = float(np.sqrt((shifted**2).sum(axis=1)).max())
    if scale == 0.0:
        scale = 1.0
    return shifted / scale, center, scale
