"""Visual vocabulary (descriptor-space partition) and product quantization."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from sklearn.cluster import KMeans
from sklearn.exceptions import ConvergenceWarning

DEFAULT_DIM = 128
_CHUNK = 8192


class InsufficientTrainingDataError(ValueError):
    pass


class UntrainedCodebookError(RuntimeError):
    pass


def normalize_descriptors(x: np.ndarray) -> np.ndarray:
    """Scale rows to unit L2 norm (float32)."""
    x = np.asarray(x, dtype=np.float64)
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    if np.any(norms == 0):
        raise ValueError("zero descriptor cannot be normalized")
    return (x / norms).astype(np.float32)


def descriptors_from_uint8(x: np.ndarray) -> np.ndarray:
    """Import 8-bit descriptors (e.g. SIFT): scale to [0, 1], then normalize."""
    return normalize_descriptors(np.asarray(x, dtype=np.uint8).astype(np.float64) / 255.0)


def _kmeans(data: np.ndarray, k: int, seed: int, max_iter: int = 25, tol: float = 1e-4) -> np.ndarray:
    km = KMeans(n_clusters=k, init="k-means++", n_init=1, max_iter=max_iter, tol=tol,
                random_state=seed, algorithm="lloyd")
    with warnings.catch_warnings():
        # duplicate training vectors are legal input
        warnings.simplefilter("ignore", ConvergenceWarning)
        km.fit(np.asarray(data, dtype=np.float64))
    return km.cluster_centers_


@dataclass(frozen=True, eq=False)
class Vocabulary:
    centroids: np.ndarray  # (W, D) float32, unit rows

    def __post_init__(self) -> None:
        c = np.ascontiguousarray(self.centroids, dtype=np.float32)
        if c.ndim != 2 or c.shape[0] < 1:
            raise ValueError("vocabulary needs at least one centroid")
        c.flags.writeable = False
        object.__setattr__(self, "centroids", c)

    @property
    def size(self) -> int:
        return self.centroids.shape[0]

    @property
    def dim(self) -> int:
        return self.centroids.shape[1]

    def equals(self, other: Vocabulary) -> bool:
        return np.array_equal(self.centroids, other.centroids)


def build_vocabulary(descriptors: np.ndarray, W: int, seed: int = 0) -> Vocabulary:
    """k-means++ seeded Lloyd clustering, centroids projected to the unit sphere."""
    descriptors = np.asarray(descriptors)
    if W < 1:
        raise ValueError("W must be >= 1")
    if descriptors.ndim != 2 or len(descriptors) < W:
        raise InsufficientTrainingDataError(
            f"need at least W={W} training descriptors, got {len(descriptors)}")
    if W == 1:
        centers = descriptors.astype(np.float64).mean(axis=0, keepdims=True)
    else:
        centers = _kmeans(descriptors, W, seed)
    return Vocabulary(normalize_descriptors(centers))


def assign_words(vocabulary: Vocabulary, descriptors: np.ndarray) -> np.ndarray:
    """Exact nearest centroid per row; ties go to the lowest word id."""
    d = np.atleast_2d(np.asarray(descriptors, dtype=np.float64))
    if d.shape[1] != vocabulary.dim:
        raise ValueError(f"descriptor dim {d.shape[1]} != vocabulary dim {vocabulary.dim}")
    c = vocabulary.centroids.astype(np.float64)
    c_sq = np.sum(c * c, axis=1)
    out = np.empty(len(d), dtype=np.int64)
    for s in range(0, len(d), _CHUNK):
        block = d[s:s + _CHUNK]
        # |d - c|^2 up to the per-row constant |d|^2
        dist = c_sq[None, :] - 2.0 * (block @ c.T)
        out[s:s + _CHUNK] = np.argmin(dist, axis=1)
    return out


def assign_word(vocabulary: Vocabulary, descriptor: np.ndarray) -> int:
    return int(assign_words(vocabulary, np.asarray(descriptor)[None, :])[0])


@dataclass(frozen=True, eq=False)
class PQCodebook:
    """``M`` sub-quantizers with ``K`` centroids over ``D/M``-dim subvectors."""

    centroids: np.ndarray  # (M, K, D/M) float32

    def __post_init__(self) -> None:
        c = np.ascontiguousarray(self.centroids, dtype=np.float32)
        if c.ndim != 3:
            raise ValueError("PQ codebook must have shape (M, K, D/M)")
        if c.shape[1] > 256:
            raise ValueError("PQ codes are single bytes; K must be <= 256")
        c.flags.writeable = False
        object.__setattr__(self, "centroids", c)

    @property
    def M(self) -> int:
        return self.centroids.shape[0]

    @property
    def K(self) -> int:
        return self.centroids.shape[1]

    @property
    def dim(self) -> int:
        return self.centroids.shape[0] * self.centroids.shape[2]

    def equals(self, other: PQCodebook | None) -> bool:
        return other is not None and np.array_equal(self.centroids, other.centroids)


def pq_train(descriptors: np.ndarray, M: int = 8, K: int = 256, seed: int = 0) -> PQCodebook:
    x = np.asarray(descriptors, dtype=np.float64)
    D = x.shape[1]
    if D % M:
        raise ValueError(f"M={M} must divide the descriptor dimension {D}")
    if len(x) < K:
        raise InsufficientTrainingDataError(f"need at least K={K} training vectors")
    sub = D // M
    cents = np.stack([_kmeans(x[:, m * sub:(m + 1) * sub], K, seed + m) for m in range(M)])
    return PQCodebook(cents)


def _check(codebook: PQCodebook | None, dim: int) -> PQCodebook:
    if codebook is None:
        raise UntrainedCodebookError("product quantizer has not been trained")
    if codebook.dim != dim:
        raise ValueError(f"descriptor dim {dim} does not match codebook dim {codebook.dim}")
    return codebook


def pq_encode(codebook: PQCodebook | None, descriptors: np.ndarray) -> np.ndarray:
    x = np.atleast_2d(np.asarray(descriptors, dtype=np.float64))
    cb = _check(codebook, x.shape[1])
    sub = x.shape[1] // cb.M
    codes = np.empty((len(x), cb.M), dtype=np.uint8)
    for m in range(cb.M):
        c = cb.centroids[m].astype(np.float64)
        xs = x[:, m * sub:(m + 1) * sub]
        dist = np.sum(c * c, axis=1)[None, :] - 2.0 * xs @ c.T
        codes[:, m] = np.argmin(dist, axis=1)
    return codes


def pq_reconstruct(codebook: PQCodebook | None, codes: np.ndarray) -> np.ndarray:
    codes = np.atleast_2d(np.asarray(codes, dtype=np.int64))
    if codebook is None:
        raise UntrainedCodebookError("product quantizer has not been trained")
    parts = [codebook.centroids[m][codes[:, m]] for m in range(codebook.M)]
    return np.concatenate(parts, axis=1)


def pq_distance_table(codebook: PQCodebook, query: np.ndarray) -> np.ndarray:
    """Squared distances (M, K) from each query subvector to each centroid."""
    q = np.asarray(query, dtype=np.float64)
    sub = q.shape[0] // codebook.M
    qs = q.reshape(codebook.M, 1, sub)
    return np.sum((codebook.centroids.astype(np.float64) - qs) ** 2, axis=2)


def pq_distances(codebook: PQCodebook | None, query: np.ndarray, codes: np.ndarray) -> np.ndarray:
    """Asymmetric distances from an exact query to many encoded vectors."""
    cb = _check(codebook, np.asarray(query).shape[-1])
    table = pq_distance_table(cb, query)
    codes = np.atleast_2d(codes)
    sq = table[np.arange(cb.M)[None, :], codes.astype(np.int64)].sum(axis=1)
    return np.sqrt(sq)


def pq_distance(codebook: PQCodebook | None, query: np.ndarray, code: np.ndarray) -> float:
    return float(pq_distances(codebook, query, np.asarray(code)[None, :])[0])
