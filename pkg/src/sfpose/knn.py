"""k-NN distance labels: product-quantised shortlist, exact L2 re-ranking."""
from __future__ import annotations

import numpy as np
from scipy.cluster.vq import kmeans2


class ProductQuantizer:
    """Asymmetric-distance PQ over ``n_sub`` equal slices of the vector."""

    def __init__(self, n_sub: int = 6, n_centroids: int = 16, seed: int = 0):
        self.n_sub = n_sub
        self.n_centroids = n_centroids
        self.seed = seed
        self.codebooks: list[np.ndarray] = []
        self.codes: np.ndarray | None = None

    def _slices(self, dim: int) -> list[slice]:
        bounds = np.linspace(0, dim, self.n_sub + 1).astype(int)
        return [slice(a, b) for a, b in zip(bounds[:-1], bounds[1:])]

    def fit(self, x: np.ndarray) -> "ProductQuantizer":
        rng = np.random.default_rng(self.seed)
        self.slices = self._slices(x.shape[1])
        k = min(self.n_centroids, len(x))
        self.codebooks, codes = [], []
        for sl in self.slices:
            cb, lab = kmeans2(x[:, sl], k, iter=20, minit="++", seed=rng)
            self.codebooks.append(cb)
            codes.append(lab)
        self.codes = np.stack(codes, axis=1)
        return self

    def approx_sq_distances(self, q: np.ndarray) -> np.ndarray:
        """(Q, N) approximate squared distances from queries to the indexed set."""
        out = np.zeros((len(q), len(self.codes)))
        for j, (sl, cb) in enumerate(zip(self.slices, self.codebooks)):
            table = ((q[:, None, sl] - cb[None]) ** 2).sum(-1)      # (Q, ks)
            out += table[:, self.codes[:, j]]
        return out


def exact_knn_mean(q: np.ndarray, cands: np.ndarray, k: int) -> np.ndarray:
    """Mean of the k smallest L2 distances from q (Q, D) to cands (Q, C, D); 0 for exact members."""
    d = np.sqrt(((cands - q[:, None, :]) ** 2).sum(-1))
    d.sort(axis=1)
    near = d[:, :k]
    return np.where(near[:, 0] == 0.0, 0.0, near.mean(axis=1))


def label_distances(queries: np.ndarray, clean: np.ndarray, k_prime: int = 500, k: int = 5,
                    exact: bool = False, index: ProductQuantizer | None = None,
                    chunk: int = 256, seed: int = 0) -> np.ndarray:
    """Distance-to-manifold labels for ``queries`` against the ``clean`` pose set.

    Inputs are flattened to (n, D).  With ``exact`` or ``k_prime >= len(clean)``
    every clean pose is a candidate, which is exhaustive brute force.
    """
    q = np.asarray(queries, dtype=np.float64).reshape(len(queries), -1)
    c = np.asarray(clean, dtype=np.float64).reshape(len(clean), -1)
    if len(c) < k:
        raise ValueError(f"clean set has {len(c)} poses, fewer than k={k}")
    brute = exact or k_prime >= len(c)
    if not brute and index is None:
        index = ProductQuantizer(seed=seed).fit(c)
    out = np.empty(len(q))
    step = max(1, chunk if not brute else chunk * 500 // max(len(c), 1))
    for s in range(0, len(q), step):
        qs = q[s:s + step]
        if brute:
            cands = np.broadcast_to(c, (len(qs),) + c.shape)
        else:
            approx = index.approx_sq_distances(qs)
            short = np.argpartition(approx, k_prime - 1, axis=1)[:, :k_prime]
            short.sort(axis=1)
            cands = c[short]
        out[s:s + step] = exact_knn_mean(qs, cands, k)
    return out
