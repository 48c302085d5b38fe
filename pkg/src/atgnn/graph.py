"""Dynamic k-NN and dilated k-NN graphs over node features.

Graphs are directed: ``neighbors[i]`` is node ``i``'s own neighbor list,
ordered nearest first. Ranking ties are broken toward the lower index.
Topology selection is not differentiable; callers pass plain arrays.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError

__all__ = [
    "FeatureGraph",
    "pairwise_sq_dist",
    "cross_sq_dist",
    "knn_graph",
    "dilated_knn_graph",
    "cross_knn",
    "relative_bias",
    "sincos_position_encoding",
    "clamped_knn_params",
]


@dataclass(frozen=True)
class FeatureGraph:
    neighbors: np.ndarray  # [N, k] int64
    k: int
    dilation: int

    @property
    def node_count(self) -> int:
        return self.neighbors.shape[0]

    def to_text(self) -> str:
        """One line per node: ``"i: j1 j2 ... jk"``."""
        lines = []
        for i, row in enumerate(self.neighbors):
            lines.append(f"{i}: " + " ".join(str(int(j)) for j in row))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, dilation: int = 1) -> "FeatureGraph":
        rows = []
        for line in text.strip().splitlines():
            head, _, tail = line.partition(":")
            if int(head) != len(rows):
                raise ValueError(f"node lines out of order at {head!r}")
            rows.append([int(t) for t in tail.split()])
        nbrs = np.array(rows, dtype=np.int64).reshape(len(rows), -1)
        return cls(nbrs, nbrs.shape[1], dilation)


def _as_matrix(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 1:
        raise DimensionError(f"expected a non-empty [N, D] matrix, got shape {x.shape}")
    return x


def cross_sq_dist(a, b) -> np.ndarray:
    """Squared Euclidean distances between rows of ``a`` [M,D] and ``b`` [N,D]."""
    a, b = _as_matrix(a), _as_matrix(b)
    if a.shape[1] != b.shape[1]:
        raise DimensionError(f"feature dims differ: {a.shape} vs {b.shape}")
    # strictly left-to-right summation over features (cumsum is sequential), so
    # results are bit-identical to a plain loop regardless of dimension
    if a.shape[0] * b.shape[0] * a.shape[1] <= 1 << 22:
        diff = a[:, None, :] - b[None, :, :]
        return np.cumsum(diff * diff, axis=2)[:, :, -1].copy()
    out = np.zeros((a.shape[0], b.shape[0]))
    for c in range(a.shape[1]):
        diff = a[:, c, None] - b[None, :, c]
        out += diff * diff
    return out


def pairwise_sq_dist(nodes) -> np.ndarray:
    """Symmetric ``[N, N]`` squared distances with an exactly zero diagonal."""
    return cross_sq_dist(nodes, nodes)


def clamped_knn_params(n: int, k: int, d: int) -> tuple[int, int]:
    """Effective ``(k, d)`` once the candidate pool ``k*d`` is capped at ``n - 1``.

    ``k`` is clamped first; the stride then shrinks to the largest value that
    still yields ``k`` neighbors from the ``n - 1`` available candidates.
    """
    if k < 1 or d < 1:
        raise ValueError(f"k and d must be >= 1, got k={k}, d={d}")
    k_eff = min(k, n - 1)
    if k_eff <= 0:
        return 0, 1
    return k_eff, max(1, min(d, (n - 1) // k_eff))


def _ranked(scores: np.ndarray, exclude_self: bool) -> np.ndarray:
    """Column indices of each row sorted ascending by score, lower index first on ties."""
    scores = scores.copy()
    if exclude_self:
        np.fill_diagonal(scores, np.inf)
    order = np.argsort(scores, axis=1, kind="stable")
    if exclude_self:
        # self is not necessarily last when other entries are +inf; drop it explicitly
        n = scores.shape[0]
        order = order[order != np.arange(n)[:, None]].reshape(n, n - 1)
    return order


def dilated_knn_graph(nodes, k: int, d: int = 1, bias=None) -> FeatureGraph:
    """Neighbors at positions ``0, d, ..., (k-1)*d`` of the ``k*d`` nearest candidates."""
    x = _as_matrix(nodes)
    n = x.shape[0]
    k_eff, d_eff = clamped_knn_params(n, k, d)
    if k_eff == 0:
        return FeatureGraph(np.zeros((n, 0), dtype=np.int64), 0, d_eff)
    scores = pairwise_sq_dist(x)
    if bias is not None:
        bias = np.asarray(bias, dtype=np.float64)
        if bias.shape != (n, n):
            raise DimensionError(f"bias shape {bias.shape} does not match {n} nodes")
        scores = scores + bias
    order = _ranked(scores, exclude_self=True)
    nbrs = order[:, : k_eff * d_eff : d_eff]
    return FeatureGraph(np.ascontiguousarray(nbrs, dtype=np.int64), k_eff, d_eff)


def knn_graph(nodes, k: int, bias=None) -> FeatureGraph:
    return dilated_knn_graph(nodes, k, 1, bias)


def cross_knn(queries, keys, k: int) -> np.ndarray:
    """For each query row, the ``k`` nearest key rows (``[M, min(k, N)]``)."""
    dist = cross_sq_dist(queries, keys)
    k = min(k, dist.shape[1])
    return np.ascontiguousarray(_ranked(dist, exclude_self=False)[:, :k], dtype=np.int64)


def relative_bias(rel, sign: float = 1.0) -> np.ndarray:
    """Pairwise ``sign * e_i . e_j`` added to squared feature distances."""
    e = _as_matrix(rel)
    if not np.all(np.isfinite(e)):
        raise ValueError("relative encodings must be finite")
    return sign * (e @ e.T)


def sincos_position_encoding(grid: tuple[int, int], dim: int) -> np.ndarray:
    """Fixed 2-D sine/cosine encoding of grid positions, rows normalized to unit length.

    Half the channels encode the row coordinate, half the column; row-major
    node order matches the flattened feature map.
    """
    h, w = grid
    if dim < 4 or dim % 4:
        raise ValueError(f"encoding dim must be a positive multiple of 4, got {dim}")
    quarter = dim // 4
    freqs = 1.0 / (10000.0 ** (np.arange(quarter) / quarter))
    yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    ay = yy.reshape(-1, 1) * freqs
    ax = xx.reshape(-1, 1) * freqs
    enc = np.concatenate([np.sin(ay), np.cos(ay), np.sin(ax), np.cos(ax)], axis=1)
    return enc / np.sqrt(dim / 2.0)
