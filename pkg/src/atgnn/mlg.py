"""Patch-label (PLG) and label-label (LLG) graph blocks."""

from __future__ import annotations

import io

import numpy as np

from . import tensor as T
from .blocks import PatchNodes
from .errors import DimensionError
from .graph import cross_knn


def plg_block(
    labels: T.DiffValue,
    patches: PatchNodes | T.DiffValue,
    w_update: T.DiffValue,
    k_plg: int,
    direction: str = "center_minus_neighbor",
) -> T.DiffValue:
    """``L' = L + [L, max_{j in N(l_i)} (l_i - x_j)] W``.

    Each label links to its ``k_plg`` nearest patches (Euclidean, ties to the
    lower index). Patches are read, never updated.
    """
    x = patches.features if isinstance(patches, PatchNodes) else patches
    s, c = labels.shape
    if x.shape[1] != c:
        raise DimensionError(f"label dim {c} differs from patch dim {x.shape[1]}")
    if w_update.shape != (2 * c, c):
        raise DimensionError(f"W_l-update must be {(2 * c, c)}, got {w_update.shape}")
    nbrs = cross_knn(labels.data, x.data, k_plg)
    agg = T.max_relative(labels, x, nbrs, direction)
    return T.add(labels, T.matmul(T.concat_cols(labels, agg), w_update))


def llg_block(labels: T.DiffValue, adjacency: T.DiffValue) -> T.DiffValue:
    """``L_hat = A L' + L'`` over the fully connected label graph."""
    s = labels.shape[0]
    if adjacency.shape != (s, s):
        raise DimensionError(f"adjacency must be {(s, s)}, got {adjacency.shape}")
    return T.add(T.matmul(adjacency, labels), labels)


def adjacency_csv(adjacency: np.ndarray, names: list[str] | None = None) -> str:
    """Learned label adjacency as CSV; an optional header row/column carries class names."""
    a = np.asarray(adjacency, dtype=np.float64)
    buf = io.StringIO()
    if names is not None:
        buf.write("," + ",".join(names) + "\n")
    for i, row in enumerate(a):
        cells = [repr(float(v)) for v in row]
        if names is not None:
            cells.insert(0, names[i])
        buf.write(",".join(cells) + "\n")
    return buf.getvalue()
