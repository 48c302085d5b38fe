"""CNN patch stem and patch-graph (PGN) blocks.

Feature maps are kept as ``[H*W, C]`` matrices in row-major grid order
(frequency-major, then time), so the same array is both a convolution
input and a set of graph nodes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import DimensionError
from .graph import FeatureGraph, dilated_knn_graph


@dataclass
class PatchNodes:
    features: T.DiffValue  # [N, D]
    grid: tuple[int, int]

    def __post_init__(self):
        h, w = self.grid
        if self.features.shape[0] != h * w:
            raise DimensionError(f"{self.features.shape[0]} nodes for grid {self.grid}")

    @property
    def dim(self) -> int:
        return self.features.shape[1]


def activation(name: str):
    return T.gelu if name == "gelu" else T.relu


def linear(x: T.DiffValue, weight: T.DiffValue, bias: T.DiffValue | None = None) -> T.DiffValue:
    out = T.matmul(x, weight)
    return out if bias is None else T.add_bias(out, bias)


def conv3x3_s2(x: PatchNodes, weight: T.DiffValue, bias: T.DiffValue) -> PatchNodes:
    """Stride-2, padding-1 3x3 convolution; ``weight`` is ``[9*C_in, C_out]``."""
    h, w = x.grid
    if h % 2 or w % 2:
        raise DimensionError(f"stride-2 convolution needs an even grid, got {x.grid}")
    if weight.shape[0] != 9 * x.dim:
        raise DimensionError(f"conv weight {weight.shape} does not take {x.dim} input channels")
    cols, grid = T.im2col(x.features, x.grid, kernel=3, stride=2, pad=1)
    return PatchNodes(linear(cols, weight, bias), grid)


# ---------------------------------------------------------------------------
# schedules


def _round_half_up(v: float) -> int:
    return int(math.floor(v + 0.5))


def k_schedule(base_k: int, depth: int) -> list[int]:
    """Neighbor count per layer, linear from ``k`` to ``2k``."""
    if depth <= 1:
        return [base_k] * depth
    return [_round_half_up(base_k * (1 + layer / (depth - 1))) for layer in range(depth)]


def dilation_schedule(d_max: int, depth: int) -> list[int]:
    """Isotropic dilation per layer, linear from 1 to ``d_max``."""
    if depth <= 1:
        return [1] * depth
    return [min(_round_half_up(1 + layer * (d_max - 1) / (depth - 1)), d_max) for layer in range(depth)]


# ---------------------------------------------------------------------------
# stem


def stem(spec_values: np.ndarray, params: dict, n_convs: int, act: str = "gelu") -> PatchNodes:
    """Stack of stride-2 convolutions over a ``[frames, bins]`` spectrogram.

    The image is laid out frequency-major (``[bins, frames]``) with a single
    input channel. Every conv but the last is followed by the activation.
    Parameters are read from ``params["stem.conv{i}.weight"/".bias"]``.
    """
    spec_values = np.asarray(spec_values, dtype=np.float64)
    frames, bins = spec_values.shape
    p = 2**n_convs
    if frames % p or bins % p:
        raise DimensionError(
            f"spectrogram {frames}x{bins} frames x bins must be a multiple of {p} on both axes"
        )
    x = PatchNodes(T.DiffValue(spec_values.T.reshape(-1, 1)), (bins, frames))
    f = activation(act)
    for i in range(n_convs):
        x = conv3x3_s2(x, params[f"stem.conv{i}.weight"], params[f"stem.conv{i}.bias"])
        if i < n_convs - 1:
            x = PatchNodes(f(x.features), x.grid)
    return x


def add_position(x: PatchNodes, pos: T.DiffValue) -> PatchNodes:
    if pos.shape != x.features.shape:
        raise DimensionError(f"positional encoding {pos.shape} vs features {x.features.shape}")
    return PatchNodes(T.add(x.features, pos), x.grid)


# ---------------------------------------------------------------------------
# PGN


def graph_conv(
    x: PatchNodes,
    params: dict,
    prefix: str,
    graph: FeatureGraph | None = None,
    k: int = 9,
    d: int = 1,
    bias: np.ndarray | None = None,
    act: str = "gelu",
) -> tuple[PatchNodes, FeatureGraph]:
    """``y = act(GraphConv(x W_in)) W_out + x`` with max-relative GraphConv.

    GraphConv(u) = ``[u, max_j (u_j - u_i)] W_update``. If ``graph`` is not
    given it is built from ``u`` with a dilated k-NN search. When the params
    hold ``{prefix}.norm.*`` the input is layer-normalized first; the
    residual always adds the raw input.
    """
    h = x.features
    if f"{prefix}.norm.gamma" in params:
        h = T.layer_norm(h, params[f"{prefix}.norm.gamma"], params[f"{prefix}.norm.beta"])
    w_in = params[f"{prefix}.w_in"]
    if w_in.shape[0] != x.dim:
        raise DimensionError(f"{prefix}.w_in {w_in.shape} does not take dim {x.dim}")
    u = linear(h, w_in, params.get(f"{prefix}.b_in"))
    if graph is None:
        graph = dilated_knn_graph(u.data, k, d, bias)
    elif graph.node_count != u.shape[0]:
        raise DimensionError(f"graph has {graph.node_count} nodes, features have {u.shape[0]}")
    msg = T.concat_cols(u, T.neighbor_max_diff(u, graph))
    v = linear(msg, params[f"{prefix}.w_update"], params.get(f"{prefix}.b_update"))
    y = linear(activation(act)(v), params[f"{prefix}.w_out"], params.get(f"{prefix}.b_out"))
    return PatchNodes(T.add(y, x.features), x.grid), graph


def ffn(x: PatchNodes, params: dict, prefix: str, act: str = "gelu") -> PatchNodes:
    h = x.features
    if f"{prefix}.norm.gamma" in params:
        h = T.layer_norm(h, params[f"{prefix}.norm.gamma"], params[f"{prefix}.norm.beta"])
    z = activation(act)(linear(h, params[f"{prefix}.w1"], params.get(f"{prefix}.b1")))
    z = linear(z, params[f"{prefix}.w2"], params.get(f"{prefix}.b2"))
    return PatchNodes(T.add(z, x.features), x.grid)


def pgn_block(
    x: PatchNodes,
    params: dict,
    prefix: str,
    k: int,
    d: int,
    bias: np.ndarray | None = None,
    act: str = "gelu",
) -> tuple[PatchNodes, FeatureGraph]:
    """GraphConv sub-layer then FFN sub-layer; the graph is rebuilt from the current features."""
    y, graph = graph_conv(x, params, f"{prefix}.gc", k=k, d=d, bias=bias, act=act)
    return ffn(y, params, f"{prefix}.ffn", act=act), graph


def downsample(x: PatchNodes, params: dict, prefix: str) -> PatchNodes:
    """Stride-2 3x3 convolution between pyramid stages (``N -> N/4``)."""
    return conv3x3_s2(x, params[f"{prefix}.weight"], params[f"{prefix}.bias"])


# ---------------------------------------------------------------------------
# parameter shapes


def pgn_param_shapes(prefix: str, dim: int, ffn_ratio: int, norm: bool) -> dict[str, tuple]:
    hidden = dim * ffn_ratio
    shapes = {
        f"{prefix}.gc.w_in": (dim, dim),
        f"{prefix}.gc.b_in": (dim,),
        f"{prefix}.gc.w_update": (2 * dim, dim),
        f"{prefix}.gc.b_update": (dim,),
        f"{prefix}.gc.w_out": (dim, dim),
        f"{prefix}.gc.b_out": (dim,),
        f"{prefix}.ffn.w1": (dim, hidden),
        f"{prefix}.ffn.b1": (hidden,),
        f"{prefix}.ffn.w2": (hidden, dim),
        f"{prefix}.ffn.b2": (dim,),
    }
    if norm:
        for sub in ("gc", "ffn"):
            shapes[f"{prefix}.{sub}.norm.gamma"] = (dim,)
            shapes[f"{prefix}.{sub}.norm.beta"] = (dim,)
    return shapes
