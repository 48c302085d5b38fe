"""Dense 64-bit arrays with tape-based reverse-mode differentiation.

Every operation takes :class:`DiffValue` operands and returns a new
:class:`DiffValue`. When a :class:`Tape` is active and at least one operand
requires a gradient, the operation is appended to the tape together with a
closure that maps the output gradient to operand gradients. Replaying the
tape in reverse is a valid topological order because an operation can only
be recorded after all of its inputs exist.

    >>> w = DiffValue([[1.0, 2.0]], requires_grad=True)
    >>> x = DiffValue([[3.0], [4.0]])
    >>> with Tape() as tape:
    ...     y = sum_all(matmul(w, x))
    >>> tape.backward(y)
    >>> w.grad.tolist()
    [[3.0, 4.0]]
"""

from __future__ import annotations

import functools
import itertools
import math
import threading
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf, expit

from .errors import DimensionError, DomainError, NumericError, TopologyError

__all__ = [
    "DiffValue",
    "Tape",
    "current_tape",
    "constant",
    "matmul",
    "add",
    "sub",
    "mul",
    "scale",
    "sigmoid",
    "gelu",
    "relu",
    "elementwise",
    "neighbor_max_diff",
    "max_relative",
    "mean_rows",
    "sum_all",
    "row_sum",
    "concat_cols",
    "reduce",
    "add_bias",
    "reshape",
    "transpose",
    "layer_norm",
    "im2col",
    "bce_with_logits",
    "check_gradient",
]

_ids = itertools.count()
_local = threading.local()


class DiffValue:
    """A float64 array that can take part in reverse-mode differentiation.

    ``grad`` stays ``None`` until a backward pass reaches this value.
    """

    __slots__ = ("data", "grad", "node_id", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.node_id = next(_ids)
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if g.shape != self.data.shape:
            raise DimensionError(
                f"gradient shape {g.shape} does not match value shape {self.data.shape}"
            )
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"DiffValue(shape={self.shape}{label})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __matmul__(self, other):
        return matmul(self, other)


class _Record:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out, inputs, backward):
        self.out = out
        self.inputs = inputs
        self.backward = backward


class Tape:
    """Ordered log of differentiable operations.

    Use as a context manager; operations executed inside the ``with`` block
    are recorded. Tapes are thread-local, so separate samples can be
    evaluated on separate threads.
    """

    def __init__(self):
        self.records: list[_Record] = []

    def __enter__(self) -> "Tape":
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()

    def __len__(self) -> int:
        return len(self.records)

    def record(self, out: DiffValue, inputs: Sequence[DiffValue], backward: Callable) -> None:
        self.records.append(_Record(out, tuple(inputs), backward))

    def backward(self, root: DiffValue) -> None:
        """Propagate d(root)/d(.) into ``grad`` of every value reachable from ``root``.

        Leaf gradients accumulate across calls; clear them with
        :meth:`DiffValue.zero_grad` between steps.
        """
        if root.data.size != 1:
            raise DimensionError(f"backward needs a scalar root, got shape {root.shape}")
        root._accumulate(np.ones_like(root.data))
        for rec in reversed(self.records):
            g = rec.out.grad
            if g is None:
                continue
            contribs = rec.backward(g)
            for inp, c in zip(rec.inputs, contribs):
                if c is not None and inp.requires_grad:
                    inp._accumulate(c)


def current_tape() -> Tape | None:
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


def constant(x) -> DiffValue:
    return x if isinstance(x, DiffValue) else DiffValue(x)


def _result(data: np.ndarray, inputs: Sequence[DiffValue], backward: Callable) -> DiffValue:
    needs = any(v.requires_grad for v in inputs)
    out = DiffValue(data, requires_grad=needs)
    tape = current_tape()
    if needs and tape is not None:
        tape.record(out, inputs, backward)
    return out


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: DiffValue, b: DiffValue) -> DiffValue:
    """``a @ b`` for ``[m,k]@[k,n]``; a 1-D left operand is treated as a row."""
    a, b = constant(a), constant(b)
    if b.data.ndim != 2 or a.data.ndim not in (1, 2) or a.shape[-1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    av, bv = a.data, b.data

    def backward(g):
        if av.ndim == 1:
            return g @ bv.T, np.outer(av, g)
        return g @ bv.T, av.T @ g

    return _result(av @ bv, (a, b), backward)


def transpose(x: DiffValue) -> DiffValue:
    x = constant(x)
    if x.data.ndim != 2:
        raise DimensionError(f"transpose needs a 2-D value, got {x.shape}")
    return _result(x.data.T.copy(), (x,), lambda g: (g.T,))


def reshape(x: DiffValue, shape: Sequence[int]) -> DiffValue:
    x = constant(x)
    src = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {src} to {tuple(shape)}") from exc
    return _result(out.copy(), (x,), lambda g: (g.reshape(src),))


# ---------------------------------------------------------------------------
# elementwise


def _pair(a, b, opname):
    a, b = constant(a), constant(b)
    if a.shape != b.shape and a.data.size != 1 and b.data.size != 1:
        raise DimensionError(f"{opname}: shapes {a.shape} and {b.shape} differ")
    return a, b


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.full(shape, g.sum())


def add(a, b) -> DiffValue:
    a, b = _pair(a, b, "add")
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> DiffValue:
    a, b = _pair(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _result(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> DiffValue:
    a, b = _pair(a, b, "mul")
    av, bv = a.data, b.data
    return _result(
        av * bv,
        (a, b),
        lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)),
    )


def scale(x: DiffValue, c: float) -> DiffValue:
    x = constant(x)
    c = float(c)
    return _result(x.data * c, (x,), lambda g: (g * c,))


def sigmoid(x: DiffValue) -> DiffValue:
    x = constant(x)
    s = expit(x.data)
    return _result(s, (x,), lambda g: (g * s * (1.0 - s),))


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x: DiffValue) -> DiffValue:
    """Exact GELU, ``x * Phi(x)``."""
    x = constant(x)
    v = x.data
    cdf = 0.5 * (1.0 + erf(v * _INV_SQRT2))
    pdf = _INV_SQRT2PI * np.exp(-0.5 * v * v)
    return _result(v * cdf, (x,), lambda g: (g * (cdf + v * pdf),))


def relu(x: DiffValue) -> DiffValue:
    x = constant(x)
    mask = x.data > 0
    return _result(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


_ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "scale": scale,
    "sigmoid": sigmoid,
    "gelu": gelu,
    "relu": relu,
}


def elementwise(kind: str, *args) -> DiffValue:
    try:
        fn = _ELEMENTWISE[kind]
    except KeyError:
        raise ValueError(f"unknown elementwise kind {kind!r}") from None
    return fn(*args)


# ---------------------------------------------------------------------------
# message passing


def _neighbor_array(topology, n_source: int) -> np.ndarray:
    nbrs = getattr(topology, "neighbors", topology)
    if isinstance(nbrs, np.ndarray):
        arr = nbrs.astype(np.int64, copy=False)
        if arr.ndim != 2:
            raise TopologyError(f"neighbor array must be 2-D, got shape {arr.shape}")
    else:
        rows = [list(r) for r in nbrs]
        width = max((len(r) for r in rows), default=0)
        arr = np.full((len(rows), width), -1, dtype=np.int64)
        for i, r in enumerate(rows):
            arr[i, : len(r)] = r
    bad = (arr >= n_source) | (arr < -1)
    if bad.any():
        i, j = np.argwhere(bad)[0]
        raise TopologyError(f"node {i} has neighbor index {arr[i, j]} outside [0, {n_source})")
    return arr


def max_relative(
    center: DiffValue,
    source: DiffValue,
    topology,
    direction: str = "neighbor_minus_center",
) -> DiffValue:
    """Row ``i`` = elementwise max over ``j in topology[i]`` of a feature difference.

    ``direction="neighbor_minus_center"`` takes ``source[j] - center[i]``;
    ``"center_minus_neighbor"`` takes ``center[i] - source[j]``. Entries of
    ``-1`` in the neighbor array are absent; rows with no neighbors are
    zero. The gradient of each output element goes to the single maximizing
    neighbor, the lowest index among ties.
    """
    center, source = constant(center), constant(source)
    if center.data.ndim != 2 or source.data.ndim != 2 or center.shape[1] != source.shape[1]:
        raise DimensionError(f"max_relative: center {center.shape} vs source {source.shape}")
    if direction not in ("neighbor_minus_center", "center_minus_neighbor"):
        raise ValueError(f"unknown direction {direction!r}")
    nbr = _neighbor_array(topology, source.shape[0])
    rows, dim = center.shape
    if nbr.shape[0] != rows:
        raise TopologyError(f"{nbr.shape[0]} neighbor lists for {rows} nodes")
    if nbr.shape[1] == 0:
        return _result(np.zeros((rows, dim)), (center, source), lambda g: (None, None))

    # order each list by index so argmax's first-occurrence rule is the lowest-index tie-break
    key = np.where(nbr < 0, np.iinfo(np.int64).max, nbr)
    nbr = np.take_along_axis(nbr, np.argsort(key, axis=1, kind="stable"), axis=1)
    valid = nbr >= 0
    safe = np.where(valid, nbr, 0)
    sign = 1.0 if direction == "neighbor_minus_center" else -1.0
    diffs = sign * (source.data[safe] - center.data[:, None, :])
    diffs = np.where(valid[:, :, None], diffs, -np.inf)
    arg = np.argmax(diffs, axis=1)
    out = np.take_along_axis(diffs, arg[:, None, :], axis=1)[:, 0, :]
    isolated = ~valid.any(axis=1)
    out[isolated] = 0.0
    chosen = np.take_along_axis(safe, arg, axis=1)
    cols = np.broadcast_to(np.arange(dim), chosen.shape)

    def backward(g):
        g = g.copy()
        g[isolated] = 0.0
        gs = np.zeros_like(source.data)
        np.add.at(gs, (chosen, cols), sign * g)
        return -sign * g, gs

    return _result(out, (center, source), backward)


def neighbor_max_diff(nodes: DiffValue, topology) -> DiffValue:
    """``max_{j in N(i)} (nodes[j] - nodes[i])`` for every node ``i``."""
    return max_relative(nodes, nodes, topology, "neighbor_minus_center")


# ---------------------------------------------------------------------------
# reductions and layout


def mean_rows(x: DiffValue) -> DiffValue:
    x = constant(x)
    if x.data.ndim != 2:
        raise DimensionError(f"mean_rows needs a 2-D value, got {x.shape}")
    n = x.shape[0]
    if n == 0:
        raise DomainError("mean_rows of an empty matrix")
    shape = x.shape
    return _result(x.data.mean(axis=0), (x,), lambda g: (np.broadcast_to(g / n, shape).copy(),))


def sum_all(x: DiffValue) -> DiffValue:
    x = constant(x)
    if x.data.size == 0:
        raise DomainError("sum of an empty value")
    shape = x.shape
    return _result(np.array(x.data.sum()), (x,), lambda g: (np.full(shape, float(g)),))


def row_sum(x: DiffValue) -> DiffValue:
    """Sum across columns: ``[R, C] -> [R]``."""
    x = constant(x)
    if x.data.ndim != 2 or x.shape[1] == 0:
        raise DomainError(f"row_sum needs a non-empty 2-D value, got {x.shape}")
    shape = x.shape
    return _result(x.data.sum(axis=1), (x,), lambda g: (np.broadcast_to(g[:, None], shape).copy(),))


def concat_cols(*parts: DiffValue) -> DiffValue:
    parts = tuple(constant(p) for p in parts)
    if not parts:
        raise DomainError("concat_cols of nothing")
    rows = parts[0].shape[0]
    for p in parts:
        if p.data.ndim != 2 or p.shape[0] != rows:
            raise DimensionError(f"concat_cols: {[q.shape for q in parts]}")
    edges = np.cumsum([p.shape[1] for p in parts])[:-1]
    return _result(np.concatenate([p.data for p in parts], axis=1), parts, lambda g: tuple(np.split(g, edges, axis=1)))


_REDUCE = {"mean_rows": mean_rows, "sum": sum_all, "concat_cols": concat_cols}


def reduce(kind: str, *args) -> DiffValue:
    try:
        fn = _REDUCE[kind]
    except KeyError:
        raise ValueError(f"unknown reduction {kind!r}") from None
    return fn(*args)


def add_bias(x: DiffValue, b: DiffValue) -> DiffValue:
    """Add a ``[C]`` vector to every row of ``[R, C]`` (or to a ``[C]`` vector)."""
    x, b = constant(x), constant(b)
    if b.data.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise DimensionError(f"add_bias: value {x.shape} vs bias {b.shape}")
    ndim = x.data.ndim

    def backward(g):
        return g, g if ndim == 1 else g.sum(axis=0)

    return _result(x.data + b.data, (x, b), backward)


def layer_norm(x: DiffValue, gamma: DiffValue, beta: DiffValue, eps: float = 1e-5) -> DiffValue:
    """Per-row normalization to zero mean / unit variance, then affine."""
    x, gamma, beta = constant(x), constant(gamma), constant(beta)
    if x.data.ndim != 2 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise DimensionError(f"layer_norm: x {x.shape}, gamma {gamma.shape}, beta {beta.shape}")
    mu = x.data.mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(x.data.var(axis=1, keepdims=True) + eps)
    xhat = (x.data - mu) * inv
    gv = gamma.data

    def backward(g):
        dxhat = g * gv
        dx = inv * (
            dxhat
            - dxhat.mean(axis=1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=1, keepdims=True)
        )
        return dx, (g * xhat).sum(axis=0), g.sum(axis=0)

    return _result(xhat * gv + beta.data, (x, gamma, beta), backward)


@functools.lru_cache(maxsize=64)
def _im2col_index(h: int, w: int, kernel: int, stride: int, pad: int):
    ho = (h + 2 * pad - kernel) // stride + 1
    wo = (w + 2 * pad - kernel) // stride + 1
    oy, ox = np.meshgrid(np.arange(ho), np.arange(wo), indexing="ij")
    ky, kx = np.meshgrid(np.arange(kernel), np.arange(kernel), indexing="ij")
    iy = oy.reshape(-1, 1) * stride - pad + ky.reshape(1, -1)
    ix = ox.reshape(-1, 1) * stride - pad + kx.reshape(1, -1)
    inside = (iy >= 0) & (iy < h) & (ix >= 0) & (ix < w)
    # out-of-bounds taps read the zero row appended at index h*w
    idx = np.where(inside, iy * w + ix, h * w)
    idx.setflags(write=False)
    return idx, (ho, wo)


def im2col(
    x: DiffValue, grid: tuple[int, int], kernel: int = 3, stride: int = 2, pad: int = 1
) -> tuple[DiffValue, tuple[int, int]]:
    """Unfold a row-major ``[H*W, C]`` feature map into convolution patches.

    Returns ``([Ho*Wo, kernel*kernel*C], (Ho, Wo))``; columns are ordered
    tap-major, channel-minor, so a convolution is ``im2col(x) @ W`` with
    ``W`` of shape ``[kernel*kernel*C, C_out]``.
    """
    x = constant(x)
    h, w = grid
    if x.data.ndim != 2 or x.shape[0] != h * w:
        raise DimensionError(f"im2col: value {x.shape} does not match grid {grid}")
    idx, out_grid = _im2col_index(h, w, kernel, stride, pad)
    c = x.shape[1]
    padded = np.vstack([x.data, np.zeros((1, c))])
    cols = padded[idx].reshape(idx.shape[0], -1)

    def backward(g):
        acc = np.zeros((h * w + 1, c))
        np.add.at(acc, idx, g.reshape(idx.shape[0], idx.shape[1], c))
        return (acc[:-1],)

    return _result(cols, (x,), backward), out_grid


def bce_with_logits(logits: DiffValue, targets) -> DiffValue:
    """Mean binary cross-entropy of ``sigmoid(logits)`` against soft targets."""
    logits = constant(logits)
    t = np.asarray(targets, dtype=np.float64)
    if t.shape != logits.shape:
        raise DimensionError(f"bce: logits {logits.shape} vs targets {t.shape}")
    z = logits.data
    per = np.maximum(z, 0.0) - z * t + np.log1p(np.exp(-np.abs(z)))
    loss = per.mean()
    if not np.isfinite(loss):
        raise NumericError(f"non-finite BCE loss (logit range {z.min()}..{z.max()})")
    n = z.size
    return _result(np.array(loss), (logits,), lambda g: (float(g) * (expit(z) - t) / n,))


# ---------------------------------------------------------------------------
# verification


def check_gradient(
    f: Callable[[], DiffValue],
    params: Iterable[DiffValue],
    eps: float = 1e-5,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Largest relative disagreement between tape gradients and central differences.

    The error per entry is ``|analytic - numeric| / max(1, |numeric|)``.
    With ``max_entries`` set, at most that many entries per parameter are
    probed (chosen with ``rng``); otherwise every entry is.
    """
    if not 0 < eps <= 1e-2:
        raise ValueError(f"eps must be in (0, 1e-2], got {eps}")
    params = list(params)
    for p in params:
        p.zero_grad()
    with Tape() as tape:
        out = f()
    if not np.all(np.isfinite(out.data)):
        raise NumericError("forward value is not finite")
    tape.backward(out)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    rng = rng if rng is not None else np.random.default_rng(0)

    def value() -> float:
        v = float(f().data)
        if not math.isfinite(v):
            raise NumericError("forward value is not finite")
        return v

    worst = 0.0
    for p, a in zip(params, analytic):
        flat = p.data.reshape(-1)
        if not np.shares_memory(flat, p.data):
            raise ValueError("check_gradient needs contiguous parameter arrays")
        entries = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            entries = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        af = a.reshape(-1)
        for i in entries:
            orig = flat[i]
            flat[i] = orig + eps
            up = value()
            flat[i] = orig - eps
            down = value()
            flat[i] = orig
            num = (up - down) / (2.0 * eps)
            worst = max(worst, abs(af[i] - num) / max(1.0, abs(num)))
    return worst
