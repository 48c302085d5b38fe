"""Prediction head: pooled patch logits, per-class label readout, and fusion."""

from __future__ import annotations

import numpy as np
from scipy.special import expit

from . import tensor as T
from .blocks import PatchNodes, activation, linear
from .errors import DimensionError


def patch_logits(patches: PatchNodes | T.DiffValue, params: dict, act: str = "gelu") -> T.DiffValue:
    """Global average pool over nodes, then two 1x1 convolutions (dense layers on the pooled vector)."""
    x = patches.features if isinstance(patches, PatchNodes) else patches
    pooled = T.mean_rows(x)
    hidden = activation(act)(linear(pooled, params["head.conv1.weight"], params["head.conv1.bias"]))
    return linear(hidden, params["head.conv2.weight"], params["head.conv2.bias"])


def label_logits(labels: T.DiffValue, readout: T.DiffValue) -> T.DiffValue:
    """``y_i = <W^p_i, l_i>``: one independent dot product per class."""
    if readout.shape != labels.shape:
        raise DimensionError(f"readout {readout.shape} vs labels {labels.shape}")
    return T.row_sum(T.mul(readout, labels))


def fuse(y_patch, y_label):
    """``sigmoid(y_patch + y_label)``; differentiable for DiffValues, plain otherwise."""
    if isinstance(y_patch, T.DiffValue) or isinstance(y_label, T.DiffValue):
        return T.sigmoid(T.add(y_patch, y_label))
    a, b = np.asarray(y_patch, dtype=np.float64), np.asarray(y_label, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"fuse: {a.shape} vs {b.shape}")
    return expit(a + b)
