"""Full audio-tagging network: stem, PGN stages, MLG blocks, prediction head."""

from __future__ import annotations

import functools
import hashlib
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .blocks import (
    PatchNodes,
    add_position,
    dilation_schedule,
    downsample,
    k_schedule,
    pgn_block,
    pgn_param_shapes,
    stem,
)
from .config import ModelConfig
from .errors import DimensionError
from .graph import FeatureGraph, relative_bias, sincos_position_encoding
from .head import fuse, label_logits, patch_logits
from .mlg import llg_block, plg_block


@dataclass
class ModelOutput:
    patch_logits: T.DiffValue
    label_logits: T.DiffValue
    logits: T.DiffValue
    labels: T.DiffValue | None
    patches: PatchNodes
    graphs: list[FeatureGraph]

    @property
    def probs(self) -> np.ndarray:
        return fuse(self.patch_logits.data, self.label_logits.data)


def stem_channels(cfg: ModelConfig) -> list[int]:
    d = cfg.dims[0]
    n = 2 if cfg.pyramid else 4
    return [max(1, d // 2 ** (n - 1 - i)) for i in range(n)]


def readout_stage(cfg: ModelConfig) -> int | None:
    """Index of the last stage carrying MLG blocks; its labels feed the readout."""
    stages = [s for s, p in enumerate(cfg.stage_mlg) if p > 0]
    return stages[-1] if stages else None


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Canonical parameter names and shapes, in initialization order."""
    shapes: dict[str, tuple[int, ...]] = {}
    cin = 1
    for i, cout in enumerate(stem_channels(cfg)):
        shapes[f"stem.conv{i}.weight"] = (9 * cin, cout)
        shapes[f"stem.conv{i}.bias"] = (cout,)
        cin = cout
    h, w = cfg.input_bins // cfg.reduction, cfg.input_frames // cfg.reduction
    shapes["pos_embed"] = (h * w, cfg.dims[0])
    s_count = cfg.num_classes
    for s, dim in enumerate(cfg.dims):
        if s > 0:
            shapes[f"down{s}.weight"] = (9 * cfg.dims[s - 1], dim)
            shapes[f"down{s}.bias"] = (dim,)
        for j in range(cfg.stage_pgn[s]):
            shapes.update(pgn_param_shapes(f"stage{s}.pgn{j}", dim, cfg.ffn_ratio, cfg.norm == "layer"))
        if cfg.stage_mlg[s]:
            shapes[f"stage{s}.labels"] = (s_count, dim)
        for j in range(cfg.stage_mlg[s]):
            shapes[f"stage{s}.mlg{j}.w_update"] = (2 * dim, dim)
            shapes[f"stage{s}.mlg{j}.adjacency"] = (s_count, s_count)
    last = cfg.dims[-1]
    hidden = cfg.head_hidden_ratio * last
    shapes["head.conv1.weight"] = (last, hidden)
    shapes["head.conv1.bias"] = (hidden,)
    shapes["head.conv2.weight"] = (hidden, s_count)
    shapes["head.conv2.bias"] = (s_count,)
    r = readout_stage(cfg)
    if r is not None:
        shapes["readout"] = (s_count, cfg.dims[r])
    return shapes


_ZERO_INIT = {"bias", "beta", "b_in", "b_update", "b_out", "b1", "b2"}


def _init_array(name: str, shape: tuple[int, ...], rng: np.random.Generator) -> np.ndarray:
    leaf = name.rsplit(".", 1)[-1]
    if leaf == "gamma":
        return np.ones(shape)
    if leaf in _ZERO_INIT:
        return np.zeros(shape)
    if name == "pos_embed":
        return rng.normal(0.0, 0.02, shape)
    if leaf == "labels":
        return rng.normal(0.0, 1.0, shape)
    if leaf == "adjacency":
        return rng.normal(0.0, 0.01, shape)
    if name in ("readout", "head.conv2.weight"):
        # small classifier weights start every class near p = 0.5
        return rng.normal(0.0, 0.02, shape)
    # dense and conv weights: fan-in scaled normal
    return rng.normal(0.0, 1.0 / np.sqrt(shape[0]), shape)


def init_params(cfg: ModelConfig, rng: np.random.Generator | None = None) -> dict[str, T.DiffValue]:
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    return {
        name: T.DiffValue(_init_array(name, shape, rng), requires_grad=True, name=name)
        for name, shape in param_shapes(cfg).items()
    }


@functools.lru_cache(maxsize=16)
def _stage_bias(grid: tuple[int, int], dim: int, sign: float) -> np.ndarray:
    bias = relative_bias(sincos_position_encoding(grid, dim), sign)
    bias.setflags(write=False)
    return bias


class ATGNN:
    """Audio tagging graph network over a ``[frames, bins]`` log-mel input."""

    def __init__(self, config: ModelConfig, params: dict[str, T.DiffValue] | None = None):
        self.config = config.validate()
        expected = param_shapes(config)
        if params is None:
            params = init_params(config)
        if list(params) != list(expected):
            missing = set(expected) ^ set(params)
            raise DimensionError(f"parameter set does not match config: {sorted(missing)[:5]}")
        for name, shape in expected.items():
            if params[name].shape != shape:
                raise DimensionError(f"{name}: expected {shape}, got {params[name].shape}")
        self.params = params

    def parameters(self) -> list[T.DiffValue]:
        return list(self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name, p in self.params.items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
        return h.hexdigest()

    def schedules(self) -> tuple[list[int], list[int]]:
        """Per-PGN-block ``k`` and dilation, in execution order."""
        cfg = self.config
        ks = k_schedule(cfg.base_k, cfg.pgn_depth)
        if cfg.pyramid:
            ds = [cfg.stage_dilation[s] for s, m in enumerate(cfg.stage_pgn) for _ in range(m)]
        else:
            ds = dilation_schedule(cfg.dilation_max, cfg.pgn_depth)
        return ks, ds

    def forward(self, spec_values: np.ndarray) -> ModelOutput:
        cfg, P = self.config, self.params
        values = np.asarray(spec_values, dtype=np.float64)
        if values.shape != (cfg.input_frames, cfg.input_bins):
            raise DimensionError(
                f"input must be {cfg.input_frames} frames x {cfg.input_bins} bins, got {values.shape}"
            )
        values = (values - cfg.input_mean) / cfg.input_std
        x = stem(values, P, len(stem_channels(cfg)), cfg.activation)
        x = add_position(x, P["pos_embed"])
        ks, ds = self.schedules()
        layer = 0
        graphs = []
        labels = None
        for s in range(len(cfg.dims)):
            if s > 0:
                x = downsample(x, P, f"down{s}")
            bias = _stage_bias(x.grid, cfg.relative_dim, cfg.relative_sign) if cfg.pyramid else None
            for j in range(cfg.stage_pgn[s]):
                x, g = pgn_block(x, P, f"stage{s}.pgn{j}", ks[layer], ds[layer], bias, cfg.activation)
                graphs.append(g)
                layer += 1
            if cfg.stage_mlg[s]:
                labels = P[f"stage{s}.labels"]
                for j in range(cfg.stage_mlg[s]):
                    labels = plg_block(labels, x, P[f"stage{s}.mlg{j}.w_update"], cfg.k_plg, cfg.plg_direction)
                    labels = llg_block(labels, P[f"stage{s}.mlg{j}.adjacency"])
        y_patch = patch_logits(x, P, cfg.activation)
        if labels is not None:
            y_label = label_logits(labels, P["readout"])
        else:
            y_label = T.DiffValue(np.zeros(cfg.num_classes))
        return ModelOutput(y_patch, y_label, T.add(y_patch, y_label), labels, x, graphs)

    def loss(self, spec_values: np.ndarray, targets) -> T.DiffValue:
        return T.bce_with_logits(self.forward(spec_values).logits, targets)

    def predict(self, spec_values: np.ndarray) -> np.ndarray:
        """Class probabilities, ``sigmoid(patch + label logits)``."""
        return self.forward(spec_values).probs
