"""Model and training configuration, presets, and the on-disk config format.

Config files are INI-style with ``[model]``, ``[train]`` and ``[data]``
sections; every value is a JSON literal (``dims = [32]``, ``variant =
"isotropic"``). Unknown keys are rejected so typos surface as errors.
"""

from __future__ import annotations

import configparser
import dataclasses
import io
import json
from dataclasses import dataclass, field, fields

from .errors import ConfigError

VARIANTS = ("isotropic", "pyramid-s", "pyramid-med")


@dataclass
class ModelConfig:
    variant: str = "isotropic"
    input_bins: int = 128
    input_frames: int = 1024
    stage_pgn: list[int] = field(default_factory=lambda: [16])
    stage_mlg: list[int] = field(default_factory=lambda: [1])
    dims: list[int] = field(default_factory=lambda: [320])
    num_classes: int = 200
    base_k: int = 9
    k_plg: int = 9
    dilation_max: int = 4
    stage_dilation: list[int] = field(default_factory=lambda: [1, 1, 2, 2])
    ffn_ratio: int = 4
    head_hidden_ratio: int = 2
    activation: str = "gelu"
    norm: str = "layer"
    relative_dim: int = 16
    relative_sign: float = 1.0
    plg_direction: str = "center_minus_neighbor"
    input_mean: float = 0.0
    input_std: float = 1.0
    seed: int = 0

    @property
    def pyramid(self) -> bool:
        return self.variant != "isotropic"

    @property
    def reduction(self) -> int:
        """Spatial reduction of the stem (patch size)."""
        return 4 if self.pyramid else 16

    @property
    def total_reduction(self) -> int:
        return self.reduction * 2 ** (len(self.dims) - 1)

    @property
    def pgn_depth(self) -> int:
        return sum(self.stage_pgn)

    def validate(self) -> "ModelConfig":
        if self.variant not in VARIANTS:
            raise ConfigError("variant", f"must be one of {VARIANTS}, got {self.variant!r}")
        n = len(self.dims)
        if n == 0 or any(d <= 0 for d in self.dims):
            raise ConfigError("dims", "need at least one positive stage dimension")
        if len(self.stage_pgn) != n:
            raise ConfigError("stage_pgn", f"expected {n} entries to match dims")
        if len(self.stage_mlg) != n:
            raise ConfigError("stage_mlg", f"expected {n} entries to match dims")
        if any(m < 0 for m in self.stage_pgn + self.stage_mlg):
            raise ConfigError("stage_pgn", "block counts must be non-negative")
        if not self.pyramid and n != 1:
            raise ConfigError("dims", "isotropic variant has a single stage")
        if self.pyramid and len(self.stage_dilation) < n:
            raise ConfigError("stage_dilation", f"need {n} entries for the pyramid stages")
        for name in ("num_classes", "base_k", "k_plg", "dilation_max", "ffn_ratio", "head_hidden_ratio"):
            if getattr(self, name) < 1:
                raise ConfigError(name, "must be >= 1")
        for name in ("input_bins", "input_frames"):
            v = getattr(self, name)
            if v <= 0 or v % self.total_reduction:
                raise ConfigError(name, f"must be a positive multiple of {self.total_reduction}, got {v}")
        if self.activation not in ("gelu", "relu"):
            raise ConfigError("activation", "must be 'gelu' or 'relu'")
        if self.norm not in ("layer", "none"):
            raise ConfigError("norm", "must be 'layer' or 'none'")
        if self.plg_direction not in ("center_minus_neighbor", "neighbor_minus_center"):
            raise ConfigError("plg_direction", "unknown difference direction")
        if self.relative_dim % 4:
            raise ConfigError("relative_dim", "must be a multiple of 4")
        if self.input_std <= 0:
            raise ConfigError("input_std", "must be positive")
        return self


@dataclass
class TrainConfig:
    lr0: float = 5e-4
    warmup_iters: int = 1000
    lr_decay_start: int = 10
    lr_decay_every: int = 5
    epochs: int = 50
    batch_size: int = 24
    steps_per_epoch: int | None = None
    mixup_prob: float = 0.5
    mixup_alpha: float = 10.0
    max_time_mask: int = 192
    max_freq_mask: int = 48
    augment: bool = True
    balanced_sampling: bool = True
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0

    def validate(self, model: ModelConfig | None = None) -> "TrainConfig":
        if self.lr0 < 0:
            raise ConfigError("lr0", "must be non-negative")
        for name in ("warmup_iters", "lr_decay_start", "epochs", "max_time_mask", "max_freq_mask"):
            if getattr(self, name) < 0:
                raise ConfigError(name, "must be non-negative")
        for name in ("lr_decay_every", "batch_size"):
            if getattr(self, name) < 1:
                raise ConfigError(name, "must be >= 1")
        if self.steps_per_epoch is not None and self.steps_per_epoch < 1:
            raise ConfigError("steps_per_epoch", "must be >= 1 or null")
        if not 0 <= self.mixup_prob <= 1:
            raise ConfigError("mixup_prob", "must be in [0, 1]")
        if self.mixup_alpha <= 0:
            raise ConfigError("mixup_alpha", "must be positive")
        if model is not None:
            if self.max_time_mask > model.input_frames:
                raise ConfigError("max_time_mask", f"exceeds input_frames={model.input_frames}")
            if self.max_freq_mask > model.input_bins:
                raise ConfigError("max_freq_mask", f"exceeds input_bins={model.input_bins}")
        return self


@dataclass
class DataConfig:
    train_manifest: str = ""
    eval_manifest: str = ""
    vocabulary: str = ""
    out_dir: str = "runs/default"

    def validate(self) -> "DataConfig":
        return self


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def validate(self) -> "RunConfig":
        self.model.validate()
        self.train.validate(self.model)
        self.data.validate()
        return self


# ---------------------------------------------------------------------------
# presets


def tiny_model(num_classes: int = 8, base_k: int = 9, seed: int = 0) -> ModelConfig:
    """Desk-scale network: 64x64 input, D=32, two PGN blocks and one MLG block."""
    return ModelConfig(
        variant="isotropic",
        input_bins=64,
        input_frames=64,
        stage_pgn=[2],
        stage_mlg=[1],
        dims=[32],
        num_classes=num_classes,
        base_k=base_k,
        k_plg=9,
        dilation_max=4,
        seed=seed,
    ).validate()


def pyramid_s(num_classes: int = 200) -> ModelConfig:
    return ModelConfig(
        variant="pyramid-s",
        stage_pgn=[2, 2, 6, 2],
        stage_mlg=[1, 1, 3, 1],
        dims=[80, 160, 400, 640],
        stage_dilation=[1, 1, 2, 2],
        num_classes=num_classes,
    ).validate()


def pyramid_med(num_classes: int = 200) -> ModelConfig:
    return ModelConfig(
        variant="pyramid-med",
        stage_pgn=[2, 2, 16, 2],
        stage_mlg=[1, 1, 6, 1],
        dims=[96, 192, 384, 768],
        stage_dilation=[1, 1, 2, 2],
        num_classes=num_classes,
    ).validate()


def isotropic(num_classes: int = 200) -> ModelConfig:
    return ModelConfig(num_classes=num_classes).validate()


def tiny_train(**overrides) -> TrainConfig:
    """Training settings scaled to the 64-frame, 64-bin tiny input."""
    cfg = TrainConfig(
        lr0=2e-3,
        warmup_iters=20,
        lr_decay_start=20,
        lr_decay_every=5,
        epochs=30,
        batch_size=16,
        max_time_mask=12,
        max_freq_mask=8,
    )
    return dataclasses.replace(cfg, **overrides).validate()


PRESETS = {
    "tiny": tiny_model,
    "isotropic": isotropic,
    "pyramid-s": pyramid_s,
    "pyramid-med": pyramid_med,
}


# ---------------------------------------------------------------------------
# file format

_SECTIONS = {"model": ModelConfig, "train": TrainConfig, "data": DataConfig}


def _from_section(cls, items: dict[str, str], section: str):
    known = {f.name for f in fields(cls)}
    kwargs = {}
    for key, raw in items.items():
        if key not in known:
            raise ConfigError(f"{section}.{key}", "unknown key")
        try:
            kwargs[key] = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{section}.{key}", f"value is not a JSON literal: {raw!r}") from exc
    try:
        obj = cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(section, str(exc)) from exc
    for f in fields(cls):
        value = getattr(obj, f.name)
        _check_type(section, f, value)
        if isinstance(f.default, float) and isinstance(value, int):
            setattr(obj, f.name, float(value))
    return obj


def _check_type(section: str, f, value) -> None:
    default = f.default_factory() if f.default_factory is not dataclasses.MISSING else f.default
    name = f"{section}.{f.name}"
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
    elif isinstance(default, str):
        ok = isinstance(value, str)
    elif isinstance(default, list):
        ok = isinstance(value, list) and all(isinstance(v, int) and not isinstance(v, bool) for v in value)
    else:  # Optional[int]
        ok = value is None or (isinstance(value, int) and not isinstance(value, bool))
    if not ok:
        raise ConfigError(name, f"wrong type {type(value).__name__}")


def parse_config(text: str) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str  # keep key case
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError("file", str(exc).splitlines()[0]) from exc
    for section in parser.sections():
        if section not in _SECTIONS:
            raise ConfigError(section, "unknown section")
    parts = {
        name: _from_section(cls, dict(parser[name]) if parser.has_section(name) else {}, name)
        for name, cls in _SECTIONS.items()
    }
    return RunConfig(**parts).validate()


def serialize_config(cfg: RunConfig) -> str:
    out = io.StringIO()
    for name in _SECTIONS:
        out.write(f"[{name}]\n")
        for key, value in dataclasses.asdict(getattr(cfg, name)).items():
            out.write(f"{key} = {json.dumps(value)}\n")
        out.write("\n")
    return out.getvalue()


def load_config(path) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())


def model_config_from_dict(d: dict) -> ModelConfig:
    return _from_section(ModelConfig, {k: json.dumps(v) for k, v in d.items()}, "model").validate()


def train_config_from_dict(d: dict) -> TrainConfig:
    return _from_section(TrainConfig, {k: json.dumps(v) for k, v in d.items()}, "train").validate()
