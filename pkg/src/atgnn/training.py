"""Augmentation, balanced sampling, Adam, learning-rate schedule, and the training loop.

All randomness during training comes from one ``numpy.random.Generator``
held in :class:`TrainState`, so a run is reproducible from its seed and
resumable from a saved state.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .config import TrainConfig
from .data import ClipDataset
from .errors import DataError, DimensionError, NumericError
from .metrics import mean_average_precision
from .model import ATGNN

# ---------------------------------------------------------------------------
# augmentation


def mix(spec_a, y_a, spec_b, y_b, lam: float):
    """Convex combination ``lam * a + (1 - lam) * b`` of spectrograms and labels."""
    spec_a, spec_b = np.asarray(spec_a, dtype=np.float64), np.asarray(spec_b, dtype=np.float64)
    if spec_a.shape != spec_b.shape:
        raise DimensionError(f"mixup needs equal spectrogram shapes, got {spec_a.shape} and {spec_b.shape}")
    y_a, y_b = np.asarray(y_a, dtype=np.float64), np.asarray(y_b, dtype=np.float64)
    if y_a.shape != y_b.shape:
        raise DimensionError(f"mixup needs equal label shapes, got {y_a.shape} and {y_b.shape}")
    return lam * spec_a + (1 - lam) * spec_b, lam * y_a + (1 - lam) * y_b


def mixup(spec_a, y_a, spec_b, y_b, rng: np.random.Generator, prob: float = 0.5, alpha: float = 10.0):
    """With probability ``1 - prob`` return sample a; otherwise mix with ``lam ~ Beta(alpha, alpha)``.

    Returns ``(spec, labels, lam)``; ``lam`` is 1.0 when no mixing happened.
    """
    if rng.random() >= prob:
        spec, y = mix(spec_a, y_a, spec_b, y_b, 1.0)
        return spec, y, 1.0
    lam = float(rng.beta(alpha, alpha))
    spec, y = mix(spec_a, y_a, spec_b, y_b, lam)
    return spec, y, lam


def apply_masks(spec, t0: int, t_width: int, f0: int, f_width: int) -> np.ndarray:
    """Fill one time band and one frequency band with the spectrogram mean."""
    out = np.array(spec, dtype=np.float64, copy=True)
    fill = out.mean()
    out[t0 : t0 + t_width, :] = fill
    out[:, f0 : f0 + f_width] = fill
    return out


def time_freq_mask(spec, rng: np.random.Generator, max_t: int = 192, max_f: int = 48) -> np.ndarray:
    """One time mask and one frequency mask; widths uniform on ``{0..max}``, positions uniform."""
    frames, bins = np.shape(spec)
    t_width = int(rng.integers(0, min(max_t, frames) + 1))
    f_width = int(rng.integers(0, min(max_f, bins) + 1))
    t0 = int(rng.integers(0, frames - t_width + 1))
    f0 = int(rng.integers(0, bins - f_width + 1))
    return apply_masks(spec, t0, t_width, f0, f_width)


def balanced_weights(labels) -> np.ndarray:
    """Per-clip sampling weight: the largest inverse class frequency among its labels."""
    y = np.asarray(labels) > 0.5
    empty = np.flatnonzero(~y.any(axis=1))
    if empty.size:
        raise DataError(f"clip {int(empty[0])} has no labels; balanced sampling needs at least one")
    freq = y.sum(axis=0)
    inv = np.divide(1.0, freq, out=np.zeros(freq.shape), where=freq > 0)
    return np.max(np.where(y, inv, 0.0), axis=1)


# ---------------------------------------------------------------------------
# loss and schedule


def bce_loss(probs, targets) -> float:
    """Mean binary cross-entropy of probabilities against (soft) targets."""
    p = np.asarray(probs, dtype=np.float64)
    t = np.asarray(targets, dtype=np.float64)
    if p.shape != t.shape:
        raise DimensionError(f"probs {p.shape} vs targets {t.shape}")
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(t > 0, t * np.log(p), 0.0) + np.where(t < 1, (1 - t) * np.log1p(-p), 0.0)
    loss = -float(np.mean(terms))
    if not math.isfinite(loss):
        raise NumericError("binary cross-entropy is not finite (probabilities at 0 or 1)")
    return loss


def halvings(epoch: int, cfg: TrainConfig) -> int:
    """Schedule points passed: epochs ``start + every * m`` for ``m >= 1``."""
    if epoch <= cfg.lr_decay_start:
        return 0
    return (epoch - cfg.lr_decay_start) // cfg.lr_decay_every


def lr_at(step: int, epoch: int, cfg: TrainConfig) -> float:
    """Linear warmup over the first ``warmup_iters`` steps, then halvings by epoch."""
    if step < 0 or epoch < 0:
        raise ValueError("step and epoch must be non-negative")
    warm = 1.0 if cfg.warmup_iters == 0 else min(1.0, step / cfg.warmup_iters)
    return cfg.lr0 * warm * 0.5 ** halvings(epoch, cfg)


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class Adam:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def step(self, params: dict[str, T.DiffValue], lr: float) -> None:
        """One bias-corrected Adam update; parameters without a gradient see a zero gradient."""
        self.t += 1
        c1 = 1 - self.beta1**self.t
        c2 = 1 - self.beta2**self.t
        for name, p in params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if name not in self.m:
                self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# ---------------------------------------------------------------------------
# loop


@dataclass
class TrainState:
    adam: Adam
    rng: np.random.Generator
    epoch: int = 0
    step: int = 0

    @classmethod
    def fresh(cls, cfg: TrainConfig) -> "TrainState":
        return cls(Adam(cfg.beta1, cfg.beta2, cfg.adam_eps), np.random.default_rng(cfg.seed))


@dataclass
class EpochStats:
    epoch: int
    step: int
    lr: float
    loss: float
    val_map: float | None = None

    def to_json(self) -> str:
        return json.dumps({"epoch": self.epoch, "step": self.step, "lr": self.lr, "loss": self.loss, "val_mAP": self.val_map})


def steps_in_epoch(n: int, cfg: TrainConfig) -> int:
    return cfg.steps_per_epoch or math.ceil(n / cfg.batch_size)


def draw_batches(n: int, weights: np.ndarray | None, cfg: TrainConfig, rng: np.random.Generator) -> list[np.ndarray]:
    """Index batches for one epoch: weighted with replacement, or a shuffled pass."""
    steps = steps_in_epoch(n, cfg)
    if weights is not None:
        p = weights / weights.sum()
        return [rng.choice(n, size=cfg.batch_size, replace=True, p=p) for _ in range(steps)]
    order = np.concatenate([rng.permutation(n) for _ in range(math.ceil(steps * cfg.batch_size / n))])
    return [order[i * cfg.batch_size : (i + 1) * cfg.batch_size] for i in range(steps)]


def prepare_sample(i: int, data: ClipDataset, cfg: TrainConfig, rng: np.random.Generator):
    spec, y = data.specs[i], data.targets[i]
    if not cfg.augment:
        return spec, y
    j = int(rng.integers(len(data)))
    spec, y, _ = mixup(spec, y, data.specs[j], data.targets[j], rng, cfg.mixup_prob, cfg.mixup_alpha)
    return time_freq_mask(spec, rng, cfg.max_time_mask, cfg.max_freq_mask), y


def train_step(model: ATGNN, batch, state: TrainState, lr: float) -> float:
    """Accumulate gradients over ``batch`` (a list of (spec, target)), then one Adam update."""
    model.zero_grad()
    total = 0.0
    scale = 1.0 / len(batch)
    for k, (spec, y) in enumerate(batch):
        with T.Tape() as tape:
            try:
                loss = model.loss(spec, y)
            except NumericError as exc:
                raise NumericError(f"epoch {state.epoch}, step {state.step}, batch item {k}: {exc}") from exc
            tape.backward(T.scale(loss, scale))
        total += float(loss.data)
    for name, p in model.params.items():
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            raise NumericError(f"non-finite gradient in {name} at epoch {state.epoch}, step {state.step}")
    state.adam.step(model.params, lr)
    state.step += 1
    return total * scale


def train_epoch(model: ATGNN, data: ClipDataset, cfg: TrainConfig, state: TrainState) -> EpochStats:
    weights = balanced_weights(data.targets) if cfg.balanced_sampling else None
    losses = []
    lr = 0.0
    for idx in draw_batches(len(data), weights, cfg, state.rng):
        batch = [prepare_sample(int(i), data, cfg, state.rng) for i in idx]
        lr = lr_at(state.step + 1, state.epoch, cfg)
        losses.append(train_step(model, batch, state, lr))
    state.epoch += 1
    return EpochStats(state.epoch, state.step, lr, float(np.mean(losses)))


def predict_scores(model: ATGNN, data: ClipDataset) -> np.ndarray:
    return np.stack([model.predict(s) for s in data.specs])


def evaluate_model(model: ATGNN, data: ClipDataset) -> tuple[float, float]:
    """(mean BCE, mAP) of the model on a dataset, without augmentation."""
    scores = predict_scores(model, data)
    return bce_loss(scores, data.targets), mean_average_precision(scores, data.targets)


def fit(
    model: ATGNN,
    train: ClipDataset,
    cfg: TrainConfig,
    state: TrainState | None = None,
    val: ClipDataset | None = None,
    log_path=None,
    until_epoch: int | None = None,
    on_epoch=None,
) -> TrainState:
    """Train from ``state.epoch`` up to ``until_epoch`` (default ``cfg.epochs``).

    One JSON line per epoch is appended to ``log_path``; ``on_epoch(state,
    stats)`` runs after each epoch (checkpointing hooks in here).
    """
    state = state or TrainState.fresh(cfg)
    end = cfg.epochs if until_epoch is None else until_epoch
    while state.epoch < end:
        stats = train_epoch(model, train, cfg, state)
        if val is not None:
            stats.val_map = evaluate_model(model, val)[1]
        if log_path is not None:
            with Path(log_path).open("a") as fh:
                fh.write(stats.to_json() + "\n")
        if on_epoch is not None:
            on_epoch(state, stats)
    return state
