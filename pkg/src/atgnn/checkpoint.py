"""Versioned binary checkpoints.

Layout::

    b"ATGNNCKP"            magic
    u32 LE                 format version
    u64 LE                 header length in bytes
    header                 UTF-8 JSON, sorted keys
    payload                little-endian float64 arrays, back to back

The header carries the model and training configs, the run counters, the
generator state, and an index of ``[name, shape, offset]`` for every
parameter and Adam moment array. Offsets count float64 elements into the
payload.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .config import ModelConfig, TrainConfig, model_config_from_dict, train_config_from_dict
from .errors import DataError
from .model import ATGNN
from .training import Adam, TrainState

MAGIC = b"ATGNNCKP"
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    model: ATGNN
    train_config: TrainConfig
    state: TrainState


def _index(arrays: dict[str, np.ndarray], offset: int) -> tuple[list, list[np.ndarray], int]:
    entries, chunks = [], []
    for name, a in arrays.items():
        entries.append([name, list(a.shape), offset])
        chunks.append(np.ascontiguousarray(a, dtype="<f8").ravel())
        offset += a.size
    return entries, chunks, offset


def to_bytes(model: ATGNN, train_cfg: TrainConfig, state: TrainState) -> bytes:
    params = {k: p.data for k, p in model.params.items()}
    p_idx, p_chunks, off = _index(params, 0)
    m_idx, m_chunks, off = _index(state.adam.m, off)
    v_idx, v_chunks, off = _index(state.adam.v, off)
    header = {
        "format_version": FORMAT_VERSION,
        "model_config": dataclasses.asdict(model.config),
        "train_config": dataclasses.asdict(train_cfg),
        "epoch": state.epoch,
        "step": state.step,
        "rng": state.rng.bit_generator.state,
        "adam": {
            "t": state.adam.t,
            "beta1": state.adam.beta1,
            "beta2": state.adam.beta2,
            "eps": state.adam.eps,
            "m": m_idx,
            "v": v_idx,
        },
        "params": p_idx,
        "payload_length": off,
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    payload = np.concatenate(p_chunks + m_chunks + v_chunks) if off else np.zeros(0, dtype="<f8")
    return MAGIC + struct.pack("<IQ", FORMAT_VERSION, len(head)) + head + payload.astype("<f8").tobytes()


def save(path, model: ATGNN, train_cfg: TrainConfig, state: TrainState) -> None:
    Path(path).write_bytes(to_bytes(model, train_cfg, state))


def _arrays(entries, payload: np.ndarray) -> dict[str, np.ndarray]:
    out = {}
    for name, shape, offset in entries:
        size = int(np.prod(shape, dtype=np.int64))
        if offset + size > payload.size:
            raise DataError(f"checkpoint entry {name} runs past the payload")
        out[name] = payload[offset : offset + size].reshape(shape).copy()
    return out


def from_bytes(raw: bytes, source: str = "<bytes>") -> Checkpoint:
    n = len(MAGIC)
    if raw[:n] != MAGIC:
        raise DataError(f"{source}: not a checkpoint file")
    version, head_len = struct.unpack("<IQ", raw[n : n + 12])
    if version != FORMAT_VERSION:
        raise DataError(f"{source}: checkpoint format {version} is not supported (expected {FORMAT_VERSION})")
    start = n + 12
    try:
        header = json.loads(raw[start : start + head_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataError(f"{source}: corrupt checkpoint header") from exc
    payload = np.frombuffer(raw[start + head_len :], dtype="<f8")
    if payload.size != header["payload_length"]:
        raise DataError(f"{source}: payload has {payload.size} values, header says {header['payload_length']}")
    model_cfg: ModelConfig = model_config_from_dict(header["model_config"])
    train_cfg = train_config_from_dict(header["train_config"])
    params = {
        name: T.DiffValue(a, requires_grad=True, name=name) for name, a in _arrays(header["params"], payload).items()
    }
    model = ATGNN(model_cfg, params)
    a = header["adam"]
    adam = Adam(a["beta1"], a["beta2"], a["eps"], a["t"], _arrays(a["m"], payload), _arrays(a["v"], payload))
    rng = np.random.default_rng()
    rng.bit_generator.state = header["rng"]
    return Checkpoint(model, train_cfg, TrainState(adam, rng, header["epoch"], header["step"]))


def load(path) -> Checkpoint:
    return from_bytes(Path(path).read_bytes(), str(path))
