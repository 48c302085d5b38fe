"""Clip manifests, label vocabularies, synthetic tone datasets, and spectrogram loading.

A manifest is JSON-lines, one ``{"audio": path, "labels": [ids]}`` object per
clip; relative paths resolve against the manifest's directory. The
vocabulary is a JSON array of class names whose positions are the label ids.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dsp import HOP_LENGTH, SAMPLE_RATE, WIN_LENGTH, Waveform, compute_spectrogram, read_wav, write_wav
from .errors import DataError

MAX_SYNTH_CLASSES = 32
BASE_FREQ = 300.0
FREQ_RATIO = 1.3
_LADDER = 12


@dataclass
class ManifestEntry:
    audio: str
    labels: list[int]


def samples_for_frames(frames: int) -> int:
    """Clip length in samples that yields exactly ``frames`` STFT frames."""
    return WIN_LENGTH + (frames - 1) * HOP_LENGTH


def read_vocabulary(path) -> list[str]:
    try:
        names = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid vocabulary JSON ({exc})") from exc
    if not isinstance(names, list) or not all(isinstance(n, str) for n in names):
        raise DataError(f"{path}: vocabulary must be a JSON array of strings")
    if len(set(names)) != len(names):
        raise DataError(f"{path}: duplicate class names")
    return names


def write_vocabulary(path, names: list[str]) -> None:
    Path(path).write_text(json.dumps(names) + "\n")


def read_manifest(path, num_classes: int | None = None) -> list[ManifestEntry]:
    """Parse a JSON-lines manifest; audio paths come back absolute."""
    path = Path(path)
    root = path.parent
    entries = []
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            audio, labels = obj["audio"], obj["labels"]
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise DataError(f"{path}:{lineno}: expected {{audio, labels}} object ({exc})") from exc
        if not isinstance(labels, list) or not all(isinstance(i, int) and i >= 0 for i in labels):
            raise DataError(f"{path}:{lineno}: labels must be a list of non-negative ints")
        if num_classes is not None and any(i >= num_classes for i in labels):
            raise DataError(f"{path}:{lineno}: label id out of range for {num_classes} classes")
        entries.append(ManifestEntry(str((root / audio).resolve()), sorted(set(labels))))
    return entries


def write_manifest(path, entries: list[ManifestEntry]) -> None:
    lines = [json.dumps({"audio": e.audio, "labels": e.labels}) for e in entries]
    Path(path).write_text("\n".join(lines) + "\n")


def label_matrix(entries: list[ManifestEntry], num_classes: int) -> np.ndarray:
    y = np.zeros((len(entries), num_classes))
    for i, e in enumerate(entries):
        y[i, e.labels] = 1.0
    return y


# ---------------------------------------------------------------------------
# synthetic data


def class_frequency(c: int) -> float:
    """Tone frequency of class ``c``.

    Classes 0-11 sit on the ladder ``300 * 1.3**c``. Higher ids would pass
    the Nyquist limit, so classes 12-23 take the ladder midpoints and 24-31
    the quarter points.
    """
    step = c % _LADDER + (c // _LADDER) * 0.5 if c < 2 * _LADDER else (c - 2 * _LADDER) + 0.25
    return BASE_FREQ * FREQ_RATIO**step


def class_signature(c: int, n: int, rng: np.random.Generator) -> np.ndarray:
    """Amplitude-modulated tone; the AM rate (Hz) also depends on the class."""
    t = np.arange(n) / SAMPLE_RATE
    am_rate = 2.0 + 1.5 * (c % 7)
    phase, am_phase = rng.uniform(0, 2 * np.pi, size=2)
    envelope = 0.6 + 0.4 * np.sin(2 * np.pi * am_rate * t + am_phase)
    return envelope * np.sin(2 * np.pi * class_frequency(c) * t + phase)


def synth_clip(labels: list[int], n: int, rng: np.random.Generator) -> np.ndarray:
    signal = sum(class_signature(c, n, rng) for c in labels)
    snr_db = rng.uniform(10.0, 30.0)
    noise_power = np.mean(signal**2) / 10 ** (snr_db / 10)
    x = signal + rng.normal(0.0, np.sqrt(noise_power), n)
    return x * (rng.uniform(0.3, 0.9) / np.max(np.abs(x)))


def generate_synthetic(out_dir, classes: int, count: int, seed: int, frames: int = 64, prefix: str = "clip") -> Path:
    """Write ``count`` multi-label clips, ``manifest.jsonl``, and ``vocabulary.json``.

    Clip ``i`` always contains class ``i mod classes`` plus 0-2 other
    classes, so every class appears and 1-3 labels per clip hold by
    construction. Returns the manifest path.
    """
    if not 1 <= classes <= MAX_SYNTH_CLASSES:
        raise DataError(f"classes must be in [1, {MAX_SYNTH_CLASSES}], got {classes}")
    if count < classes:
        raise DataError(f"count ({count}) must be at least classes ({classes})")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    n = samples_for_frames(frames)
    entries = []
    for i in range(count):
        first = i % classes
        extra = int(rng.integers(0, min(3, classes)))
        others = rng.permutation([c for c in range(classes) if c != first])[:extra]
        labels = sorted([first, *map(int, others)])
        name = f"{prefix}_{i:05d}.wav"
        write_wav(out / name, Waveform(synth_clip(labels, n, rng)))
        entries.append(ManifestEntry(name, labels))
    manifest = out / "manifest.jsonl"
    write_manifest(manifest, entries)
    write_vocabulary(out / "vocabulary.json", [f"tone_{class_frequency(c):.0f}hz" for c in range(classes)])
    return manifest


# ---------------------------------------------------------------------------
# loading


@dataclass
class ClipDataset:
    specs: np.ndarray  # [n, frames, bins]
    targets: np.ndarray  # [n, S]
    paths: list[str]

    def __len__(self) -> int:
        return self.specs.shape[0]

    def normalization(self) -> tuple[float, float]:
        return float(self.specs.mean()), float(self.specs.std())


def load_dataset(manifest, num_classes: int, frames: int, n_mels: int) -> ClipDataset:
    """Read every clip of a manifest into fixed-size log-mel spectrograms, in manifest order."""
    entries = read_manifest(manifest, num_classes)
    if not entries:
        raise DataError(f"{manifest}: manifest is empty")
    specs = np.empty((len(entries), frames, n_mels))
    for i, e in enumerate(entries):
        if not Path(e.audio).is_file():
            raise FileNotFoundError(f"{e.audio}: audio file listed in {manifest} not found")
        specs[i] = compute_spectrogram(read_wav(e.audio), frames, n_mels).values
    return ClipDataset(specs, label_matrix(entries, num_classes), [e.audio for e in entries])
