"""Waveform to padded log-mel spectrogram.

16 kHz mono input, 25 ms Hann window (400 samples), 10 ms hop (160),
zero-padded 512-point FFT, HTK mel filterbank over 0-8000 Hz, natural log
with a 1e-10 energy floor.
"""

from __future__ import annotations

import functools
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.io import wavfile

from .errors import DataError

SAMPLE_RATE = 16000
WIN_LENGTH = 400
HOP_LENGTH = 160
N_FFT = 512
N_MELS = 128
LOG_FLOOR = 1e-10
SPEC_MAGIC = b"ATSPEC1"


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise DataError(f"expected mono samples, got shape {self.samples.shape}")
        if self.sample_rate != SAMPLE_RATE:
            raise DataError(
                f"sample rate {self.sample_rate} Hz not supported; resample to {SAMPLE_RATE} Hz first"
            )


@dataclass
class Spectrogram:
    values: np.ndarray  # [frames, bins]
    frame_hop: float = HOP_LENGTH / SAMPLE_RATE
    pad_mask: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.pad_mask is None:
            self.pad_mask = np.zeros(self.values.shape[0], dtype=bool)

    @property
    def frames(self) -> int:
        return self.values.shape[0]

    @property
    def bins(self) -> int:
        return self.values.shape[1]


def stft_magnitude(
    wave: Waveform, win_length: int = WIN_LENGTH, hop: int = HOP_LENGTH, n_fft: int = N_FFT
) -> tuple[np.ndarray, dict]:
    """Magnitude STFT, ``[frames, n_fft // 2 + 1]``, no centering.

    Inputs shorter than one window are zero-padded to one window; the
    returned metadata then carries ``{"padded_short_input": True}``.
    """
    x = wave.samples
    if x.size == 0:
        raise DataError("empty waveform")
    meta = {}
    if x.size < win_length:
        x = np.concatenate([x, np.zeros(win_length - x.size)])
        meta["padded_short_input"] = True
    frames = 1 + (x.size - win_length) // hop
    idx = np.arange(win_length)[None, :] + hop * np.arange(frames)[:, None]
    window = np.hanning(win_length + 1)[:-1]  # periodic Hann
    spec = np.fft.rfft(x[idx] * window, n=n_fft, axis=1)
    return np.abs(spec), meta


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@functools.lru_cache(maxsize=8)
def mel_filterbank(
    n_mels: int = N_MELS, n_fft: int = N_FFT, sr: int = SAMPLE_RATE, fmin: float = 0.0, fmax: float = 8000.0
) -> np.ndarray:
    """Triangular HTK-scale filters, ``[n_mels, n_fft // 2 + 1]``, unit peak height."""
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    freqs = np.arange(n_fft // 2 + 1) * sr / n_fft
    lower, center, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs - lower) / (center - lower)
    falling = (upper - freqs) / (upper - center)
    fb = np.maximum(0.0, np.minimum(rising, falling))
    # filters narrower than the FFT bin spacing can fall between bins; give them the nearest bin
    empty = np.flatnonzero(fb.sum(axis=1) == 0)
    fb[empty, np.rint(center[empty, 0] * n_fft / sr).astype(int)] = 1.0
    fb.setflags(write=False)
    return fb


def mel_center_frequencies(n_mels: int = N_MELS, fmin: float = 0.0, fmax: float = 8000.0) -> np.ndarray:
    return mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))[1:-1]


def log_mel(mag: np.ndarray, n_mels: int = N_MELS, n_fft: int = N_FFT) -> np.ndarray:
    """``ln(max(power @ filters.T, 1e-10))`` with power = magnitude squared."""
    mag = np.asarray(mag, dtype=np.float64)
    if np.any(mag < 0):
        raise ValueError("magnitudes must be non-negative")
    energy = (mag * mag) @ mel_filterbank(n_mels, n_fft).T
    return np.log(np.maximum(energy, LOG_FLOOR))


def pad_or_trim(spec: Spectrogram, target_frames: int) -> Spectrogram:
    """Pad with the log floor (silence) or truncate to ``target_frames``."""
    if target_frames <= 0:
        raise ValueError(f"target_frames must be positive, got {target_frames}")
    n = spec.frames
    if n >= target_frames:
        return Spectrogram(
            spec.values[:target_frames].copy(), spec.frame_hop, spec.pad_mask[:target_frames].copy(), dict(spec.meta)
        )
    pad = np.full((target_frames - n, spec.bins), np.log(LOG_FLOOR))
    mask = np.concatenate([spec.pad_mask, np.ones(target_frames - n, dtype=bool)])
    return Spectrogram(np.vstack([spec.values, pad]), spec.frame_hop, mask, dict(spec.meta))


def compute_spectrogram(wave: Waveform, target_frames: int | None = None, n_mels: int = N_MELS) -> Spectrogram:
    mag, meta = stft_magnitude(wave)
    spec = Spectrogram(log_mel(mag, n_mels), meta=meta)
    if target_frames is not None:
        spec = pad_or_trim(spec, target_frames)
    return spec


def read_wav(path) -> Waveform:
    """Read mono 16 kHz PCM-16 or float32 WAV into [-1, 1] samples."""
    try:
        rate, data = wavfile.read(path)
    except ValueError as exc:
        raise DataError(f"{path}: unreadable WAV ({exc})") from exc
    if data.ndim != 1:
        raise DataError(f"{path}: expected mono audio, got {data.shape[1]} channels")
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype == np.float32:
        samples = data.astype(np.float64)
    else:
        raise DataError(f"{path}: unsupported sample format {data.dtype}")
    if rate != SAMPLE_RATE:
        raise DataError(f"{path}: sample rate {rate} Hz, expected {SAMPLE_RATE} Hz (resampling is not supported)")
    return Waveform(samples, rate)


def write_wav(path, wave: Waveform, float32: bool = False) -> None:
    if float32:
        wavfile.write(path, wave.sample_rate, wave.samples.astype(np.float32))
    else:
        pcm = np.clip(np.round(wave.samples * 32768.0), -32768, 32767).astype(np.int16)
        wavfile.write(path, wave.sample_rate, pcm)


def save_spectrogram(path, spec: Spectrogram) -> None:
    """Flat cache file: ``ATSPEC1``, u32 frames, u32 bins, row-major f32 values."""
    header = SPEC_MAGIC + struct.pack("<II", spec.frames, spec.bins)
    Path(path).write_bytes(header + spec.values.astype("<f4").tobytes())


def load_spectrogram(path) -> Spectrogram:
    raw = Path(path).read_bytes()
    n = len(SPEC_MAGIC)
    if raw[:n] != SPEC_MAGIC:
        raise DataError(f"{path}: not a cached spectrogram")
    frames, bins = struct.unpack("<II", raw[n : n + 8])
    body = np.frombuffer(raw[n + 8 :], dtype="<f4")
    if body.size != frames * bins:
        raise DataError(f"{path}: expected {frames * bins} values, found {body.size}")
    return Spectrogram(body.reshape(frames, bins).astype(np.float64))
