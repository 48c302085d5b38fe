import hashlib
import json

import numpy as np
import pytest

from atgnn.data import (
    ManifestEntry,
    class_frequency,
    generate_synthetic,
    label_matrix,
    load_dataset,
    read_manifest,
    read_vocabulary,
    samples_for_frames,
    write_manifest,
)
from atgnn.dsp import compute_spectrogram, read_wav, stft_magnitude
from atgnn.errors import DataError


def tree_hashes(root):
    return {p.name: hashlib.sha256(p.read_bytes()).hexdigest() for p in sorted(root.iterdir())}


class TestSynthetic:
    def test_deterministic_files(self, tmp_path):
        generate_synthetic(tmp_path / "a", 4, 16, 7)
        generate_synthetic(tmp_path / "b", 4, 16, 7)
        ha, hb = tree_hashes(tmp_path / "a"), tree_hashes(tmp_path / "b")
        assert len(ha) == 18 and ha == hb
        generate_synthetic(tmp_path / "c", 4, 16, 8)
        assert tree_hashes(tmp_path / "c") != ha

    def test_label_counts_and_coverage(self, tmp_path):
        entries = read_manifest(generate_synthetic(tmp_path, 8, 40, 0), 8)
        assert len(entries) == 40
        assert all(1 <= len(e.labels) <= 3 for e in entries)
        assert set().union(*(e.labels for e in entries)) == set(range(8))

    def test_clip_length_gives_frames(self, tmp_path):
        entries = read_manifest(generate_synthetic(tmp_path, 2, 2, 0, frames=64))
        wave = read_wav(entries[0].audio)
        assert wave.samples.size == samples_for_frames(64)
        assert stft_magnitude(wave)[0].shape[0] == 64
        assert np.max(np.abs(wave.samples)) <= 0.9 + 1 / 32768

    def test_frequencies_distinct_below_nyquist(self):
        freqs = [class_frequency(c) for c in range(32)]
        assert len(set(freqs)) == 32
        assert max(freqs) < 8000
        assert class_frequency(0) == 300.0
        assert class_frequency(3) == pytest.approx(300 * 1.3**3, rel=1e-15)

    def test_tone_energy_at_class_frequency(self):
        from atgnn.data import class_signature

        x = class_signature(5, 16000, np.random.default_rng(0))
        mag = np.abs(np.fft.rfft(x))
        peak_hz = np.argmax(mag) * 16000 / x.size
        assert abs(peak_hz - class_frequency(5)) <= 1.0

    def test_learnable_single_label(self, tmp_path):
        manifest = generate_synthetic(tmp_path, 4, 96, 3)
        entries = read_manifest(manifest, 4)
        feats, signs = [], []
        for e in entries:
            if e.labels in ([0], [3]):
                spec = compute_spectrogram(read_wav(e.audio), 64, 64).values
                feats.append(np.append(spec.mean(axis=0), 1.0))
                signs.append(1.0 if e.labels == [0] else -1.0)
        X, y = np.array(feats), np.array(signs)
        assert (y > 0).sum() >= 3 and (y < 0).sum() >= 3
        w, *_ = np.linalg.lstsq(X, y, rcond=None)
        assert np.all(np.sign(X @ w) == y)

    def test_bad_arguments(self, tmp_path):
        with pytest.raises(DataError):
            generate_synthetic(tmp_path, 33, 40, 0)
        with pytest.raises(DataError):
            generate_synthetic(tmp_path, 8, 4, 0)


class TestManifest:
    def test_round_trip(self, tmp_path):
        entries = [ManifestEntry("a.wav", [0, 2]), ManifestEntry("sub/b.wav", [1])]
        write_manifest(tmp_path / "m.jsonl", entries)
        back = read_manifest(tmp_path / "m.jsonl", 3)
        assert [e.labels for e in back] == [[0, 2], [1]]
        assert back[1].audio == str((tmp_path / "sub" / "b.wav").resolve())

    def test_label_out_of_range(self, tmp_path):
        (tmp_path / "m.jsonl").write_text(json.dumps({"audio": "a.wav", "labels": [5]}) + "\n")
        with pytest.raises(DataError, match="m.jsonl:1"):
            read_manifest(tmp_path / "m.jsonl", 3)

    def test_malformed_line(self, tmp_path):
        (tmp_path / "m.jsonl").write_text('{"audio": "a.wav"}\n')
        with pytest.raises(DataError):
            read_manifest(tmp_path / "m.jsonl")

    def test_missing_audio(self, tmp_path):
        write_manifest(tmp_path / "m.jsonl", [ManifestEntry("gone.wav", [0])])
        with pytest.raises(FileNotFoundError, match="gone.wav"):
            load_dataset(tmp_path / "m.jsonl", 2, 64, 64)

    def test_vocabulary(self, tmp_path):
        (tmp_path / "v.json").write_text('["dog", "cat"]')
        assert read_vocabulary(tmp_path / "v.json") == ["dog", "cat"]
        (tmp_path / "v.json").write_text('["dog", "dog"]')
        with pytest.raises(DataError):
            read_vocabulary(tmp_path / "v.json")
        (tmp_path / "v.json").write_text('{"dog": 0}')
        with pytest.raises(DataError):
            read_vocabulary(tmp_path / "v.json")

    def test_label_matrix(self):
        y = label_matrix([ManifestEntry("a", [0, 2]), ManifestEntry("b", [1])], 3)
        np.testing.assert_array_equal(y, [[1, 0, 1], [0, 1, 0]])

    def test_load_dataset_in_manifest_order(self, tmp_path):
        manifest = generate_synthetic(tmp_path, 3, 5, 0)
        ds = load_dataset(manifest, 3, 64, 32)
        assert ds.specs.shape == (5, 64, 32) and len(ds) == 5
        assert [p.rsplit("/", 1)[-1] for p in ds.paths] == [f"clip_{i:05d}.wav" for i in range(5)]
        one = compute_spectrogram(read_wav(ds.paths[2]), 64, 32).values
        np.testing.assert_array_equal(ds.specs[2], one)
