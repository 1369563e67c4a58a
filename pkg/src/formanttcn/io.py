"""WAV, manifest and binary feature-cache I/O."""
from __future__ import annotations

import os
import struct
import wave
from pathlib import Path

import numpy as np

from .dsp import AudioClip, FeatureMatrix, FEATURE_DIM, NormStats

FEATURE_MAGIC = b"FTCNFEAT"
NORM_MAGIC = b"FTCNNORM"
FORMAT_VERSION = 1


class DataFormatError(ValueError):
    pass


class SampleRateError(DataFormatError):
    pass


def read_wav(path, expected_rate=16000, allow_any_rate=False) -> AudioClip:
    with wave.open(str(path), "rb") as w:
        if w.getnchannels() != 1:
            raise DataFormatError(f"{path}: expected mono audio, got {w.getnchannels()} channels")
        if w.getsampwidth() != 2:
            raise DataFormatError(f"{path}: expected 16-bit PCM")
        rate = w.getframerate()
        raw = w.readframes(w.getnframes())
    if rate != expected_rate and not allow_any_rate:
        raise SampleRateError(f"{path}: sample rate {rate} Hz, expected {expected_rate} Hz "
                              "(pass --allow-any-rate to analyse at the native rate)")
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    return AudioClip(samples, rate)


def to_pcm16(samples):
    return np.clip(np.round(np.asarray(samples) * 32768.0), -32768, 32767).astype("<i2")


def write_wav(path, clip: AudioClip):
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(int(clip.sample_rate))
        w.writeframes(to_pcm16(clip.samples).tobytes())


def read_manifest(path):
    """List of (audio_path, labels_path); relative paths resolve against the manifest."""
    base = Path(path).parent
    entries = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = [p.strip() for p in line.split(",")]
        if len(parts) != 2:
            raise DataFormatError(f"{path}:{lineno}: expected 'audio_path, labels_path'")
        entries.append(tuple(p if os.path.isabs(p) else str(base / p) for p in parts))
    if not entries:
        raise DataFormatError(f"{path}: empty manifest")
    return entries


def write_manifest(path, entries):
    base = Path(path).parent
    with open(path, "w") as fh:
        for audio, labels in entries:
            fh.write(f"{os.path.relpath(audio, base)}, {os.path.relpath(labels, base)}\n")


def _atomic_write(path, data: bytes):
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def write_features(path, feats: FeatureMatrix):
    """Magic + version (16 bytes), T as uint64, float32 T x 350, then T mask bytes."""
    values = np.ascontiguousarray(feats.values, dtype="<f4")
    header = FEATURE_MAGIC + struct.pack("<II", FORMAT_VERSION, values.shape[1])
    body = struct.pack("<Q", len(values)) + values.tobytes() + feats.mask.astype(np.uint8).tobytes()
    _atomic_write(path, header + body)


def read_features(path) -> FeatureMatrix:
    data = Path(path).read_bytes()
    if data[:8] != FEATURE_MAGIC:
        raise DataFormatError(f"{path}: bad magic")
    version, dim = struct.unpack_from("<II", data, 8)
    if version != FORMAT_VERSION:
        raise DataFormatError(f"{path}: unsupported feature version {version}")
    (n,) = struct.unpack_from("<Q", data, 16)
    start = 24
    need = start + n * dim * 4 + n
    if len(data) != need:
        raise DataFormatError(f"{path}: truncated feature file")
    values = np.frombuffer(data, dtype="<f4", count=n * dim, offset=start).reshape(n, dim)
    mask = np.frombuffer(data, dtype=np.uint8, count=n, offset=start + n * dim * 4).astype(bool)
    return FeatureMatrix(values.astype(np.float64), mask)


def write_norm(path, stats: NormStats):
    header = NORM_MAGIC + struct.pack("<II", FORMAT_VERSION, len(stats.mean))
    body = np.concatenate([stats.mean, stats.std]).astype("<f8").tobytes()
    _atomic_write(path, header + body)


def read_norm(path) -> NormStats:
    data = Path(path).read_bytes()
    if data[:8] != NORM_MAGIC:
        raise DataFormatError(f"{path}: bad magic")
    version, dim = struct.unpack_from("<II", data, 8)
    if version != FORMAT_VERSION:
        raise DataFormatError(f"{path}: unsupported norm-stats version {version}")
    if dim != FEATURE_DIM or len(data) != 16 + 16 * dim:
        raise DataFormatError(f"{path}: truncated or mis-sized norm-stats file")
    v = np.frombuffer(data, dtype="<f8", offset=16)
    return NormStats(v[:dim].copy(), v[dim:].copy())
