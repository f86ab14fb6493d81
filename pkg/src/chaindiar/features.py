"""Log-mel filterbank front end: framing, splicing and subsampling.

Matrices are stored feature-major, ``data.shape == (F, T)``.
"""

from __future__ import annotations

import wave
from dataclasses import dataclass
from pathlib import Path

import numpy as np

LOG_FLOOR = 1e-10


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray
    sample_rate_hz: int = 8000

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1 or samples.size == 0:
            raise ValueError("waveform must be a non-empty 1-D sequence")
        if self.sample_rate_hz <= 0:
            raise ValueError("sample_rate_hz must be positive")
        object.__setattr__(self, "samples", samples)

    @property
    def duration_s(self) -> float:
        return self.samples.size / self.sample_rate_hz


@dataclass(frozen=True)
class FeatureConfig:
    n_mels: int = 23
    frame_length_ms: float = 25.0
    frame_shift_ms: float = 10.0
    context: int = 7
    subsample: int = 10

    def __post_init__(self):
        if self.n_mels < 1:
            raise ValueError("n_mels must be positive")
        if self.frame_shift_ms <= 0 or self.frame_length_ms < self.frame_shift_ms:
            raise ValueError("need frame_length_ms >= frame_shift_ms > 0")
        if self.context < 0:
            raise ValueError("context must be non-negative")
        if self.subsample < 1:
            raise ValueError("subsample must be >= 1")

    @property
    def spliced_dim(self) -> int:
        return self.n_mels * (2 * self.context + 1)

    @property
    def output_shift_s(self) -> float:
        return self.frame_shift_ms / 1000.0 * self.subsample


@dataclass(frozen=True)
class FeatureMatrix:
    data: np.ndarray
    frame_shift_s: float

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 2 or data.shape[0] < 1 or data.shape[1] < 1:
            raise ValueError(f"feature matrix must be F x T with F, T >= 1, got {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ValueError("feature matrix contains non-finite values")
        object.__setattr__(self, "data", data)

    @property
    def n_features(self) -> int:
        return self.data.shape[0]

    @property
    def n_frames(self) -> int:
        return self.data.shape[1]


def hz_to_mel(hz):
    return 2595.0 * np.log10(1.0 + np.asarray(hz, dtype=np.float64) / 700.0)


def mel_to_hz(mel):
    return 700.0 * (10.0 ** (np.asarray(mel, dtype=np.float64) / 2595.0) - 1.0)


def frame_sizes(cfg: FeatureConfig, sample_rate_hz: int) -> tuple[int, int, int]:
    """Return (frame_len, frame_shift, n_fft) in samples."""
    frame_len = int(round(cfg.frame_length_ms * sample_rate_hz / 1000.0))
    shift = int(round(cfg.frame_shift_ms * sample_rate_hz / 1000.0))
    n_fft = 1 << max(frame_len - 1, 1).bit_length()
    return frame_len, shift, n_fft


def mel_filterbank(n_mels: int, n_fft: int, sample_rate_hz: int) -> np.ndarray:
    """Triangular HTK-scale filters spanning 0 Hz to Nyquist, shape (n_mels, n_fft//2 + 1)."""
    nyquist = sample_rate_hz / 2.0
    edges_hz = mel_to_hz(np.linspace(0.0, hz_to_mel(nyquist), n_mels + 2))
    bin_hz = np.arange(n_fft // 2 + 1) * sample_rate_hz / n_fft
    fbank = np.zeros((n_mels, bin_hz.size))
    for m in range(n_mels):
        lo, center, hi = edges_hz[m], edges_hz[m + 1], edges_hz[m + 2]
        rising = (bin_hz - lo) / (center - lo)
        falling = (hi - bin_hz) / (hi - center)
        fbank[m] = np.maximum(0.0, np.minimum(rising, falling))
    return fbank


def mel_band_centers_hz(n_mels: int, sample_rate_hz: int) -> np.ndarray:
    edges = mel_to_hz(np.linspace(0.0, hz_to_mel(sample_rate_hz / 2.0), n_mels + 2))
    return edges[1:-1]


def frame_signal(samples: np.ndarray, frame_len: int, shift: int) -> np.ndarray:
    n_frames = (samples.size - frame_len) // shift + 1
    idx = np.arange(frame_len)[None, :] + shift * np.arange(n_frames)[:, None]
    return samples[idx]


def logmel_extract(w: Waveform, cfg: FeatureConfig = FeatureConfig()) -> FeatureMatrix:
    frame_len, shift, n_fft = frame_sizes(cfg, w.sample_rate_hz)
    if w.samples.size < frame_len:
        raise ValueError("input too short")
    frames = frame_signal(w.samples, frame_len, shift) * np.hamming(frame_len)
    power = np.abs(np.fft.rfft(frames, n=n_fft, axis=1)) ** 2
    energies = power @ mel_filterbank(cfg.n_mels, n_fft, w.sample_rate_hz).T
    return FeatureMatrix(np.log(energies + LOG_FLOOR).T, cfg.frame_shift_ms / 1000.0)


def splice(x: FeatureMatrix, context: int) -> FeatureMatrix:
    if context < 0:
        raise ValueError("context must be non-negative")
    if context == 0:
        return x
    n_frames = x.n_frames
    # (2c+1, T) source column per (offset, frame), clamped at the edges
    idx = np.clip(np.arange(-context, context + 1)[:, None] + np.arange(n_frames)[None, :], 0, n_frames - 1)
    stacked = x.data[:, idx]  # (F, 2c+1, T)
    data = stacked.transpose(1, 0, 2).reshape(-1, n_frames)
    return FeatureMatrix(data, x.frame_shift_s)


def subsample(x: FeatureMatrix, factor: int) -> FeatureMatrix:
    if factor < 1:
        raise ValueError("factor must be >= 1")
    return FeatureMatrix(x.data[:, ::factor], x.frame_shift_s * factor)


def extract(w: Waveform, cfg: FeatureConfig = FeatureConfig()) -> FeatureMatrix:
    """Full pipeline: log-mel, then splice, then subsample."""
    return subsample(splice(logmel_extract(w, cfg), cfg.context), cfg.subsample)


def n_logmel_frames(n_samples: int, cfg: FeatureConfig, sample_rate_hz: int) -> int:
    frame_len, shift, _ = frame_sizes(cfg, sample_rate_hz)
    if n_samples < frame_len:
        return 0
    return (n_samples - frame_len) // shift + 1


# --- I/O -------------------------------------------------------------------


def read_wav(path) -> Waveform:
    """Read mono 16-bit PCM; samples are scaled to [-1, 1)."""
    with wave.open(str(path), "rb") as f:
        if f.getnchannels() != 1:
            raise ValueError(f"{path}: expected mono audio, got {f.getnchannels()} channels")
        if f.getsampwidth() != 2:
            raise ValueError(f"{path}: expected 16-bit PCM")
        rate = f.getframerate()
        raw = f.readframes(f.getnframes())
    pcm = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    return Waveform(pcm, rate)


def write_wav(path, w: Waveform) -> None:
    pcm = np.clip(np.round(w.samples * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as f:
        f.setnchannels(1)
        f.setsampwidth(2)
        f.setframerate(w.sample_rate_hz)
        f.writeframes(pcm.tobytes())


def write_matrix_text(path, x: FeatureMatrix) -> None:
    n_feat, n_frames = x.data.shape
    lines = [f"{n_feat} {n_frames}"]
    lines += [" ".join(repr(float(v)) for v in row) for row in x.data]
    Path(path).write_text("\n".join(lines) + "\n")


def read_matrix_text(path, frame_shift_s: float = 0.01) -> FeatureMatrix:
    lines = Path(path).read_text().split("\n")
    n_feat, n_frames = (int(v) for v in lines[0].split())
    rows = [np.array(line.split(), dtype=np.float64) for line in lines[1 : n_feat + 1]]
    data = np.vstack(rows) if rows else np.zeros((0, n_frames))
    if data.shape != (n_feat, n_frames):
        raise ValueError(f"{path}: header says {n_feat}x{n_frames}, body is {data.shape}")
    return FeatureMatrix(data, frame_shift_s)

