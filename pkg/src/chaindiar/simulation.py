"""Synthetic multi-speaker conversation generator.

Each speaker alternates exponential pauses and uniform-length utterances.
Speakers are parametric sources: a harmonic stack at a speaker-specific F0
shaped by a formant-like envelope, plus noise in a speaker-specific band.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from chaindiar.features import Waveform, write_wav
from chaindiar.labels import ActivityMatrix

LABEL_SHIFT_S = 0.01


@dataclass(frozen=True)
class SimConfig:
    n_speakers: tuple[int, int] = (2, 2)
    target_duration_s: float = 90.0
    pause_scale: float = 2.9
    utterance_len_range_s: tuple[float, float] = (1.0, 4.0)
    sample_rate_hz: int = 8000
    seed: int = 0

    def __post_init__(self):
        n_spk = self.n_speakers
        if isinstance(n_spk, int):
            n_spk = (n_spk, n_spk)
        n_spk = (int(n_spk[0]), int(n_spk[1]))
        object.__setattr__(self, "n_speakers", n_spk)
        object.__setattr__(self, "utterance_len_range_s", tuple(float(v) for v in self.utterance_len_range_s))
        if n_spk[0] < 1 or n_spk[1] < n_spk[0]:
            raise ValueError(f"invalid n_speakers range {n_spk}")
        lo, hi = self.utterance_len_range_s
        if self.target_duration_s <= 0:
            raise ValueError("target_duration_s must be positive")
        if lo <= 0 or hi < lo:
            raise ValueError(f"invalid utterance_len_range_s {self.utterance_len_range_s}")
        if self.pause_scale <= 0:
            raise ValueError("pause_scale must be positive")


@dataclass(frozen=True)
class Mixture:
    waveform: Waveform
    activity: ActivityMatrix
    speaker_ids: tuple[str, ...]
    intervals: tuple[tuple[tuple[float, float], ...], ...]


@dataclass(frozen=True)
class SpeakerVoice:
    f0_hz: float
    formant_hz: float
    formant_bw_hz: float
    noise_band_hz: tuple[float, float]
    noise_gain: float


def draw_voice(rng: np.random.Generator, taken_f0: list[float]) -> SpeakerVoice:
    # keep F0s apart so voices stay separable in 23 mel bands
    for _ in range(100):
        f0 = float(rng.uniform(90.0, 300.0))
        if all(abs(np.log(f0 / other)) > 0.18 for other in taken_f0):
            break
    formant = float(rng.uniform(400.0, 2500.0))
    band_lo = float(rng.uniform(500.0, 3000.0))
    return SpeakerVoice(
        f0_hz=f0,
        formant_hz=formant,
        formant_bw_hz=float(rng.uniform(300.0, 900.0)),
        noise_band_hz=(band_lo, band_lo + float(rng.uniform(200.0, 700.0))),
        noise_gain=float(rng.uniform(0.05, 0.2)),
    )


def speaker_turns(cfg: SimConfig, rng: np.random.Generator) -> list[tuple[float, float]]:
    """Utterance intervals in seconds, each starting after an exponential pause."""
    lo, hi = cfg.utterance_len_range_s
    turns = []
    t = 0.0
    while True:
        t += float(rng.exponential(cfg.pause_scale))
        if t >= cfg.target_duration_s:
            break
        end = min(t + float(rng.uniform(lo, hi)), cfg.target_duration_s)
        turns.append((t, end))
        t = end
    return turns


def render_voice(voice: SpeakerVoice, n_samples: int, sr: int, rng: np.random.Generator) -> np.ndarray:
    t = np.arange(n_samples) / sr
    out = np.zeros(n_samples)
    n_harm = int((sr / 2 - 50) // voice.f0_hz)
    # slow vibrato keeps the stack from being a perfectly static spectrum
    phase = 2 * np.pi * voice.f0_hz * t + 0.3 * np.sin(2 * np.pi * 4.0 * t)
    for h in range(1, n_harm + 1):
        f = h * voice.f0_hz
        gain = np.exp(-0.5 * ((f - voice.formant_hz) / voice.formant_bw_hz) ** 2) + 0.15 / h
        out += gain * np.sin(h * phase + rng.uniform(0, 2 * np.pi))
    spec = np.fft.rfft(rng.standard_normal(n_samples))
    freqs = np.fft.rfftfreq(n_samples, 1.0 / sr)
    lo, hi = voice.noise_band_hz
    spec[(freqs < lo) | (freqs > hi)] = 0.0
    noise = np.fft.irfft(spec, n=n_samples)
    noise /= np.std(noise) + 1e-12
    out = out / (np.std(out) + 1e-12) + voice.noise_gain * noise
    return out


def simulate_activity(cfg: SimConfig, rng: np.random.Generator):
    """Draw speaker count, voices and turns; returns (voices, turns, ActivityMatrix)."""
    lo, hi = cfg.n_speakers
    n_spk = int(rng.integers(lo, hi + 1))
    n_frames = int(round(cfg.target_duration_s / LABEL_SHIFT_S))
    rows = np.zeros((n_spk, n_frames), dtype=np.int8)
    voices: list[SpeakerVoice] = []
    all_turns = []
    for s in range(n_spk):
        voices.append(draw_voice(rng, [v.f0_hz for v in voices]))
        turns = speaker_turns(cfg, rng)
        all_turns.append(tuple(turns))
        for start, end in turns:
            rows[s, int(round(start / LABEL_SHIFT_S)) : int(round(end / LABEL_SHIFT_S))] = 1
    return voices, tuple(all_turns), ActivityMatrix(rows, LABEL_SHIFT_S)


def simulate_mixture(cfg: SimConfig, rng: np.random.Generator | None = None) -> Mixture:
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    voices, all_turns, activity = simulate_activity(cfg, rng)
    sr = cfg.sample_rate_hz
    n_samples = int(round(cfg.target_duration_s * sr))
    samples = np.zeros(n_samples)
    frame = int(round(LABEL_SHIFT_S * sr))
    for voice, turns in zip(voices, all_turns):
        if not turns:
            continue
        source = render_voice(voice, n_samples, sr, rng)
        gate = np.zeros(n_samples)
        for start, end in turns:
            # snapped to the label grid so audio and labels agree frame for frame
            lo, hi = (int(round(t / LABEL_SHIFT_S)) * frame for t in (start, end))
            gate[lo:hi] = 1.0
        samples += 0.1 * source * gate
    return Mixture(
        waveform=Waveform(samples, sr),
        activity=activity,
        speaker_ids=tuple(f"spk{s}" for s in range(len(voices))),
        intervals=all_turns,
    )


def overlap_ratio(a) -> float:
    rows = a.rows if isinstance(a, ActivityMatrix) else np.atleast_2d(a)
    counts = rows.sum(axis=0)
    speech = np.count_nonzero(counts >= 1)
    if speech == 0:
        raise ValueError("no speech")
    return np.count_nonzero(counts >= 2) / speech


def mixture_seed(base_seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([base_seed, index])


# --- corpus writing -----------------------------------------------------------


@dataclass(frozen=True)
class ManifestEntry:
    mixture_id: str
    wav_path: Path
    rttm_path: Path


def write_corpus(cfg: SimConfig, n_mixtures: int, out_dir) -> Path:
    """Write WAV + RTTM per mixture and a manifest; returns the manifest path."""
    from chaindiar.scoring import activity_to_segments, write_rttm

    if n_mixtures < 1:
        raise ValueError("number of mixtures must be at least 1")
    out_dir = Path(out_dir)
    (out_dir / "wav").mkdir(parents=True, exist_ok=True)
    (out_dir / "rttm").mkdir(parents=True, exist_ok=True)
    lines = []
    for i in range(n_mixtures):
        mix_id = f"mix{i:06d}"
        mix = simulate_mixture(cfg, mixture_seed(cfg.seed, i))
        wav_path = out_dir / "wav" / f"{mix_id}.wav"
        rttm_path = out_dir / "rttm" / f"{mix_id}.rttm"
        _atomic(wav_path, lambda p: write_wav(p, mix.waveform))
        segs = activity_to_segments(mix.activity, mix.speaker_ids, file_id=mix_id)
        _atomic(rttm_path, lambda p: write_rttm(p, segs))
        lines.append(f"{mix_id} wav/{mix_id}.wav rttm/{mix_id}.rttm")
    manifest = out_dir / "manifest.txt"
    _atomic(manifest, lambda p: Path(p).write_text("\n".join(lines) + "\n"))
    _atomic(out_dir / "simulation.json", lambda p: Path(p).write_text(json.dumps(asdict(cfg), indent=2) + "\n"))
    return manifest


def read_manifest(path) -> list[ManifestEntry]:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise OSError(f"cannot read manifest {path}: {e.strerror}") from e
    entries = []
    for n, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 3:
            raise ValueError(f"{path}:{n}: expected 'id wav rttm'")
        mix_id, wav, rttm = parts
        entries.append(ManifestEntry(mix_id, path.parent / wav, path.parent / rttm))
    return entries


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _atomic(path, write) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    write(tmp)
    os.replace(tmp, path)
