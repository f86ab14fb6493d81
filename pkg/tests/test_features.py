import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from chaindiar.features import (
    LOG_FLOOR,
    FeatureConfig,
    FeatureMatrix,
    Waveform,
    extract,
    logmel_extract,
    mel_band_centers_hz,
    read_matrix_text,
    read_wav,
    splice,
    subsample,
    write_matrix_text,
    write_wav,
)

SR = 8000


def direct_logmel(samples, n_mels=23, frame_len=200, shift=80, n_fft=256, sr=SR):
    """Naive reference: explicit DFT sums and loop-built triangles."""
    mel = lambda f: 2595.0 * math.log10(1.0 + f / 700.0)
    inv = lambda m: 700.0 * (10.0 ** (m / 2595.0) - 1.0)
    top = mel(sr / 2)
    edges = [inv(top * i / (n_mels + 1)) for i in range(n_mels + 2)]
    window = [0.54 - 0.46 * math.cos(2 * math.pi * n / (frame_len - 1)) for n in range(frame_len)]
    n_frames = (len(samples) - frame_len) // shift + 1
    k = np.arange(n_fft // 2 + 1)
    n = np.arange(frame_len)
    basis = np.exp(-2j * np.pi * np.outer(k, n) / n_fft)
    out = np.zeros((n_mels, n_frames))
    for t in range(n_frames):
        frame = np.array([samples[t * shift + i] * window[i] for i in range(frame_len)])
        power = np.abs(basis @ frame) ** 2
        for m in range(n_mels):
            lo, c, hi = edges[m], edges[m + 1], edges[m + 2]
            e = 0.0
            for b in range(len(power)):
                f = b * sr / n_fft
                if lo < f <= c:
                    e += power[b] * (f - lo) / (c - lo)
                elif c < f < hi:
                    e += power[b] * (hi - f) / (hi - c)
            out[m, t] = math.log(e + LOG_FLOOR)
    return out


def test_zero_waveform_is_log_floor():
    x = logmel_extract(Waveform(np.zeros(SR)), FeatureConfig())
    assert x.n_frames == (SR - 200) // 80 + 1
    np.testing.assert_array_equal(x.data, np.full_like(x.data, math.log(LOG_FLOOR)))


def test_default_config_shape():
    x = logmel_extract(Waveform(np.random.default_rng(0).standard_normal(SR)), FeatureConfig())
    assert x.n_features == 23
    assert x.frame_shift_s == pytest.approx(0.01)


@pytest.mark.parametrize("band", [4, 11, 17])
def test_sine_matches_dft_oracle(band):
    f0 = mel_band_centers_hz(23, SR)[band]
    t = np.arange(2000) / SR
    samples = np.sin(2 * np.pi * f0 * t)
    x = logmel_extract(Waveform(samples), FeatureConfig())
    ref = direct_logmel(samples)
    np.testing.assert_allclose(x.data, ref, rtol=0, atol=1e-8)
    assert np.all(ref.argmax(axis=0) == band)
    assert np.all(x.data.argmax(axis=0) == band)


def test_short_input_rejected():
    with pytest.raises(ValueError, match="input too short"):
        logmel_extract(Waveform(np.zeros(150)), FeatureConfig())


def test_deterministic():
    w = Waveform(np.random.default_rng(3).standard_normal(4000))
    a = logmel_extract(w).data
    b = logmel_extract(w).data
    assert a.tobytes() == b.tobytes()


def test_energy_monotone_in_gain():
    w = np.random.default_rng(4).standard_normal(4000)
    lo = logmel_extract(Waveform(w)).data
    hi = logmel_extract(Waveform(3.0 * w)).data
    assert np.all(hi >= lo)


def test_splice_identity_and_width():
    x = FeatureMatrix(np.random.default_rng(0).standard_normal((23, 12)), 0.01)
    assert splice(x, 0).data is x.data
    assert splice(x, 7).n_features == 345


def test_splice_index_oracle():
    data = np.arange(2 * 3, dtype=float).reshape(2, 3)
    out = splice(FeatureMatrix(data, 0.01), 7).data
    for t in range(3):
        for j, off in enumerate(range(-7, 8)):
            src = min(max(t + off, 0), 2)
            np.testing.assert_array_equal(out[2 * j : 2 * j + 2, t], data[:, src])
    # column 0: every left neighbour replicates column 0
    np.testing.assert_array_equal(out[: 2 * 7, 0], np.tile(data[:, 0], 7))


def test_subsample():
    x = FeatureMatrix(np.arange(25, dtype=float)[None, :], 0.01)
    assert subsample(x, 1).data.tolist() == x.data.tolist()
    y = subsample(x, 10)
    assert y.data.tolist() == [[0.0, 10.0, 20.0]]
    assert y.frame_shift_s == pytest.approx(0.1)


@settings(max_examples=60, deadline=None)
@given(
    n_frames=st.integers(1, 80),
    context=st.integers(0, 15),
    factor=st.integers(1, 25),
)
def test_pipeline_dims(n_frames, context, factor):
    x = FeatureMatrix(np.random.default_rng(n_frames).standard_normal((3, n_frames)), 0.01)
    y = subsample(splice(x, context), factor)
    assert y.data.shape == (3 * (2 * context + 1), math.ceil(n_frames / factor))
    assert np.all(np.isfinite(y.data))


def test_full_pipeline_shape():
    w = Waveform(np.random.default_rng(0).standard_normal(SR * 3))
    y = extract(w, FeatureConfig())
    t10 = (SR * 3 - 200) // 80 + 1
    assert y.data.shape == (345, math.ceil(t10 / 10))
    assert y.frame_shift_s == pytest.approx(0.1)


def test_wav_round_trip(tmp_path):
    samples = np.random.default_rng(0).uniform(-0.5, 0.5, 1000)
    write_wav(tmp_path / "a.wav", Waveform(samples, 16000))
    back = read_wav(tmp_path / "a.wav")
    assert back.sample_rate_hz == 16000
    np.testing.assert_allclose(back.samples, samples, atol=1 / 32768)


def test_matrix_text_round_trip(tmp_path):
    x = FeatureMatrix(np.random.default_rng(0).standard_normal((4, 6)), 0.01)
    write_matrix_text(tmp_path / "m.txt", x)
    assert (tmp_path / "m.txt").read_text().splitlines()[0] == "4 6"
    np.testing.assert_array_equal(read_matrix_text(tmp_path / "m.txt").data, x.data)
