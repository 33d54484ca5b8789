import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from burstkit import dsp
from burstkit.dsp import SpectrogramConfig, Waveform

CFG = SpectrogramConfig()


def _write_pcm(path, pcm: np.ndarray, rate: int, channels: int = 1):
    import wave

    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(channels)
        fh.setsampwidth(2)
        fh.setframerate(rate)
        fh.writeframes(np.asarray(pcm, "<i2").tobytes())


def test_config_derived_sizes():
    assert CFG.window == 1024
    assert CFG.hop == 384
    assert CFG.fft_size == 1024


def test_config_rejects_fmax_above_nyquist():
    with pytest.raises(ValueError, match="Nyquist"):
        SpectrogramConfig(fmax_hz=9000)


# --- load_wav --------------------------------------------------------------

def test_all_zero_file_stays_zero(tmp_path):
    _write_pcm(tmp_path / "z.wav", np.zeros(4000, np.int16), 16000)
    w = dsp.load_wav(tmp_path / "z.wav")
    assert w.sample_rate == 16000
    assert np.all(w.samples == 0)


def test_minmax_rescale_hits_unit_bounds(tmp_path):
    pcm = np.round(np.linspace(-0.5, 0.5, 3000) * 32768).astype(np.int16)
    _write_pcm(tmp_path / "a.wav", pcm, 16000)
    w = dsp.load_wav(tmp_path / "a.wav")
    assert w.samples.min() == -1.0
    assert w.samples.max() == 1.0


def test_stereo_is_averaged(tmp_path):
    left = np.full(2000, 1000, np.int16)
    right = np.full(2000, 3000, np.int16)
    right[0] = -3000
    stereo = np.stack([left, right], axis=1).reshape(-1)
    _write_pcm(tmp_path / "s.wav", stereo, 16000, channels=2)
    pcm, rate = dsp.read_pcm16(tmp_path / "s.wav")
    mono = pcm.mean(axis=1)
    assert mono[0] == -1000 and mono[1] == 2000


def test_8k_input_doubles_length(tmp_path):
    n = 4001
    rng = np.random.default_rng(0)
    _write_pcm(tmp_path / "b.wav", rng.integers(-2000, 2000, n).astype(np.int16), 8000)
    w = dsp.load_wav(tmp_path / "b.wav")
    assert abs(len(w.samples) - 2 * n) <= 1


def test_wav_errors_are_distinct(tmp_path):
    (tmp_path / "junk.wav").write_bytes(b"NOTAWAVEFILE" * 4)
    with pytest.raises(dsp.WavFormatError):
        dsp.load_wav(tmp_path / "junk.wav")

    # 32-bit float WAV (format tag 3)
    fmt = struct.pack("<HHIIHH", 3, 1, 16000, 64000, 4, 32)
    body = b"WAVE" + b"fmt " + struct.pack("<I", len(fmt)) + fmt + b"data" + struct.pack("<I", 8) + b"\0" * 8
    (tmp_path / "float.wav").write_bytes(b"RIFF" + struct.pack("<I", len(body)) + body)
    with pytest.raises(dsp.UnsupportedCodecError):
        dsp.load_wav(tmp_path / "float.wav")

    _write_pcm(tmp_path / "empty.wav", np.zeros(0, np.int16), 16000)
    with pytest.raises(dsp.EmptyAudioError):
        dsp.load_wav(tmp_path / "empty.wav")


# --- resample -----------------------------------------------------------------

def test_resample_identity_is_bitwise():
    x = np.random.default_rng(1).standard_normal(1000)
    y = dsp.resample(Waveform(x, 16000), 16000)
    assert np.array_equal(x, y.samples)


def test_resample_keeps_1khz_tone():
    fs = 48000
    t = np.arange(fs) / fs
    y = dsp.resample(Waveform(np.sin(2 * np.pi * 1000 * t), fs), 16000)
    spec = np.abs(np.fft.rfft(y.samples))
    freqs = np.fft.rfftfreq(len(y.samples), 1 / 16000)
    assert abs(freqs[spec.argmax()] - 1000) <= 1.0
    assert abs(len(y.samples) - 16000) <= 1


def test_resample_preserves_dc():
    y = dsp.resample(Waveform(np.full(4410, 0.3), 44100), 16000)
    np.testing.assert_allclose(y.samples, 0.3, atol=1e-3)


# --- mel filterbank ------------------------------------------------------------

def test_filterbank_well_formed():
    fb = dsp.mel_filterbank(CFG)
    assert fb.shape == (128, 513)
    assert (fb >= 0).all()
    assert (fb.max(axis=1) > 0).all()
    centers = dsp.mel_center_frequencies(CFG)
    assert np.all(np.diff(centers) > 0)
    np.testing.assert_allclose(np.diff(dsp.hz_to_mel(centers)), np.diff(dsp.hz_to_mel(centers))[0])


def test_four_filter_centers_match_hand_computed_htk():
    # mel(8000) = 2840.0230; centers at k/5 of that, mapped back to Hz by hand
    expected = [458.7300836725616, 1218.079152582602, 2475.0514528037643, 4555.753765102847]
    centers = dsp.mel_center_frequencies(SpectrogramConfig(n_mels=4))
    np.testing.assert_allclose(centers, expected, atol=0.1)


def test_too_many_filters_rejected():
    with pytest.raises(ValueError, match="empty mel filters"):
        dsp.mel_filterbank(SpectrogramConfig(n_mels=1000))


# --- log_mel -------------------------------------------------------------------

def test_two_second_clip_shape():
    x = np.random.default_rng(2).uniform(-1, 1, 32000)
    spec = dsp.log_mel(Waveform(x, 16000))
    assert spec.values.shape == ((32000 - 1024) // 384 + 1, 128) == (81, 128)


def test_silence_is_log_floor():
    spec = dsp.log_mel(Waveform(np.zeros(16000), 16000))
    assert np.all(spec.values == math.log(1e-6))
    assert math.log(1e-6) == pytest.approx(-13.8155, abs=1e-4)


def test_1khz_tone_peaks_in_nearest_filter():
    t = np.arange(32000) / 16000
    spec = dsp.log_mel(Waveform(np.sin(2 * np.pi * 1000 * t), 16000))
    centers = dsp.mel_center_frequencies(CFG)
    expected = int(np.argmin(np.abs(centers - 1000)))
    assert np.all(spec.values.argmax(axis=1) == expected)


def test_short_clip_error_mentions_padding():
    with pytest.raises(dsp.ClipTooShortError, match="zero-pad"):
        dsp.log_mel(Waveform(np.zeros(1000), 16000))


def test_polarity_invariance_and_amplitude_shift():
    x = np.random.default_rng(3).uniform(-0.5, 0.5, 8000)
    a = dsp.log_mel(Waveform(x, 16000)).values
    np.testing.assert_array_equal(a, dsp.log_mel(Waveform(-x, 16000)).values)

    fb = dsp.mel_filterbank(CFG)
    energy = dsp.power_spectrogram(x, CFG) @ fb.T
    strong = energy > 1e3 * CFG.log_floor
    b = dsp.log_mel(Waveform(2 * x, 16000)).values
    np.testing.assert_allclose((b - a)[strong], math.log(4), atol=1e-3)


@settings(max_examples=60, deadline=None)
@given(st.integers(min_value=1024, max_value=20000))
def test_frame_count_formula(n):
    spec = dsp.log_mel(Waveform(np.zeros(n), 16000))
    assert spec.values.shape[0] == (n - 1024) // 384 + 1 == CFG.n_frames(n)


def test_feature_cache_round_trip(tmp_path):
    vals = np.random.default_rng(4).standard_normal((7, 128)).astype(np.float32)
    dsp.save_features(tmp_path / "c.bkml", vals)
    assert (tmp_path / "c.bkml").read_bytes()[:4] == b"BKML"
    np.testing.assert_array_equal(dsp.load_features(tmp_path / "c.bkml"), vals)
    raw = (tmp_path / "c.bkml").read_bytes()
    (tmp_path / "t.bkml").write_bytes(raw[:-4])
    with pytest.raises(dsp.FeatureCacheError, match="truncated"):
        dsp.load_features(tmp_path / "t.bkml")


def test_featurize_many_parallel_matches_serial(tmp_path):
    rng = np.random.default_rng(5)
    paths = []
    for i in range(4):
        p = tmp_path / f"{i}.wav"
        _write_pcm(p, rng.integers(-9000, 9000, 6000 + 500 * i).astype(np.int16), 16000)
        paths.append(p)
    serial = dsp.featurize_many(paths, jobs=1)
    parallel = dsp.featurize_many(paths, jobs=3)
    for a, b in zip(serial, parallel):
        assert np.array_equal(a.values, b.values)


def test_short_file_is_padded_at_ingestion(tmp_path):
    _write_pcm(tmp_path / "s.wav", np.arange(300, dtype=np.int16), 16000)
    assert dsp.featurize_file(tmp_path / "s.wav").values.shape == (1, 128)
