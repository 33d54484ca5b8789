"""WAV loading, resampling and log-mel spectrograms.

The front-end is fixed: min-max normalised 16 kHz audio, Hann-windowed
1024-point frames every 384 samples (64 ms / 24 ms), power spectrum, 128 HTK
mel filters over 0-8 kHz, natural log with a 1e-6 floor.
"""

from __future__ import annotations

import math
import struct
import wave
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np
from scipy import signal

TARGET_RATE = 16000


class WavFormatError(ValueError):
    """Malformed RIFF/WAVE header."""


class UnsupportedCodecError(ValueError):
    """WAV file that is not 16-bit PCM."""


class EmptyAudioError(ValueError):
    """WAV file with no samples."""


class ClipTooShortError(ValueError):
    pass


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass(frozen=True)
class SpectrogramConfig:
    window_ms: float = 64.0
    hop_ms: float = 24.0
    n_mels: int = 128
    fmin_hz: float = 0.0
    fmax_hz: float = 8000.0
    sample_rate: int = TARGET_RATE
    log_floor: float = 1e-6

    def __post_init__(self):
        if self.n_mels < 1:
            raise ValueError("n_mels must be >= 1")
        if self.hop_ms > self.window_ms:
            raise ValueError("hop_ms must not exceed window_ms")
        if self.fmax_hz > self.sample_rate / 2:
            raise ValueError(f"fmax_hz {self.fmax_hz} exceeds Nyquist {self.sample_rate / 2}")
        if not 0 <= self.fmin_hz < self.fmax_hz:
            raise ValueError("need 0 <= fmin_hz < fmax_hz")

    @property
    def window(self) -> int:
        return int(round(self.window_ms * self.sample_rate / 1000))

    @property
    def hop(self) -> int:
        return int(round(self.hop_ms * self.sample_rate / 1000))

    @property
    def fft_size(self) -> int:
        return 1 << (self.window - 1).bit_length()

    def n_frames(self, n_samples: int) -> int:
        if n_samples < self.window:
            return 0
        return (n_samples - self.window) // self.hop + 1


@dataclass
class LogMelSpectrogram:
    values: np.ndarray  # frames x n_mels
    config: SpectrogramConfig = field(default_factory=SpectrogramConfig)


# ---------------------------------------------------------------------------
# waveform I/O


def read_pcm16(path) -> tuple[np.ndarray, int]:
    """Raw int16 samples (frames x channels) and the sample rate."""
    try:
        with wave.open(str(path), "rb") as fh:
            n_channels = fh.getnchannels()
            width = fh.getsampwidth()
            rate = fh.getframerate()
            raw = fh.readframes(fh.getnframes())
    except wave.Error as exc:
        msg = str(exc)
        if "unknown format" in msg:
            raise UnsupportedCodecError(f"{path}: {msg}") from exc
        raise WavFormatError(f"{path}: {msg}") from exc
    except (EOFError, struct.error) as exc:
        raise WavFormatError(f"{path}: truncated header") from exc
    if width != 2:
        raise UnsupportedCodecError(f"{path}: {8 * width}-bit samples, only 16-bit PCM is supported")
    if n_channels not in (1, 2):
        raise UnsupportedCodecError(f"{path}: {n_channels} channels, expected mono or stereo")
    data = np.frombuffer(raw, dtype="<i2")
    if data.size == 0:
        raise EmptyAudioError(f"{path}: no audio samples")
    return data.reshape(-1, n_channels), rate


def write_wav(path, samples: np.ndarray, sample_rate: int) -> None:
    """Write mono float samples in [-1, 1] as 16-bit PCM."""
    pcm = np.clip(np.round(np.asarray(samples) * 32767.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(int(sample_rate))
        fh.writeframes(pcm.tobytes())


def minmax_normalize(x: np.ndarray) -> np.ndarray:
    """Affine rescale so min -> -1 and max -> +1; a constant signal becomes zeros."""
    lo, hi = float(x.min()), float(x.max())
    if hi == lo:
        return np.zeros_like(x)
    return 2.0 * (x - lo) / (hi - lo) - 1.0


def load_wav(path, target_hz: int = TARGET_RATE) -> Waveform:
    pcm, rate = read_pcm16(path)
    x = pcm.astype(np.float64).mean(axis=1) / 32768.0
    x = minmax_normalize(x)
    return resample(Waveform(x, rate), target_hz)


def resample(w: Waveform, target_hz: int) -> Waveform:
    """Polyphase windowed-sinc resampling; the identity rate is a no-op."""
    if target_hz <= 0:
        raise ValueError(f"target_hz must be positive, got {target_hz}")
    if w.sample_rate == target_hz:
        return Waveform(w.samples, w.sample_rate)
    ratio = Fraction(int(target_hz), int(w.sample_rate))
    # 'line' padding extends the edges so DC and slow trends survive the filter
    y = signal.resample_poly(w.samples, ratio.numerator, ratio.denominator, padtype="line")
    return Waveform(y, int(target_hz))


# ---------------------------------------------------------------------------
# mel features


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_center_frequencies(cfg: SpectrogramConfig) -> np.ndarray:
    edges = mel_to_hz(np.linspace(hz_to_mel(cfg.fmin_hz), hz_to_mel(cfg.fmax_hz), cfg.n_mels + 2))
    return edges[1:-1]


def mel_filterbank(cfg: SpectrogramConfig) -> np.ndarray:
    """Triangular HTK filters, shape (n_mels, fft_size // 2 + 1), peak weight 1."""
    edges = mel_to_hz(np.linspace(hz_to_mel(cfg.fmin_hz), hz_to_mel(cfg.fmax_hz), cfg.n_mels + 2))
    freqs = np.arange(cfg.fft_size // 2 + 1) * cfg.sample_rate / cfg.fft_size
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs - lo) / (mid - lo)
    falling = (hi - freqs) / (hi - mid)
    fb = np.maximum(0.0, np.minimum(rising, falling))
    empty = np.flatnonzero(fb.max(axis=1) <= 0)
    if empty.size:
        raise ValueError(
            f"{empty.size} empty mel filters (first: {empty[0]}); n_mels={cfg.n_mels} is too large "
            f"for fft_size={cfg.fft_size}"
        )
    return fb


def power_spectrogram(x: np.ndarray, cfg: SpectrogramConfig) -> np.ndarray:
    frames = np.lib.stride_tricks.sliding_window_view(x, cfg.window)[:: cfg.hop]
    win = signal.get_window("hann", cfg.window)
    spec = np.fft.rfft(frames * win, n=cfg.fft_size, axis=-1)
    return spec.real**2 + spec.imag**2


def log_mel(w: Waveform, cfg: SpectrogramConfig | None = None) -> LogMelSpectrogram:
    cfg = cfg or SpectrogramConfig()
    if w.sample_rate != cfg.sample_rate:
        raise ValueError(f"expected {cfg.sample_rate} Hz audio, got {w.sample_rate} Hz; resample first")
    x = np.asarray(w.samples, dtype=np.float64)
    if len(x) < cfg.window:
        raise ClipTooShortError(
            f"clip has {len(x)} samples, fewer than one {cfg.window}-sample window; "
            "zero-pad to the window length before featurizing"
        )
    energy = power_spectrogram(x, cfg) @ mel_filterbank(cfg).T
    return LogMelSpectrogram(np.log(energy + cfg.log_floor), cfg)


def pad_to_window(x: np.ndarray, cfg: SpectrogramConfig) -> np.ndarray:
    if len(x) >= cfg.window:
        return x
    return np.pad(x, (0, cfg.window - len(x)))


def featurize_file(path, cfg: SpectrogramConfig | None = None) -> LogMelSpectrogram:
    cfg = cfg or SpectrogramConfig()
    w = load_wav(path, cfg.sample_rate)
    return log_mel(Waveform(pad_to_window(w.samples, cfg), w.sample_rate), cfg)


def featurize_many(paths, cfg: SpectrogramConfig | None = None, jobs: int = 1) -> list[LogMelSpectrogram]:
    """Featurize files in parallel; output order follows ``paths``."""
    cfg = cfg or SpectrogramConfig()
    if jobs <= 1:
        return [featurize_file(p, cfg) for p in paths]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(lambda p: featurize_file(p, cfg), paths))


# ---------------------------------------------------------------------------
# BKML feature cache

_BKML_MAGIC = b"BKML"


class FeatureCacheError(ValueError):
    pass


def save_features(path, values: np.ndarray) -> None:
    values = np.asarray(values)
    frames, n_mels = values.shape
    Path(path).write_bytes(
        _BKML_MAGIC + struct.pack("<III", 1, frames, n_mels) + np.ascontiguousarray(values, "<f4").tobytes()
    )


def load_features(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    if buf[:4] != _BKML_MAGIC:
        raise FeatureCacheError(f"{path}: bad magic {buf[:4]!r}")
    if len(buf) < 16:
        raise FeatureCacheError(f"{path}: truncated header")
    version, frames, n_mels = struct.unpack_from("<III", buf, 4)
    if version != 1:
        raise FeatureCacheError(f"{path}: unsupported version {version}")
    if len(buf) - 16 < 4 * frames * n_mels:
        raise FeatureCacheError(f"{path}: truncated payload")
    return np.frombuffer(buf, "<f4", count=frames * n_mels, offset=16).reshape(frames, n_mels).copy()


def silence_level(cfg: SpectrogramConfig | None = None) -> float:
    cfg = cfg or SpectrogramConfig()
    return math.log(cfg.log_floor)
