"""Manifests, embedding files, speaker-level re-splitting and synthetic data."""

from __future__ import annotations

import csv
import logging
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import signal

from . import dsp

log = logging.getLogger(__name__)

COUNTRIES = ("USA", "China", "South Africa", "Venezuela")
SPLITS = ("train", "val", "test")
AGE_CENTER = 26.0
AGE_SCALE = 10.0


class ManifestError(ValueError):
    pass


class MissingColumnError(ManifestError):
    pass


class DuplicateClipError(ManifestError):
    pass


class EmotionRangeError(ManifestError):
    pass


class InvalidRowError(ManifestError):
    pass


class EmbeddingFormatError(ValueError):
    pass


class TruncatedEmbeddingError(EmbeddingFormatError):
    pass


@dataclass
class Sample:
    clip_id: str
    speaker_id: str
    split: str
    country: int
    age: float
    emotions: np.ndarray
    wav_path: str | None = None
    emb_path: str | None = None


# ---------------------------------------------------------------------------
# manifest CSV

BASE_COLUMNS = ("clip_id", "speaker_id", "split", "country", "age", "wav_path", "emb_path")


def load_manifest(path, countries: Sequence[str] = COUNTRIES) -> list[Sample]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing = [c for c in BASE_COLUMNS if c not in header]
        emo_cols = sorted((c for c in header if c.startswith("emo_")), key=lambda c: int(c[4:]))
        if not emo_cols:
            missing.append("emo_1")
        if missing:
            raise MissingColumnError(f"{path}: missing column(s) {', '.join(missing)}")
        index = {name: i for i, name in enumerate(countries)}
        seen: set[str] = set()
        samples = []
        for row_no, row in enumerate(reader, start=2):
            cid = row["clip_id"]
            if cid in seen:
                raise DuplicateClipError(f"{path}: row {row_no}: duplicate clip_id {cid!r}")
            seen.add(cid)
            if row["split"] not in SPLITS:
                raise InvalidRowError(f"{path}: row {row_no}: unknown split {row['split']!r}")
            if row["country"] not in index:
                raise InvalidRowError(f"{path}: row {row_no}: unknown country {row['country']!r}")
            try:
                age = float(row["age"])
                emotions = np.array([float(row[c]) for c in emo_cols])
            except (TypeError, ValueError):
                raise InvalidRowError(f"{path}: row {row_no}: non-numeric age or emotion") from None
            if not age > 0:
                raise InvalidRowError(f"{path}: row {row_no}: age must be positive, got {row['age']}")
            if np.any((emotions < 0) | (emotions > 1)):
                raise EmotionRangeError(f"{path}: row {row_no}: emotion intensities must lie in [0, 1]")
            wav, emb = row["wav_path"] or None, row["emb_path"] or None
            if wav is None and emb is None:
                raise InvalidRowError(f"{path}: row {row_no}: needs wav_path or emb_path")
            samples.append(Sample(cid, row["speaker_id"], row["split"], index[row["country"]], age, emotions, wav, emb))
    return samples


def save_manifest(path, samples: Sequence[Sample], countries: Sequence[str] = COUNTRIES) -> None:
    k = len(samples[0].emotions) if samples else 0
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow([*BASE_COLUMNS, *(f"emo_{i + 1}" for i in range(k))])
        for s in samples:
            writer.writerow(
                [s.clip_id, s.speaker_id, s.split, countries[s.country], repr(float(s.age)),
                 s.wav_path or "", s.emb_path or "", *(repr(float(e)) for e in s.emotions)]
            )


# ---------------------------------------------------------------------------
# VBEM embedding files

_VBEM_MAGIC = b"VBEM"


def save_embeddings(path, windows: np.ndarray) -> None:
    windows = np.asarray(windows)
    t, d = windows.shape
    Path(path).write_bytes(
        _VBEM_MAGIC + struct.pack("<III", 1, d, t) + np.ascontiguousarray(windows, "<f4").tobytes()
    )


def load_embeddings(path) -> np.ndarray:
    """T x D float32 matrix from a VBEM file."""
    buf = Path(path).read_bytes()
    if buf[:4] != _VBEM_MAGIC:
        raise EmbeddingFormatError(f"{path}: bad magic {buf[:4]!r}")
    if len(buf) < 16:
        raise TruncatedEmbeddingError(f"{path}: truncated header")
    version, d, t = struct.unpack_from("<III", buf, 4)
    if version != 1:
        raise EmbeddingFormatError(f"{path}: unsupported version {version}")
    if t < 1 or d < 1:
        raise EmbeddingFormatError(f"{path}: empty embedding sequence (T={t}, D={d})")
    need = 4 * t * d
    if len(buf) - 16 < need:
        raise TruncatedEmbeddingError(f"{path}: payload has {len(buf) - 16} bytes, header declares {need}")
    return np.frombuffer(buf, "<f4", count=t * d, offset=16).reshape(t, d).copy()


# ---------------------------------------------------------------------------
# split reports and speaker re-splitting


@dataclass
class SplitStats:
    count: int
    country_proportions: np.ndarray
    age_quantiles: tuple[float, float, float]
    emotion_means: np.ndarray


@dataclass
class SplitReport:
    splits: dict[str, SplitStats]

    def rows(self, countries: Sequence[str] = COUNTRIES) -> list[dict]:
        out = []
        for name, st in self.splits.items():
            row = {"split": name, "count": st.count}
            row.update({f"p_{c}": float(p) for c, p in zip(countries, st.country_proportions)})
            row.update(dict(zip(("age_p10", "age_p50", "age_p90"), st.age_quantiles)))
            row.update({f"emo_{i + 1}_mean": float(m) for i, m in enumerate(st.emotion_means)})
            out.append(row)
        return out

    def to_csv(self, path, countries: Sequence[str] = COUNTRIES) -> None:
        rows = self.rows(countries)
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(rows[0]) if rows else ["split"], lineterminator="\n")
            writer.writeheader()
            writer.writerows(rows)


def split_report(samples: Sequence[Sample], n_countries: int = len(COUNTRIES)) -> SplitReport:
    splits = {}
    for name in SPLITS:
        part = [s for s in samples if s.split == name]
        if not part:
            continue
        counts = np.bincount([s.country for s in part], minlength=n_countries).astype(float)
        ages = np.array([s.age for s in part])
        splits[name] = SplitStats(
            len(part),
            counts / counts.sum(),
            tuple(float(q) for q in np.quantile(ages, [0.1, 0.5, 0.9])),
            np.mean([s.emotions for s in part], axis=0),
        )
    return SplitReport(splits)


def speaker_resplit(
    samples: Sequence[Sample], n_speakers: int = 250, seed: int = 0
) -> tuple[list[Sample], SplitReport, SplitReport]:
    """Move every clip of ``n_speakers`` random validation speakers into train."""
    val_speakers = sorted({s.speaker_id for s in samples if s.split == "val"})
    if n_speakers > len(val_speakers):
        raise ValueError(f"requested {n_speakers} speakers but validation has only {len(val_speakers)}")
    rng = np.random.default_rng(seed)
    chosen = {val_speakers[i] for i in rng.choice(len(val_speakers), size=n_speakers, replace=False)}
    moved = [replace(s, split="train") if s.speaker_id in chosen and s.split == "val" else s for s in samples]
    if n_speakers and n_speakers == len(val_speakers):
        log.warning("speaker_resplit moved every validation speaker; validation split is now empty")
    return moved, split_report(samples), split_report(moved)


# ---------------------------------------------------------------------------
# in-memory datasets and batching


def aux_features(country: np.ndarray, age: np.ndarray, n_countries: int = len(COUNTRIES)) -> np.ndarray:
    """One-hot country followed by (age - 26) / 10."""
    onehot = np.eye(n_countries)[np.asarray(country, dtype=int)]
    return np.concatenate([onehot, ((np.asarray(age, float) - AGE_CENTER) / AGE_SCALE)[:, None]], axis=1)


@dataclass
class Batch:
    inputs: np.ndarray  # B x 1 x F x M spectrograms or B x T x D embeddings
    mask: np.ndarray | None  # B x T validity mask for embedding sequences
    emotions: np.ndarray
    country: np.ndarray
    age: np.ndarray
    aux: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.country)


@dataclass
class ClipDataset:
    """Features plus labels for one split.

    ``features`` holds one array per clip: F x M log-mel spectrograms when
    ``kind == "spectrogram"``, T x D embedding sequences when ``kind == "embedding"``.
    ``aux_country``/``aux_age`` are what the model sees as auxiliary inputs;
    they default to the true labels.
    """

    kind: str
    features: list[np.ndarray]
    emotions: np.ndarray
    country: np.ndarray
    age: np.ndarray
    clip_ids: list[str] = field(default_factory=list)
    n_countries: int = len(COUNTRIES)
    aux_country: np.ndarray | None = None
    aux_age: np.ndarray | None = None
    pad_value: float = 0.0

    def __post_init__(self):
        if self.kind not in ("spectrogram", "embedding"):
            raise ValueError(f"unknown dataset kind {self.kind!r}")
        if not self.clip_ids:
            self.clip_ids = [str(i) for i in range(len(self.features))]

    def __len__(self) -> int:
        return len(self.features)

    @property
    def n_emotions(self) -> int:
        return self.emotions.shape[1]

    def with_aux(self, country: np.ndarray, age: np.ndarray) -> "ClipDataset":
        return replace(self, aux_country=np.asarray(country), aux_age=np.asarray(age, float))

    def subset(self, idx) -> "ClipDataset":
        idx = np.asarray(idx, dtype=int)
        return replace(
            self,
            features=[self.features[i] for i in idx],
            emotions=self.emotions[idx],
            country=self.country[idx],
            age=self.age[idx],
            clip_ids=[self.clip_ids[i] for i in idx],
            aux_country=None if self.aux_country is None else self.aux_country[idx],
            aux_age=None if self.aux_age is None else self.aux_age[idx],
        )

    def batch(self, idx, dtype=np.float32, with_aux: bool = False) -> Batch:
        idx = np.asarray(idx, dtype=int)
        feats = [self.features[i] for i in idx]
        length = max(f.shape[0] for f in feats)
        width = feats[0].shape[1]
        out = np.full((len(idx), length, width), self.pad_value, dtype=dtype)
        mask = np.zeros((len(idx), length), dtype=dtype)
        for j, f in enumerate(feats):
            out[j, : f.shape[0]] = f
            mask[j, : f.shape[0]] = 1.0
        aux = None
        if with_aux:
            c = self.country if self.aux_country is None else self.aux_country
            a = self.age if self.aux_age is None else self.aux_age
            aux = aux_features(c[idx], a[idx], self.n_countries).astype(dtype)
        if self.kind == "spectrogram":
            return Batch(out[:, None], None, self.emotions[idx].astype(dtype), self.country[idx], self.age[idx], aux)
        return Batch(out, mask, self.emotions[idx].astype(dtype), self.country[idx], self.age[idx], aux)


def dataset_from_samples(
    samples: Sequence[Sample],
    kind: str,
    root=".",
    spec_cfg: dsp.SpectrogramConfig | None = None,
    feature_dir=None,
    n_countries: int = len(COUNTRIES),
    jobs: int = 1,
) -> ClipDataset:
    """Load features for ``samples``; relative paths resolve against ``root``."""
    root = Path(root)
    spec_cfg = spec_cfg or dsp.SpectrogramConfig()
    if not samples:
        raise ValueError("no samples to load")
    if kind == "embedding":
        missing = [s.clip_id for s in samples if not s.emb_path]
        if missing:
            raise ValueError(f"clip {missing[0]!r} has no emb_path")
        feats = [load_embeddings(root / s.emb_path) for s in samples]
        pad = 0.0
    else:
        missing = [s.clip_id for s in samples if not s.wav_path]
        if missing:
            raise ValueError(f"clip {missing[0]!r} has no wav_path")
        cached = [Path(feature_dir) / f"{s.clip_id}.bkml" if feature_dir else None for s in samples]
        if all(c is not None and c.exists() for c in cached):
            feats = [dsp.load_features(c) for c in cached]
        else:
            feats = [m.values.astype(np.float32) for m in dsp.featurize_many([root / s.wav_path for s in samples], spec_cfg, jobs)]
        pad = dsp.silence_level(spec_cfg)
    return ClipDataset(
        kind,
        feats,
        np.array([s.emotions for s in samples], dtype=np.float64),
        np.array([s.country for s in samples], dtype=int),
        np.array([s.age for s in samples], dtype=np.float64),
        [s.clip_id for s in samples],
        n_countries,
        pad_value=pad,
    )


# ---------------------------------------------------------------------------
# synthetic data


@dataclass
class SynthSpec:
    """Recipe for a synthetic corpus with planted structure.

    ``country_signal`` scales the country term mixed into embeddings and
    ``country_emotion_coupling`` shifts each country's emotion prior. Setting
    both to zero gives the zero-information corpus. With ``hidden_coupling``
    the embeddings only see the country-free part of the emotion logits, so
    the country shift is recoverable from the country label alone.
    """

    n_train: int = 400
    n_val: int = 200
    n_test: int = 0
    clips_per_speaker: int = 2
    n_emotions: int = 10
    countries: tuple[str, ...] = COUNTRIES
    country_probs: tuple[float, ...] = (0.45, 0.2, 0.2, 0.15)
    mode: str = "embedding"  # embedding | audio | both
    emb_dim: int = 1024
    min_windows: int = 1
    max_windows: int = 4
    emb_noise: float = 0.0
    country_signal: float = 1.0
    country_emotion_coupling: float = 0.0
    hidden_coupling: bool = False
    age_mean: float = 26.0
    age_std: float = 4.0
    age_bounds: tuple[float, float] = (18.0, 60.0)
    duration_s: float = 1.0
    sample_rate: int = 16000
    audio_noise: float = 0.02
    tone_gain: float = 2.5

    def __post_init__(self):
        if len(self.country_probs) != len(self.countries):
            raise ValueError("country_probs must have one entry per country")
        if abs(sum(self.country_probs) - 1.0) > 1e-9:
            raise ValueError("country_probs must sum to 1")
        if self.mode not in ("embedding", "audio", "both"):
            raise ValueError(f"unknown synth mode {self.mode!r}")
        if min(self.n_train, self.n_val, self.n_test) < 0 or self.clips_per_speaker < 1:
            raise ValueError("split sizes must be >= 0 and clips_per_speaker >= 1")


PRESETS = {
    "null": dict(n_train=1200, country_signal=0.0, country_emotion_coupling=0.0, emb_dim=32, emb_noise=0.5, n_emotions=4),
    "informative": dict(
        n_train=1200, country_signal=0.0, country_emotion_coupling=1.0, hidden_coupling=True, emb_dim=32, emb_noise=0.5, n_emotions=4
    ),
    "clean": dict(emb_dim=64, emb_noise=0.0),
    "audio": dict(mode="audio", n_emotions=3, n_train=640, n_val=160, country_probs=(0.25, 0.25, 0.25, 0.25)),
}


def preset(name: str, **overrides) -> SynthSpec:
    if name not in PRESETS:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return SynthSpec(**{**PRESETS[name], **overrides})


@dataclass
class SynthData:
    spec: SynthSpec
    samples: list[Sample]
    embeddings: list[np.ndarray] | None
    audio: list[np.ndarray] | None

    def split(self, name: str) -> list[int]:
        return [i for i, s in enumerate(self.samples) if s.split == name]

    def dataset(self, split: str, kind: str = "embedding", spec_cfg: dsp.SpectrogramConfig | None = None) -> ClipDataset:
        idx = self.split(split)
        if not idx:
            raise ValueError(f"split {split!r} is empty")
        if kind == "embedding":
            if self.embeddings is None:
                raise ValueError("corpus was generated without embeddings")
            feats = [self.embeddings[i] for i in idx]
            pad = 0.0
        else:
            if self.audio is None:
                raise ValueError("corpus was generated without audio")
            cfg = spec_cfg or dsp.SpectrogramConfig()
            feats = []
            for i in idx:
                x = dsp.minmax_normalize(_quantize(self.audio[i]))
                w = dsp.resample(dsp.Waveform(x, self.spec.sample_rate), cfg.sample_rate)
                feats.append(dsp.log_mel(dsp.Waveform(dsp.pad_to_window(w.samples, cfg), cfg.sample_rate), cfg).values.astype(np.float32))
            pad = dsp.silence_level(cfg)
        sub = [self.samples[i] for i in idx]
        return ClipDataset(
            kind,
            feats,
            np.array([s.emotions for s in sub]),
            np.array([s.country for s in sub], dtype=int),
            np.array([s.age for s in sub]),
            [s.clip_id for s in sub],
            len(self.spec.countries),
            pad_value=pad,
        )


def _quantize(x: np.ndarray) -> np.ndarray:
    """Mirror the 16-bit round trip through a WAV file."""
    return np.clip(np.round(x * 32767.0), -32768, 32767) / 32768.0


def _truncated_normal(rng, mean, std, lo, hi, n):
    out = rng.normal(mean, std, n)
    bad = (out < lo) | (out > hi)
    while bad.any():
        out[bad] = rng.normal(mean, std, bad.sum())
        bad = (out < lo) | (out > hi)
    return out


_TEXTURES = ("steady", "rising", "falling")


def _render_audio(spec: SynthSpec, emotions: np.ndarray, country: int, rng) -> np.ndarray:
    """Sum of sinusoid families, one per emotion dimension, over country-tilted noise.

    Dimension k drives a family of ``_TEXTURES[k % 3]`` sinusoids (steady
    tones, upward or downward glides) whose amplitude grows as exp(gain * e_k).
    The noise is first-order filtered with a per-country pole, which tilts its
    spectrum.
    """
    n = int(round(spec.duration_s * spec.sample_rate))
    t = np.arange(n) / spec.sample_rate
    fs = spec.sample_rate
    x = np.zeros(n)
    for k, e in enumerate(emotions):
        texture = _TEXTURES[k % len(_TEXTURES)]
        amp = 0.01 * np.exp(spec.tone_gain * e)
        base = np.geomspace(250.0, 0.25 * fs, 4) * (1.0 + 0.07 * (k // len(_TEXTURES)))
        for f0 in base:
            phase = rng.uniform(0, 2 * np.pi)
            if texture == "steady":
                x += amp * np.sin(2 * np.pi * f0 * t + phase)
            else:
                # exponential glide over one octave across the clip
                sign = 1.0 if texture == "rising" else -1.0
                rate = sign * np.log(2.0) / max(spec.duration_s, 1e-3)
                inst = 2 * np.pi * f0 * (np.exp(rate * t) - 1.0) / rate
                x += amp * np.sin(inst + phase)
    poles = np.linspace(-0.85, 0.85, len(spec.countries))
    noise = signal.lfilter([1.0], [1.0, -poles[country]], rng.standard_normal(n))
    noise *= spec.audio_noise / noise.std()
    x = x + noise
    peak = np.abs(x).max()
    return x / peak * 0.9 if peak > 0 else x


def synth_dataset(spec: SynthSpec, seed: int = 0) -> SynthData:
    """Generate a corpus deterministically from ``seed``."""
    rng = np.random.default_rng(seed)
    k, c = spec.n_emotions, len(spec.countries)
    # dataset-level mixing matrices drawn first so they do not depend on split sizes
    mix_emotion = rng.standard_normal((k, spec.emb_dim)) / np.sqrt(k)
    mix_country = rng.standard_normal((c, spec.emb_dim)) * spec.country_signal
    country_offsets = rng.standard_normal((c, k))

    samples: list[Sample] = []
    embeddings: list[np.ndarray] | None = [] if spec.mode in ("embedding", "both") else None
    audio: list[np.ndarray] | None = [] if spec.mode in ("audio", "both") else None
    for split, count in zip(SPLITS, (spec.n_train, spec.n_val, spec.n_test)):
        n_spk = -(-count // spec.clips_per_speaker)
        spk_country = rng.choice(c, size=n_spk, p=spec.country_probs)
        spk_age = np.round(_truncated_normal(rng, spec.age_mean, spec.age_std, *spec.age_bounds, n_spk))
        for i in range(count):
            spk = i // spec.clips_per_speaker
            country = int(spk_country[spk])
            latent = rng.standard_normal(k)
            logits = latent + spec.country_emotion_coupling * country_offsets[country]
            emotions = 1.0 / (1.0 + np.exp(-logits))
            visible = 1.0 / (1.0 + np.exp(-latent)) if spec.hidden_coupling else emotions
            cid = f"{split}_{i:05d}"
            sample = Sample(cid, f"{split}_spk{spk:04d}", split, country, float(spk_age[spk]), emotions)
            if embeddings is not None:
                t = int(rng.integers(spec.min_windows, spec.max_windows + 1))
                clean = visible @ mix_emotion + mix_country[country]
                emb = clean[None, :] + spec.emb_noise * rng.standard_normal((t, spec.emb_dim))
                embeddings.append(emb.astype(np.float32))
                sample.emb_path = f"emb/{cid}.vbem"
            if audio is not None:
                audio.append(_render_audio(spec, emotions, country, rng))
                sample.wav_path = f"wav/{cid}.wav"
            samples.append(sample)
    return SynthData(spec, samples, embeddings, audio)


def write_synth(data: SynthData, out_dir) -> Path:
    """Write manifest.csv plus wav/ and emb/ files; returns the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if data.embeddings is not None:
        (out / "emb").mkdir(exist_ok=True)
        for s, e in zip(data.samples, data.embeddings):
            save_embeddings(out / s.emb_path, e)
    if data.audio is not None:
        (out / "wav").mkdir(exist_ok=True)
        for s, x in zip(data.samples, data.audio):
            dsp.write_wav(out / s.wav_path, x, data.spec.sample_rate)
    manifest = out / "manifest.csv"
    save_manifest(manifest, data.samples, data.spec.countries)
    return manifest
