"""Synthetic audio scenes, log-mel features and clip manifests.

Every clip is a pure function of ``(SynthSpec, seed)``: the waveform, its
event annotations and therefore its spectrogram can be regenerated at any
time. Manifests only carry the seed and the annotations.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

LOG_FLOOR = 1e-5
STD_FLOOR = 1e-5
ANNOTATION_KINDS = ("strong", "weak", "unlabeled")
CARRIER_KINDS = ("tone", "chirp", "noise-burst")


class SpecError(ValueError):
    """Raised for invalid synthesis or feature parameters."""


class ManifestError(ValueError):
    """Raised when a manifest line cannot be parsed."""


@dataclass(frozen=True)
class Event:
    """One sound event in normalized clip coordinates.

    ``center_m`` and ``length_l`` are fractions of the clip duration.
    """

    label: str
    center_m: float
    length_l: float

    def __post_init__(self):
        if not self.length_l > 0:
            raise ValueError(f"event length must be positive, got {self.length_l}")
        tol = 1e-9
        if self.center_m - self.length_l / 2 < -tol or self.center_m + self.length_l / 2 > 1 + tol:
            raise ValueError(f"event ({self.center_m}, {self.length_l}) lies outside the clip")

    @property
    def onset(self) -> float:
        return self.center_m - self.length_l / 2

    @property
    def offset(self) -> float:
        return self.center_m + self.length_l / 2

    @classmethod
    def from_seconds(cls, label: str, onset_sec: float, offset_sec: float, duration_sec: float) -> "Event":
        center = (onset_sec + offset_sec) / (2 * duration_sec)
        length = (offset_sec - onset_sec) / duration_sec
        return cls(label, center, length)


@dataclass(frozen=True)
class Annotation:
    """An event as stored in manifests: absolute onset/offset in seconds."""

    label: str
    onset_sec: float
    offset_sec: float

    def normalized(self, duration_sec: float) -> Event:
        return Event.from_seconds(self.label, self.onset_sec, self.offset_sec, duration_sec)


@dataclass
class ClipRecord:
    clip_id: str
    duration_sec: float
    synth_seed: int
    annotation_kind: str = "strong"
    events: list[Annotation] = field(default_factory=list)
    tags: list[str] = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.annotation_kind not in ANNOTATION_KINDS:
            raise ValueError(f"unknown annotation_kind {self.annotation_kind!r}")
        if self.duration_sec <= 0:
            raise ValueError("duration_sec must be positive")
        self.events = sorted(self.events, key=lambda e: (e.onset_sec, e.offset_sec, e.label))
        self.tags = sorted(set(self.tags))

    def normalized_events(self) -> list[Event]:
        return [a.normalized(self.duration_sec) for a in self.events]

    def to_json(self) -> dict:
        out = dict(self.extra)
        out.update(
            clip_id=self.clip_id,
            duration_sec=self.duration_sec,
            synth_seed=self.synth_seed,
            annotation_kind=self.annotation_kind,
            events=[
                {"label": e.label, "onset_sec": e.onset_sec, "offset_sec": e.offset_sec}
                for e in self.events
            ],
            tags=list(self.tags),
        )
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "ClipRecord":
        known = {"clip_id", "duration_sec", "synth_seed", "annotation_kind", "events", "tags"}
        return cls(
            clip_id=str(obj["clip_id"]),
            duration_sec=float(obj["duration_sec"]),
            synth_seed=int(obj["synth_seed"]),
            annotation_kind=obj.get("annotation_kind", "strong"),
            events=[
                Annotation(str(e["label"]), float(e["onset_sec"]), float(e["offset_sec"]))
                for e in obj.get("events", [])
            ],
            tags=[str(t) for t in obj.get("tags", [])],
            extra={k: v for k, v in obj.items() if k not in known},
        )

    def with_kind(self, kind: str) -> "ClipRecord":
        return ClipRecord(self.clip_id, self.duration_sec, self.synth_seed, kind,
                          list(self.events), list(self.tags), dict(self.extra))


@dataclass
class SpectrogramTensor:
    values: np.ndarray  # [frames, n_mels]
    frames_per_sec: float
    n_mels: int

    @property
    def n_frames(self) -> int:
        return int(self.values.shape[0])

    @property
    def duration_sec(self) -> float:
        return self.n_frames / self.frames_per_sec


@dataclass(frozen=True)
class SoundClass:
    name: str
    kind: str
    freq_range: tuple[float, float]
    duration_range: tuple[float, float]


@dataclass(frozen=True)
class SynthSpec:
    classes: tuple[SoundClass, ...]
    clip_duration_sec: float = 10.0
    events_per_clip: tuple[int, int] = (1, 4)
    snr_db_range: tuple[float, float] = (6.0, 20.0)
    sample_rate_hz: int = 16000
    min_gap_sec: float = 0.02
    background_rms: float = 0.01

    @property
    def class_names(self) -> list[str]:
        return [c.name for c in self.classes]

    def validate(self) -> None:
        if not self.classes:
            raise SpecError("at least one sound class is required")
        if self.clip_duration_sec <= 0 or self.sample_rate_hz <= 0:
            raise SpecError("clip duration and sample rate must be positive")
        lo, hi = self.events_per_clip
        if lo < 0 or hi < lo:
            raise SpecError(f"invalid events_per_clip {self.events_per_clip}")
        if self.snr_db_range[1] < self.snr_db_range[0]:
            raise SpecError("invalid snr range")
        nyquist = self.sample_rate_hz / 2
        for c in self.classes:
            if c.kind not in CARRIER_KINDS:
                raise SpecError(f"class {c.name}: unknown carrier kind {c.kind!r}")
            dlo, dhi = c.duration_range
            if dlo <= 0 or dhi < dlo:
                raise SpecError(f"class {c.name}: duration range must be positive, got {c.duration_range}")
            if dlo > self.clip_duration_sec:
                raise SpecError(f"class {c.name}: minimum duration exceeds clip duration")
            flo, fhi = c.freq_range
            if flo <= 0 or fhi < flo or fhi >= nyquist:
                raise SpecError(f"class {c.name}: invalid frequency range {c.freq_range}")
        if len(set(self.class_names)) != len(self.classes):
            raise SpecError("class names must be unique")

    def to_json(self) -> dict:
        return {
            "classes": [
                {"name": c.name, "kind": c.kind, "freq_range": list(c.freq_range),
                 "duration_range": list(c.duration_range)}
                for c in self.classes
            ],
            "clip_duration_sec": self.clip_duration_sec,
            "events_per_clip": list(self.events_per_clip),
            "snr_db_range": list(self.snr_db_range),
            "sample_rate_hz": self.sample_rate_hz,
            "min_gap_sec": self.min_gap_sec,
            "background_rms": self.background_rms,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "SynthSpec":
        classes = tuple(
            SoundClass(c["name"], c["kind"], tuple(c["freq_range"]), tuple(c["duration_range"]))
            for c in obj["classes"]
        )
        kw = {k: v for k, v in obj.items() if k != "classes"}
        for key in ("events_per_clip", "snr_db_range"):
            if key in kw:
                kw[key] = tuple(kw[key])
        return cls(classes=classes, **kw)


DEFAULT_CLASSES = (
    SoundClass("beep", "tone", (500.0, 900.0), (0.4, 2.5)),
    SoundClass("chirp", "chirp", (1500.0, 3500.0), (0.4, 2.5)),
    SoundClass("hiss", "noise-burst", (4500.0, 6500.0), (0.4, 2.5)),
)


def default_spec(**overrides) -> SynthSpec:
    return SynthSpec(classes=DEFAULT_CLASSES, **overrides)


def _carrier(kind: str, freq_range, n: int, sr: int, rng: np.random.Generator) -> np.ndarray:
    t = np.arange(n) / sr
    flo, fhi = freq_range
    if kind == "tone":
        f0 = rng.uniform(flo, fhi)
        phase = rng.uniform(0, 2 * np.pi)
        return np.sin(2 * np.pi * f0 * t + phase)
    if kind == "chirp":
        f0, f1 = flo, fhi
        if rng.random() < 0.5:
            f0, f1 = f1, f0
        dur = max(n / sr, 1.0 / sr)
        inst = f0 + (f1 - f0) * t / dur
        phase = 2 * np.pi * np.cumsum(inst) / sr
        return np.sin(phase + rng.uniform(0, 2 * np.pi))
    # band-limited noise: keep only the FFT bins inside the band
    noise = rng.standard_normal(n)
    spec = np.fft.rfft(noise)
    freqs = np.fft.rfftfreq(n, 1.0 / sr)
    spec[(freqs < flo) | (freqs > fhi)] = 0
    out = np.fft.irfft(spec, n)
    rms = np.sqrt(np.mean(out**2))
    return out / rms * np.sqrt(0.5) if rms > 0 else out


def _envelope(n: int, sr: int, ramp_sec: float = 0.005) -> np.ndarray:
    env = np.ones(n)
    r = min(int(ramp_sec * sr), n // 2)
    if r > 0:
        ramp = 0.5 - 0.5 * np.cos(np.pi * np.arange(r) / r)
        env[:r] = ramp
        env[n - r:] = ramp[::-1]
    return env


def synth_clip(spec: SynthSpec, seed: int, clip_id: str | None = None,
               annotation_kind: str = "strong") -> tuple[ClipRecord, np.ndarray]:
    """Render one scene and its annotations.

    Event boundaries are quantized to sample indices, so the stored seconds
    are exact multiples of ``1 / sample_rate_hz``. Different classes may
    overlap; occurrences of the same class are kept ``min_gap_sec`` apart.
    """
    spec.validate()
    rng = np.random.default_rng(seed)
    sr = spec.sample_rate_hz
    n_total = int(round(spec.clip_duration_sec * sr))
    gap = int(math.ceil(spec.min_gap_sec * sr))

    wave = rng.standard_normal(n_total) * spec.background_rms
    lo, hi = spec.events_per_clip
    n_events = int(rng.integers(lo, hi + 1))
    placed: list[tuple[int, int, int]] = []  # (start, stop, class index)
    for _ in range(n_events):
        cls_idx = int(rng.integers(len(spec.classes)))
        cls = spec.classes[cls_idx]
        dlo, dhi = cls.duration_range
        dhi = min(dhi, spec.clip_duration_sec)
        for _attempt in range(20):
            length = int(round(rng.uniform(dlo, dhi) * sr))
            length = max(1, min(length, n_total))
            start = int(rng.integers(0, n_total - length + 1))
            stop = start + length
            clash = any(
                c == cls_idx and start < s1 + gap and s0 < stop + gap
                for s0, s1, c in placed
            )
            if not clash:
                break
        else:
            continue
        snr_db = rng.uniform(*spec.snr_db_range)
        amp = spec.background_rms * 10 ** (snr_db / 20) * np.sqrt(2)
        sig = _carrier(cls.kind, cls.freq_range, length, sr, rng)
        wave[start:stop] += amp * sig * _envelope(length, sr)
        placed.append((start, stop, cls_idx))

    events = [
        Annotation(spec.classes[c].name, s0 / sr, s1 / sr) for s0, s1, c in placed
    ]
    record = ClipRecord(
        clip_id=clip_id if clip_id is not None else f"clip_{seed:06d}",
        duration_sec=n_total / sr,
        synth_seed=int(seed),
        annotation_kind=annotation_kind,
        events=events,
        tags=[e.label for e in events],
    )
    return record, wave.astype(np.float64)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(n_mels: int, n_fft: int, sample_rate_hz: int,
                   fmin: float = 0.0, fmax: float | None = None) -> np.ndarray:
    """Triangular HTK-scale filters, shape ``[n_mels, n_fft // 2 + 1]``."""
    fmax = sample_rate_hz / 2 if fmax is None else fmax
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    freqs = np.fft.rfftfreq(n_fft, 1.0 / sample_rate_hz)
    lower, center, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs - lower) / (center - lower)
    falling = (upper - freqs) / (upper - center)
    return np.maximum(0.0, np.minimum(rising, falling))


def mel_center_frequencies(n_mels: int, sample_rate_hz: int, fmin: float = 0.0,
                           fmax: float | None = None) -> np.ndarray:
    fmax = sample_rate_hz / 2 if fmax is None else fmax
    return mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))[1:-1]


def mel_spectrogram(waveform: np.ndarray, sample_rate_hz: int, n_mels: int = 64,
                    hop_sec: float = 0.02, win_sec: float = 0.04) -> SpectrogramTensor:
    """Log-mel magnitude spectrogram.

    Frame ``t`` is centred on ``(t + 0.5) * hop_sec`` so that it summarizes the
    interval ``[t * hop_sec, (t + 1) * hop_sec)``; the frame count is
    ``round(duration * frames_per_sec)``.
    """
    if hop_sec <= 0 or win_sec <= 0:
        raise SpecError("hop_sec and win_sec must be positive")
    x = np.asarray(waveform, dtype=np.float64)
    if x.ndim != 1 or x.size == 0:
        raise SpecError("waveform must be a non-empty 1-D array")
    hop = int(round(hop_sec * sample_rate_hz))
    win = int(round(win_sec * sample_rate_hz))
    if hop < 1 or win < 1:
        raise SpecError("hop/window shorter than one sample")
    if x.size < win:
        raise SpecError(f"waveform of {x.size} samples is shorter than one window ({win})")

    n_frames = int(round(x.size / hop))
    n_fft = 1 << (win - 1).bit_length()
    centers = (np.arange(n_frames) * hop + hop // 2)
    pad = win // 2 + 1
    padded = np.pad(x, (pad, pad + hop))
    starts = centers - win // 2 + pad
    idx = starts[:, None] + np.arange(win)[None, :]
    window = np.hanning(win + 2)[1:-1]
    frames = padded[idx] * window
    mag = np.abs(np.fft.rfft(frames, n=n_fft, axis=1)) * (2.0 / window.sum())
    mel = mag @ mel_filterbank(n_mels, n_fft, sample_rate_hz).T
    values = np.log(np.maximum(mel, LOG_FLOOR))
    return SpectrogramTensor(values.astype(np.float32), 1.0 / hop_sec, n_mels)


@dataclass
class NormStats:
    """Per-mel-bin mean and standard deviation from the training split."""

    mean: np.ndarray
    std: np.ndarray

    def to_json(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_json(cls, obj: dict) -> "NormStats":
        return cls(np.asarray(obj["mean"], np.float64), np.asarray(obj["std"], np.float64))


def compute_stats(spectrograms: Iterable[SpectrogramTensor]) -> NormStats:
    total = None
    sq = None
    count = 0
    for s in spectrograms:
        v = s.values.astype(np.float64)
        total = v.sum(0) if total is None else total + v.sum(0)
        sq = (v**2).sum(0) if sq is None else sq + (v**2).sum(0)
        count += v.shape[0]
    if count == 0:
        raise ValueError("cannot compute statistics from zero frames")
    mean = total / count
    var = np.maximum(sq / count - mean**2, 0.0)
    return NormStats(mean, np.sqrt(var))


def normalize(spectrogram: SpectrogramTensor, stats: NormStats) -> SpectrogramTensor:
    """Standardize each mel bin; apply exactly once (not idempotent)."""
    std = np.maximum(stats.std, STD_FLOOR)
    values = (spectrogram.values.astype(np.float64) - stats.mean) / std
    # constant bins are zeroed exactly rather than left at floating-point residue
    values[:, stats.std < STD_FLOOR] = 0.0
    return SpectrogramTensor(values.astype(np.float32), spectrogram.frames_per_sec, spectrogram.n_mels)


def save_manifest(records: Sequence[ClipRecord], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_json(), sort_keys=True) + "\n")


def load_manifest(path: str | Path) -> list[ClipRecord]:
    records = []
    with Path(path).open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                records.append(ClipRecord.from_json(json.loads(line)))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise ManifestError(f"{path}: line {lineno}: {exc}") from exc
    return records


def save_spectrogram_cache(spec: SpectrogramTensor, path: str | Path) -> None:
    """Write a raw little-endian float32 grid plus a JSON sidecar."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    spec.values.astype("<f4").tofile(path)
    sidecar = {"shape": list(spec.values.shape), "frames_per_sec": spec.frames_per_sec,
               "n_mels": spec.n_mels, "dtype": "<f4"}
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(sidecar))


def load_spectrogram_cache(path: str | Path) -> SpectrogramTensor:
    path = Path(path)
    meta = json.loads(path.with_suffix(path.suffix + ".json").read_text())
    values = np.fromfile(path, dtype="<f4").reshape(meta["shape"])
    return SpectrogramTensor(values.astype(np.float32), float(meta["frames_per_sec"]), int(meta["n_mels"]))


def clip_features(spec: SynthSpec, record: ClipRecord, n_mels: int = 64,
                  hop_sec: float = 0.02, win_sec: float = 0.04) -> SpectrogramTensor:
    """Regenerate a clip's log-mel spectrogram from its synthesis seed."""
    _, wave = synth_clip(spec, record.synth_seed, record.clip_id)
    return mel_spectrogram(wave, spec.sample_rate_hz, n_mels, hop_sec, win_sec)
