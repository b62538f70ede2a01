"""Audio buffers, WAV I/O, energy VAD and per-speaker speech streams."""

from __future__ import annotations

import wave
from collections.abc import Mapping
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import signal

from .annotation import Segment, Timeline, to_ms

DEFAULT_SAMPLE_RATE = 8000
PCM_SCALE = 32767.0


class AudioError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class AudioBuffer:
    samples: np.ndarray
    sample_rate: int = DEFAULT_SAMPLE_RATE

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise AudioError("audio must be mono (1-D)")
        if self.sample_rate < 8000:
            raise AudioError(f"sample rate {self.sample_rate} below 8000 Hz")
        if not np.all(np.isfinite(samples)):
            raise AudioError("audio contains non-finite samples")
        if samples.size and np.max(np.abs(samples)) > 1.0:
            raise AudioError("audio samples outside [-1, 1]")
        samples.setflags(write=False)
        object.__setattr__(self, "samples", samples)

    def __len__(self) -> int:
        return self.samples.size

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate

    def __eq__(self, other) -> bool:
        if not isinstance(other, AudioBuffer):
            return NotImplemented
        return self.sample_rate == other.sample_rate and np.array_equal(self.samples, other.samples)


def quantize_pcm16(samples: np.ndarray) -> np.ndarray:
    """Float [-1, 1] to int16, rounding half away from zero."""
    scaled = np.clip(np.asarray(samples, dtype=np.float64), -1.0, 1.0) * PCM_SCALE
    return (np.sign(scaled) * np.floor(np.abs(scaled) + 0.5)).astype(np.int16)


def write_wav(path: str | Path, audio: AudioBuffer) -> None:
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(audio.sample_rate)
        w.writeframes(quantize_pcm16(audio.samples).astype("<i2").tobytes())


def read_wav(path: str | Path) -> AudioBuffer:
    """Read a 16-bit PCM mono WAV file."""
    try:
        with wave.open(str(path), "rb") as w:
            if w.getnchannels() != 1:
                raise AudioError(f"{path}: expected mono, got {w.getnchannels()} channels")
            if w.getsampwidth() != 2:
                raise AudioError(f"{path}: expected 16-bit PCM, got {8 * w.getsampwidth()}-bit")
            if w.getcomptype() != "NONE":
                raise AudioError(f"{path}: compressed WAV not supported")
            rate = w.getframerate()
            data = w.readframes(w.getnframes())
    except wave.Error as exc:
        raise AudioError(f"{path}: {exc}") from None
    ints = np.frombuffer(data, dtype="<i2").astype(np.float64)
    return AudioBuffer(np.clip(ints / PCM_SCALE, -1.0, 1.0), rate)


@dataclass(frozen=True, eq=False)
class SpeakerStream:
    speaker_id: str
    audio: AudioBuffer
    tags: Mapping[str, str] = field(default_factory=dict)

    @property
    def available_duration(self) -> float:
        return len(self.audio) / self.audio.sample_rate

    @property
    def sample_rate(self) -> int:
        return self.audio.sample_rate


def frame_energies_db(audio: AudioBuffer, frame: float, hop: float) -> np.ndarray:
    """RMS energy (dBFS) of each full frame, frames starting every ``hop``."""
    flen = int(round(frame * audio.sample_rate))
    fhop = int(round(hop * audio.sample_rate))
    x = audio.samples
    if x.size < flen:
        return np.empty(0)
    n = 1 + (x.size - flen) // fhop
    idx = np.arange(flen)[None, :] + fhop * np.arange(n)[:, None]
    rms = np.sqrt(np.mean(x[idx] ** 2, axis=1))
    return 20.0 * np.log10(np.maximum(rms, 1e-5))


def vad_threshold_db(energies: np.ndarray, threshold_db: float, floor_db: float = -60.0) -> float:
    """Detection level: ``threshold_db`` above the median frame energy.

    The median is capped at ``floor_db`` so recordings with no silence at all
    (a median sitting on speech) are still detected.
    """
    reference = min(float(np.median(energies)), floor_db) if energies.size else floor_db
    return reference + threshold_db


def energy_vad(
    audio: AudioBuffer,
    frame: float = 0.03,
    hop: float = 0.01,
    threshold_db: float = 6.0,
    hangover: float = 0.1,
    floor_db: float = -60.0,
    recording_id: str = "",
) -> Timeline:
    if not (frame >= hop > 0):
        raise AudioError("energy_vad requires frame >= hop > 0")
    if len(audio) == 0:
        raise AudioError("energy_vad on empty audio")
    energies = frame_energies_db(audio, frame, hop)
    if energies.size == 0:
        return Timeline(recording_id)
    level = vad_threshold_db(energies, threshold_db, floor_db)
    active = energies > level
    flen = int(round(frame * audio.sample_rate))
    fhop = int(round(hop * audio.sample_rate))
    hang = int(round(hangover * audio.sample_rate))

    regions: list[list[int]] = []
    for i in np.flatnonzero(active):
        start = int(i) * fhop
        end = min(start + flen + hang, len(audio))
        if regions and start <= regions[-1][1]:
            regions[-1][1] = max(regions[-1][1], end)
        else:
            regions.append([start, end])
    sr = audio.sample_rate
    segments = []
    for start, end in regions:
        s_ms, e_ms = to_ms(start / sr), to_ms(end / sr)
        if e_ms > s_ms:
            segments.append(Segment(s_ms / 1000.0, (e_ms - s_ms) / 1000.0, "speech"))
    return Timeline(recording_id, tuple(segments))


def build_stream(
    audio: AudioBuffer, speech: Timeline, speaker_id: str, tags: Mapping[str, str] | None = None
) -> SpeakerStream:
    """Concatenate the speech regions of ``audio`` in temporal order."""
    sr = audio.sample_rate
    pieces = []
    for start_ms, end_ms in speech.intervals_ms():
        start = int(round(start_ms * sr / 1000))
        end = int(round(end_ms * sr / 1000))
        if end > len(audio):
            raise AudioError(
                f"speech region {start_ms / 1000:.3f}-{end_ms / 1000:.3f}s exceeds "
                f"buffer of {audio.duration:.3f}s"
            )
        pieces.append(audio.samples[start:end])
    samples = np.concatenate(pieces) if pieces else np.empty(0)
    return SpeakerStream(speaker_id, AudioBuffer(samples, sr), dict(tags or {}))


@dataclass(frozen=True)
class VoiceSpec:
    """Parameters of a source-filter synthetic voice."""

    f0: float
    resonance_centers: tuple[float, float] = (500.0, 1500.0)
    noise_mix: float = 0.1
    jitter: float = 0.005
    seed: int = 0
    intonation: float = 0.0  # depth of a slow random f0 contour, as a fraction of f0

    def validate(self, sample_rate: int) -> None:
        nyquist = sample_rate / 2
        if self.f0 >= nyquist:
            raise AudioError(f"f0 {self.f0} Hz at or above Nyquist ({nyquist} Hz)")
        if not 50 <= self.f0 <= 500:
            raise AudioError(f"f0 {self.f0} Hz outside [50, 500]")
        if any(not 0 < c < nyquist for c in self.resonance_centers):
            raise AudioError(f"resonance centers {self.resonance_centers} must lie in (0, Nyquist)")
        if not 0.0 <= self.noise_mix <= 1.0:
            raise AudioError(f"noise_mix {self.noise_mix} outside [0, 1]")
        if self.jitter < 0:
            raise AudioError("jitter must be non-negative")
        if not 0.0 <= self.intonation < 0.5:
            raise AudioError("intonation must lie in [0, 0.5)")


def _resonator(center: float, bandwidth: float, sample_rate: int) -> tuple[np.ndarray, np.ndarray]:
    # two-pole resonator normalized to unit gain at the center frequency
    r = np.exp(-np.pi * bandwidth / sample_rate)
    theta = 2 * np.pi * center / sample_rate
    a = np.array([1.0, -2 * r * np.cos(theta), r * r])
    _, h = signal.freqz([1.0], a, worN=[theta])
    return np.array([1.0 / abs(h[0])]), a


def _intonation_contour(n: int, sample_rate: int, depth: float, rng: np.random.Generator) -> np.ndarray:
    """Multiplicative f0 contour: random knots every second, linearly interpolated."""
    if depth == 0:
        return np.ones(n)
    knots = int(np.ceil(n / (1.0 * sample_rate))) + 2
    values = np.clip(rng.standard_normal(knots), -2.0, 2.0) / 2.0
    positions = np.arange(knots) * 1.0 * sample_rate
    return 1.0 + depth * np.interp(np.arange(n), positions, values)


def synth_voice(spec: VoiceSpec, duration: float, sample_rate: int = DEFAULT_SAMPLE_RATE) -> AudioBuffer:
    """Jittered pulse train, spectrally tilted, with two band emphases and noise."""
    if duration <= 0:
        raise AudioError("duration must be positive")
    spec.validate(sample_rate)
    rng = np.random.default_rng(spec.seed)
    n = int(round(duration * sample_rate))

    contour = _intonation_contour(n, sample_rate, spec.intonation, rng)
    pulses = np.zeros(n)
    t = 0.0
    while t < n:
        pulses[int(t)] = 1.0
        period = sample_rate / (spec.f0 * contour[int(t)])
        t += period * max(0.1, 1.0 + spec.jitter * rng.standard_normal())

    # glottal roll-off: two one-pole low-passes, about -12 dB/octave above ~100 Hz
    pole = np.exp(-2 * np.pi * 100.0 / sample_rate)
    source = signal.lfilter([1.0 - pole], [1.0, -pole], pulses)
    source = signal.lfilter([1.0 - pole], [1.0, -pole], source)
    source = source - source.mean()
    voiced = source.copy()
    for center in spec.resonance_centers:
        b, a = _resonator(center, 150.0, sample_rate)
        voiced += signal.lfilter(b, a, source)

    noise = rng.standard_normal(n)
    voiced /= max(np.sqrt(np.mean(voiced**2)), 1e-12)
    mixed = (1.0 - spec.noise_mix) * voiced + spec.noise_mix * noise
    peak = np.max(np.abs(mixed))
    if peak > 0:
        mixed *= 0.5 / peak
    return AudioBuffer(mixed, sample_rate)


def synth_speaker(
    spec: VoiceSpec,
    duration: float,
    sample_rate: int = DEFAULT_SAMPLE_RATE,
    speaker_id: str = "",
    tags: Mapping[str, str] | None = None,
) -> SpeakerStream:
    audio = synth_voice(spec, duration, sample_rate)
    return SpeakerStream(speaker_id or f"voice{spec.seed}", audio, dict(tags or {}))
