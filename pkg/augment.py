"""
Training-pair construction: additive noise mixing, synthetic room impulse
responses, and the synthetic speech-like / noise corpus.

Pairs are a pure function of (seed, index), so disjoint index ranges can be
generated independently and a resumed run sees the same pairs.
"""

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterator

import numpy as np
from scipy.signal import butter, convolve, sosfilt

from dsp import SAMPLE_RATE, Waveform, read_wav
from errors import ConfigError, ContractViolation

logger = logging.getLogger(__name__)

DECAY_TO_T60 = math.log(1000.0)  # 6.9078: amplitude e^(-t/tau) falls 60 dB after t60 = 6.9078 tau
RIR_TAIL_GAIN = 0.1
MAX_T60 = 2.0
MIN_RIR_LENGTH = 256
STRONG_T60 = (0.4, 1.2)
WEAK_T60 = (0.07, 0.25)

MIN_SPEECH_DURATION = 1.4
LEAD_SILENCE_S = 0.05
SYLLABLE_S = (0.08, 0.25)
GAP_S = (0.1, 0.3)
RAMP_S = 0.01
F0_HZ = (100.0, 300.0)
HARMONIC_CEILING_HZ = 4000.0


class AugmentationKind(str, Enum):
    ADDITIVE = "additive"
    CONVOLUTIONAL = "convolutional"


class Task(str, Enum):
    NOISE = "noise"
    REVERB = "reverb"


@dataclass(frozen=True)
class NoiseMixParams:
    gain_mean_db: float = -5.0
    gain_std_db: float = 10.0

    def __post_init__(self):
        if not self.gain_std_db >= 0:
            raise ConfigError(f"gain_std_db must be >= 0, got {self.gain_std_db}")


@dataclass(frozen=True, eq=False)
class RoomImpulseResponse:
    kernel: np.ndarray
    t60_seconds: float

    def __post_init__(self):
        kernel = np.asarray(self.kernel, dtype=np.float64).reshape(-1)
        object.__setattr__(self, "kernel", kernel)
        if kernel.size < 1 or not np.isfinite(kernel).all():
            raise ContractViolation("RIR kernel must be finite with at least one tap")


@dataclass(frozen=True, eq=False)
class Augmentation:
    """Either additive (noise waveform + gain in dB) or convolutional (RIR)."""
    kind: AugmentationKind
    noise: Waveform | None = None
    gain_db: float | None = None
    rir: RoomImpulseResponse | None = None

    def __post_init__(self):
        additive = self.noise is not None and self.gain_db is not None
        convolutional = self.rir is not None
        if self.kind is AugmentationKind.ADDITIVE and not (additive and not convolutional):
            raise ContractViolation("additive augmentation needs noise and gain_db only")
        if self.kind is AugmentationKind.CONVOLUTIONAL and not (convolutional and self.noise is None):
            raise ContractViolation("convolutional augmentation needs an RIR only")

    @classmethod
    def additive(cls, noise: Waveform, gain_db: float) -> "Augmentation":
        return cls(AugmentationKind.ADDITIVE, noise=noise, gain_db=gain_db)

    @classmethod
    def convolutional(cls, rir: RoomImpulseResponse) -> "Augmentation":
        return cls(AugmentationKind.CONVOLUTIONAL, rir=rir)

    @property
    def gain(self) -> float:
        return 10.0 ** (self.gain_db / 20.0)

    @property
    def t60_seconds(self) -> float | None:
        return self.rir.t60_seconds if self.rir is not None else None

    def describe(self) -> dict:
        if self.kind is AugmentationKind.ADDITIVE:
            return {"kind": self.kind.value, "gain_db": self.gain_db}
        return {"kind": self.kind.value, "t60_seconds": self.rir.t60_seconds, "rir_length": self.rir.kernel.size}


@dataclass(frozen=True, eq=False)
class TrainingPair:
    """
    (x_A, target_A) and (x_B, target_B) plus the swap target.

    `transplanted` is the output expected after exchanging environment
    partitions, and `receiver` names which side ("a" or "b") receives the
    donor's environment: the noise task puts B's noise on A's speech, the
    reverb task puts A's room on B's speech (then target_b == transplanted).
    """
    input_a: Waveform
    target_a: Waveform
    input_b: Waveform
    target_b: Waveform
    augmentation_a: Augmentation
    augmentation_b: Augmentation
    transplanted: Waveform
    receiver: str
    task: Task
    index: int = 0

    def annotation(self) -> dict:
        return {
            "index": self.index,
            "task": self.task.value,
            "receiver": self.receiver,
            "length": len(self.input_a),
            "augmentation_a": self.augmentation_a.describe(),
            "augmentation_b": self.augmentation_b.describe(),
        }


# === AUGMENTATION ===

def apply_augmentation(clean: Waveform, a: Augmentation) -> Waveform:
    if a.kind is AugmentationKind.ADDITIVE:
        if a.noise.sample_rate != clean.sample_rate:
            raise ContractViolation(f"noise rate {a.noise.sample_rate} != speech rate {clean.sample_rate}")
        if len(a.noise) != len(clean):
            raise ContractViolation(f"noise length {len(a.noise)} != speech length {len(clean)}")
        if a.gain_db == -math.inf:
            return clean.peak_normalized()
        return clean.with_samples(clean.peak_normalized().samples + a.gain * a.noise.peak_normalized().samples)

    # causal: y[n] = sum_k h[k] x[n-k], truncated to the input length
    wet = convolve(clean.samples, a.rir.kernel, mode="full")[: len(clean)]
    return clean.with_samples(wet)


def sample_noise_gain_db(rng: np.random.Generator, params: NoiseMixParams = NoiseMixParams()) -> float:
    if params.gain_mean_db == -math.inf:
        return -math.inf
    return float(params.gain_mean_db + params.gain_std_db * rng.standard_normal())


def sample_noise_gain(rng: np.random.Generator, params: NoiseMixParams = NoiseMixParams()) -> float:
    """Linear gain 10^(g/20) with g ~ Normal(mean_db, std_db); a -inf mean gives exactly 0."""
    return 10.0 ** (sample_noise_gain_db(rng, params) / 20.0)


def sample_t60(rng: np.random.Generator, low: float, high: float) -> float:
    """Log-uniform draw over [low, high]."""
    return float(min(high, max(low, math.exp(rng.uniform(math.log(low), math.log(high))))))


def rir_length_for(t60: float, sample_rate: int = SAMPLE_RATE) -> int:
    return max(MIN_RIR_LENGTH, int(round(1.2 * t60 * sample_rate)))


def synthesize_rir(t60: float, length: int, rng: np.random.Generator,
                   sample_rate: int = SAMPLE_RATE) -> RoomImpulseResponse:
    """Unit direct path plus a white-noise tail with amplitude envelope e^(-t/tau), tau = t60 / 6.9078."""
    if not 0.0 < t60 <= MAX_T60:
        raise ContractViolation(f"t60 must be in (0, {MAX_T60}] seconds, got {t60}")
    if length < MIN_RIR_LENGTH:
        raise ContractViolation(f"RIR length must be >= {MIN_RIR_LENGTH} samples, got {length}")
    tau = t60 / DECAY_TO_T60
    n = np.arange(1, length)
    kernel = np.empty(length)
    kernel[0] = 1.0
    kernel[1:] = RIR_TAIL_GAIN * np.exp(-n / (tau * sample_rate)) * rng.standard_normal(length - 1)
    return RoomImpulseResponse(kernel=kernel, t60_seconds=t60)


# === SYNTHETIC CORPUS ===

def _ramp_envelope(length: int, ramp: int) -> np.ndarray:
    env = np.ones(length)
    ramp = min(ramp, length // 2)
    if ramp:
        rise = np.linspace(0.0, 1.0, ramp, endpoint=False)
        env[:ramp] = rise
        env[length - ramp:] = rise[::-1]
    return env


def synth_speech(rng: np.random.Generator, duration_s: float = 1.92, sample_rate: int = SAMPLE_RATE) -> Waveform:
    """
    Speech-like signal: harmonic syllables with a gliding f0 in 100-300 Hz and
    a slowly modulated trapezoid envelope, separated by 100-300 ms silences.
    """
    if duration_s < MIN_SPEECH_DURATION:
        raise ConfigError(f"synthetic speech needs >= {MIN_SPEECH_DURATION} s for two silence gaps, got {duration_s}")
    total = int(round(duration_s * sample_rate))
    out = np.zeros(total)
    pos = int(LEAD_SILENCE_S * sample_rate)
    ramp = int(RAMP_S * sample_rate)

    while True:
        length = int(rng.uniform(*SYLLABLE_S) * sample_rate)
        if pos + length > total:
            break
        f0 = np.linspace(rng.uniform(*F0_HZ), rng.uniform(*F0_HZ), length)
        phase = 2.0 * np.pi * np.cumsum(f0) / sample_rate
        tilt = rng.uniform(0.6, 1.4)
        voiced = np.zeros(length)
        for h in range(1, int(HARMONIC_CEILING_HZ // f0.max()) + 1):
            voiced += np.sin(h * phase + rng.uniform(0.0, 2.0 * np.pi)) / h ** tilt
        t = np.arange(length) / sample_rate
        wobble = 0.75 + 0.25 * np.sin(2.0 * np.pi * rng.uniform(3.0, 6.0) * t)
        out[pos: pos + length] = rng.uniform(0.5, 1.0) * _ramp_envelope(length, ramp) * wobble * voiced
        pos += length + int(rng.uniform(*GAP_S) * sample_rate)

    return Waveform(out, sample_rate).peak_normalized()


def synth_noise(rng: np.random.Generator, length: int, sample_rate: int = SAMPLE_RATE) -> Waveform:
    """White noise through a random 4th-order Butterworth band."""
    low = rng.uniform(50.0, 2000.0)
    high = min(low * rng.uniform(1.5, 8.0), 0.47 * sample_rate)
    sos = butter(4, [low, high], btype="bandpass", fs=sample_rate, output="sos")
    return Waveform(sosfilt(sos, rng.standard_normal(length)), sample_rate).peak_normalized()


@dataclass(frozen=True)
class CorpusConfig:
    """Either `count` synthetic items drawn from `seed`, or explicit 16 kHz WAV paths."""
    seed: int = 0
    count: int = 16
    duration_s: float = 1.92
    wav_paths: tuple[str, ...] = field(default_factory=tuple)

    def __post_init__(self):
        if self.count < 0:
            raise ConfigError(f"corpus count must be >= 0, got {self.count}")
        object.__setattr__(self, "wav_paths", tuple(self.wav_paths))

    def to_dict(self) -> dict:
        data = asdict(self)
        data["wav_paths"] = list(self.wav_paths)
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "CorpusConfig":
        unknown = set(data) - {"seed", "count", "duration_s", "wav_paths"}
        if unknown:
            raise ConfigError(f"unknown corpus keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def load(cls, path: str | Path) -> "CorpusConfig":
        path = Path(path)
        try:
            data = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read corpus manifest {path}: {e}") from e
        config = cls.from_dict(data)
        # relative WAV paths are resolved against the manifest's directory
        resolved = tuple(str(path.parent / p) if not Path(p).is_absolute() else p for p in config.wav_paths)
        return cls(config.seed, config.count, config.duration_s, resolved)


def build_corpus(config: CorpusConfig) -> list[Waveform]:
    if config.wav_paths:
        length = int(round(config.duration_s * SAMPLE_RATE))
        items = []
        for path in config.wav_paths:
            samples = read_wav(path).samples[:length]
            items.append(Waveform(np.pad(samples, (0, length - samples.size))).peak_normalized())
        return items
    return [synth_speech(np.random.default_rng([config.seed, i]), config.duration_s) for i in range(config.count)]


# === PAIRS ===

def make_pair(task: Task, corpus: list[Waveform], seed: int, index: int,
              noise_params: NoiseMixParams = NoiseMixParams()) -> TrainingPair:
    if not corpus:
        raise ConfigError("cannot build training pairs from an empty corpus")
    rng = np.random.default_rng([seed, index])
    a = int(rng.integers(len(corpus)))
    b = a
    if len(corpus) > 1:
        b = int(rng.integers(len(corpus) - 1))
        b += b >= a
    length = min(len(corpus[a]), len(corpus[b]))
    clean_a = Waveform(corpus[a].samples[:length], corpus[a].sample_rate).peak_normalized()
    clean_b = Waveform(corpus[b].samples[:length], corpus[b].sample_rate).peak_normalized()

    if task is Task.NOISE:
        aug_a = Augmentation.additive(synth_noise(rng, length), sample_noise_gain_db(rng, noise_params))
        aug_b = Augmentation.additive(synth_noise(rng, length), sample_noise_gain_db(rng, noise_params))
        return TrainingPair(
            input_a=apply_augmentation(clean_a, aug_a), target_a=clean_a,
            input_b=apply_augmentation(clean_b, aug_b), target_b=clean_b,
            augmentation_a=aug_a, augmentation_b=aug_b,
            transplanted=apply_augmentation(clean_a, aug_b), receiver="a", task=task, index=index,
        )

    t60_a = sample_t60(rng, *STRONG_T60)
    t60_b = sample_t60(rng, *WEAK_T60)
    aug_a = Augmentation.convolutional(synthesize_rir(t60_a, rir_length_for(t60_a), rng))
    aug_b = Augmentation.convolutional(synthesize_rir(t60_b, rir_length_for(t60_b), rng))
    target_b = apply_augmentation(clean_b, aug_a)
    return TrainingPair(
        input_a=apply_augmentation(clean_a, aug_a), target_a=clean_a,
        input_b=apply_augmentation(clean_b, aug_b), target_b=target_b,
        augmentation_a=aug_a, augmentation_b=aug_b,
        transplanted=target_b, receiver="b", task=task, index=index,
    )


def make_pairs(task: Task, corpus: list[Waveform], seed: int, start: int = 0,
               noise_params: NoiseMixParams = NoiseMixParams()) -> Iterator[TrainingPair]:
    """Endless deterministic stream of pairs with indices start, start+1, ..."""
    if not corpus:
        raise ConfigError("cannot build training pairs from an empty corpus")
    index = start
    while True:
        yield make_pair(task, corpus, seed, index, noise_params)
        index += 1


def crop_pair(pair: TrainingPair, length: int, start: int = 0) -> TrainingPair:
    """Keep `length` samples of every waveform in the pair, beginning at `start`."""
    if start < 0 or (start > 0 and start + length > len(pair.input_a)):
        raise ContractViolation(f"crop [{start}, {start + length}) does not fit a {len(pair.input_a)}-sample pair")
    if start == 0 and length >= len(pair.input_a):
        return pair

    def cut(w: Waveform) -> Waveform:
        return Waveform(w.samples[start:start + length], w.sample_rate)

    return TrainingPair(
        input_a=cut(pair.input_a), target_a=cut(pair.target_a),
        input_b=cut(pair.input_b), target_b=cut(pair.target_b),
        augmentation_a=pair.augmentation_a, augmentation_b=pair.augmentation_b,
        transplanted=cut(pair.transplanted), receiver=pair.receiver, task=pair.task, index=pair.index,
    )
