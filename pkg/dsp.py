"""
Audio buffers, multi-scale mel spectrograms, the multi-scale spectral
reconstruction loss, SNR and 16-bit WAV I/O.

The spectrogram is built from autodiff ops so the same code serves the
training loss (gradients) and plain evaluation (constant tensors).
"""

import logging
import math
import warnings
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import librosa
import numpy as np
import soundfile as sf
from scipy.signal import get_window

import autodiff as ad
from errors import ConfigError, ContractViolation, FormatError, UndefinedMetric

logger = logging.getLogger(__name__)

SAMPLE_RATE = 16000
N_MELS = 64
WINDOW_LENGTHS = (64, 128, 256, 512, 1024, 2048)
LOG_EPS = 1e-5
SNR_EXACT = math.inf


@dataclass(frozen=True, eq=False)
class Waveform:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        object.__setattr__(self, "samples", samples)
        if self.sample_rate <= 0:
            raise ContractViolation(f"sample rate must be positive, got {self.sample_rate}")
        if samples.size == 0:
            raise ContractViolation("waveform must contain at least one sample")
        if not np.isfinite(samples).all():
            raise ContractViolation("waveform contains non-finite samples")

    def __len__(self):
        return self.samples.size

    @property
    def duration_s(self) -> float:
        return self.samples.size / self.sample_rate

    def peak(self) -> float:
        return float(np.max(np.abs(self.samples)))

    def peak_normalized(self) -> "Waveform":
        peak = self.peak()
        if peak == 0.0:
            return self
        return Waveform(self.samples / peak, self.sample_rate)

    def with_samples(self, samples: np.ndarray) -> "Waveform":
        return Waveform(samples, self.sample_rate)

    def scaled(self, factor: float) -> "Waveform":
        return Waveform(self.samples * factor, self.sample_rate)


@dataclass(frozen=True, eq=False)
class MelSpectrogram:
    frames: np.ndarray
    window_length: int
    sample_rate: int = SAMPLE_RATE

    @property
    def hop(self) -> int:
        return self.window_length // 4

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]


@dataclass(frozen=True)
class MelFilterbank:
    window_length: int
    sample_rate: int = SAMPLE_RATE
    weights: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "weights", _mel_weights(self.window_length, self.sample_rate))

    @property
    def centers_hz(self) -> np.ndarray:
        edges = librosa.mel_frequencies(N_MELS + 2, fmin=0.0, fmax=self.sample_rate / 2, htk=True)
        return edges[1:-1]


# === FILTERBANK & DFT ===

def _check_window(s: int):
    if s not in WINDOW_LENGTHS:
        raise ConfigError(f"window length must be one of {WINDOW_LENGTHS}, got {s}")


@lru_cache(maxsize=None)
def _mel_weights(s: int, sample_rate: int) -> np.ndarray:
    with warnings.catch_warnings():
        # short windows leave some low filters without a DFT bin; that is expected
        warnings.simplefilter("ignore", UserWarning)
        fb = librosa.filters.mel(sr=sample_rate, n_fft=s, n_mels=N_MELS, fmin=0.0, fmax=sample_rate / 2,
                                 htk=True, norm=None, dtype=np.float64)
    fb.setflags(write=False)
    return fb


@lru_cache(maxsize=None)
def _dft_matrices(s: int) -> tuple[np.ndarray, np.ndarray]:
    window = get_window("hann", s, fftbins=True)
    n = np.arange(s)[:, None]
    k = np.arange(s // 2 + 1)[None, :]
    phase = 2.0 * np.pi * n * k / s
    cos, sin = window[:, None] * np.cos(phase), -window[:, None] * np.sin(phase)
    cos.setflags(write=False)
    sin.setflags(write=False)
    return cos, sin


def num_frames(length: int, s: int) -> int:
    return -(-length // (s // 4))


def mel_tensor(signal: ad.Tensor, s: int, sample_rate: int = SAMPLE_RATE) -> ad.Tensor:
    """[num_frames x 64] mel power spectrogram of a 1-D tensor (causal framing)."""
    _check_window(s)
    hop = s // 4
    length = signal.shape[0]
    padded = ad.pad_time(signal, s - hop, num_frames(length, s) * hop - length)
    windowed = ad.frames(padded, s, hop)
    cos, sin = _dft_matrices(s)
    power = ad.square(windowed @ cos) + ad.square(windowed @ sin)
    return power @ _mel_weights(s, sample_rate).T


def mel_spectrogram(w: Waveform, s: int) -> MelSpectrogram:
    _check_window(s)
    frames = mel_tensor(ad.Tensor(w.samples), s, w.sample_rate).value
    return MelSpectrogram(frames=frames, window_length=s, sample_rate=w.sample_rate)


# === LOSS ===

def spectral_loss(estimate: ad.Tensor, target, sample_rate: int = SAMPLE_RATE,
                  scales: tuple[int, ...] = WINDOW_LENGTHS) -> ad.Tensor:
    """Multi-scale spectral reconstruction loss between two 1-D signals (differentiable in both)."""
    target = target if isinstance(target, ad.Tensor) else ad.Tensor(target)
    if estimate.shape != target.shape:
        raise ContractViolation(f"loss: length mismatch {estimate.shape} vs {target.shape}")
    ones = np.ones((N_MELS, 1))
    loss = ad.Tensor(0.0)
    for s in scales:
        est, ref = mel_tensor(estimate, s, sample_rate), mel_tensor(target, s, sample_rate)
        linear = ad.absolute(est - ref).sum()
        log_diff = ad.log(ad.clamp_min(est, LOG_EPS)) - ad.log(ad.clamp_min(ref, LOG_EPS))
        per_frame = ad.sqrt(ad.square(log_diff) @ ones)
        loss = loss + linear + math.sqrt(s / 2) * per_frame.sum()
    return loss


def loss_rec(x: Waveform, x_prime: Waveform, scales: tuple[int, ...] = WINDOW_LENGTHS) -> float:
    if len(x) != len(x_prime) or x.sample_rate != x_prime.sample_rate:
        raise ContractViolation(
            f"loss_rec needs equal lengths and rates: {len(x)}@{x.sample_rate} vs {len(x_prime)}@{x_prime.sample_rate}")
    for s in scales:
        _check_window(s)
    return float(spectral_loss(ad.Tensor(x.samples), x_prime.samples, x.sample_rate, scales).value)


# === METRICS ===

def snr_db(reference: Waveform, test: Waveform) -> float:
    """10*log10(sum ref^2 / sum (ref-test)^2); SNR_EXACT when the two are identical."""
    if len(reference) != len(test):
        raise ContractViolation(f"snr_db needs equal lengths: {len(reference)} vs {len(test)}")
    signal = float(np.sum(reference.samples ** 2))
    if signal == 0.0:
        raise UndefinedMetric("SNR is undefined for a zero-energy reference")
    error = float(np.sum((reference.samples - test.samples) ** 2))
    if error == 0.0:
        return SNR_EXACT
    return 10.0 * math.log10(signal / error)


def format_snr(value: float) -> str | float:
    return "exact" if value == SNR_EXACT else round(value, 4)


# === WAV I/O ===

def read_wav(path: str | Path) -> Waveform:
    """Read a 16-bit PCM mono 16 kHz WAV file; anything else is rejected."""
    path = Path(path)
    try:
        info = sf.info(str(path))
    except (RuntimeError, sf.LibsndfileError) as e:
        raise FormatError(f"{path}: not a readable audio file ({e})") from e

    problems = []
    if info.format != "WAV":
        problems.append(f"container {info.format} (need WAV)")
    if info.subtype != "PCM_16":
        problems.append(f"encoding {info.subtype} (need PCM_16)")
    if info.channels != 1:
        problems.append(f"{info.channels} channels (need mono)")
    if info.samplerate != SAMPLE_RATE:
        problems.append(f"{info.samplerate} Hz (need {SAMPLE_RATE} Hz, resampling is not supported)")
    if problems:
        raise FormatError(f"{path}: unsupported WAV: " + ", ".join(problems))

    samples, rate = sf.read(str(path), dtype="float64", always_2d=False)
    if samples.size == 0:
        raise FormatError(f"{path}: WAV file has no samples")
    return Waveform(samples, rate)


def write_wav(path: str | Path, w: Waveform):
    if w.sample_rate != SAMPLE_RATE:
        raise FormatError(f"only {SAMPLE_RATE} Hz WAV output is supported, got {w.sample_rate}")
    peak = w.peak()
    if peak > 1.0:
        logger.warning(f"Clipping {path}: peak {peak:.3f} exceeds full scale")
    samples = np.clip(w.samples, -1.0, 1.0)
    try:
        sf.write(str(path), samples, w.sample_rate, format="WAV", subtype="PCM_16")
    except (OSError, RuntimeError) as e:
        raise ConfigError(f"cannot write {path}: {e}") from e
