"""
Evaluation harnesses: blind T60 estimation by Schroeder integration, the
reverb-partition swap experiment, the weight sweep, and the denoising report.

Reports are JSON lines plus a plain-text summary; plots are optional PNGs.
"""

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from scipy.stats import linregress  # noqa: E402

from augment import CorpusConfig, Task, build_corpus, make_pair  # noqa: E402
from codec import (Codec, decode, decode_partition_only, mask_partition, scale_partition,  # noqa: E402
                   swap_partition, trimmed)
from dsp import WINDOW_LENGTHS, Waveform, format_snr, loss_rec, snr_db  # noqa: E402
from errors import ConfigError, EstimationUnavailable, UndefinedMetric  # noqa: E402

logger = logging.getLogger(__name__)

BLOCK_S = 0.01
LOUD_RANGE_DB = 20.0
MIN_REGION_S = 0.1
FIT_RANGE_DB = (-5.0, -25.0)
MIN_FIT_POINTS = 8
HELD_OUT_SEED_OFFSET = 100_000
SWEEP_FACTORS = (0.0, 0.25, 0.5, 0.75, 1.0)
BOOTSTRAP_ROUNDS = 1000


# === T60 ===

@dataclass(frozen=True)
class ReverbEstimate:
    t60_seconds: float
    fit_range_db: tuple[float, float]
    num_decay_regions: int
    region_estimates: tuple[float, ...]


def schroeder_curve(segment: np.ndarray) -> np.ndarray:
    """Backward-integrated energy in dB relative to the segment start (-inf once the tail is silent)."""
    energy = np.cumsum(segment[::-1] ** 2)[::-1]
    if energy.size == 0 or energy[0] <= 0.0:
        raise EstimationUnavailable("decay segment carries no energy")
    with np.errstate(divide="ignore"):
        return 10.0 * np.log10(energy / energy[0])


def _decay_fit(segment: np.ndarray, sample_rate: int) -> tuple[float, float, int, int] | None:
    """(slope dB/s, intercept, first, last) of the line fitted over FIT_RANGE_DB, or None."""
    try:
        curve = schroeder_curve(segment)
    except EstimationUnavailable:
        return None
    upper, lower = FIT_RANGE_DB
    below_upper = np.flatnonzero(curve <= upper)
    below_lower = np.flatnonzero(curve <= lower)
    if below_upper.size == 0 or below_lower.size == 0:
        return None
    first, last = below_upper[0], below_lower[0]
    idx = np.arange(first, last + 1)
    idx = idx[np.isfinite(curve[idx])]
    if idx.size < MIN_FIT_POINTS:
        return None
    fit = linregress(idx / sample_rate, curve[idx])
    if not fit.slope < 0.0:
        return None
    return float(fit.slope), float(fit.intercept), int(first), int(last)


def schroeder_t60(impulse_response: np.ndarray, sample_rate: int = 16000) -> float:
    """T60 of an impulse response from the slope of its Schroeder curve."""
    fit = _decay_fit(np.asarray(impulse_response, dtype=np.float64), sample_rate)
    if fit is None:
        raise EstimationUnavailable("impulse response does not decay through the fit range")
    return -60.0 / fit[0]


def find_decay_regions(samples: np.ndarray, sample_rate: int) -> list[tuple[int, int]]:
    """
    Free-decay regions: from the end of a run of loud 10 ms blocks (within
    20 dB of the loudest) to the next loud block or the end of the signal,
    kept when at least 100 ms long.
    """
    block = int(BLOCK_S * sample_rate)
    count = samples.size // block
    if count == 0:
        return []
    energy = (samples[: count * block].reshape(count, block) ** 2).mean(axis=1)
    peak = energy.max()
    if peak <= 0.0:
        return []
    loud = energy > peak * 10.0 ** (-LOUD_RANGE_DB / 10.0)

    regions, i = [], 0
    min_blocks = int(round(MIN_REGION_S / BLOCK_S))
    while i < count:
        if not loud[i]:
            i += 1
            continue
        while i < count and loud[i]:
            i += 1
        start = i
        while i < count and not loud[i]:
            i += 1
        if i - start >= min_blocks:
            regions.append((start * block, i * block if i < count else samples.size))
    return regions


def estimate_t60(w: Waveform) -> ReverbEstimate:
    regions = find_decay_regions(w.samples, w.sample_rate)
    estimates = []
    for start, end in regions:
        fit = _decay_fit(w.samples[start:end], w.sample_rate)
        if fit is not None:
            estimates.append(-60.0 / fit[0])
    if not estimates:
        raise EstimationUnavailable(f"no usable free-decay region ({len(regions)} candidate regions)")
    return ReverbEstimate(t60_seconds=float(np.median(estimates)), fit_range_db=FIT_RANGE_DB,
                          num_decay_regions=len(estimates), region_estimates=tuple(estimates))


def _try_t60(w: Waveform) -> tuple[float | None, str | None]:
    try:
        return estimate_t60(w).t60_seconds, None
    except EstimationUnavailable as e:
        return None, str(e)


# === SWAP EXPERIMENT ===

@dataclass
class SwapRecord:
    index: int
    before_a: float | None
    before_b: float | None
    after_a: float | None
    after_b: float | None
    errors: list[str] = field(default_factory=list)

    @property
    def valid(self) -> bool:
        return None not in (self.before_a, self.before_b, self.after_a, self.after_b)

    @property
    def flipped(self) -> bool:
        return (self.before_a > self.before_b) != (self.after_a > self.after_b)


def swap_experiment(codec: Codec, pairs: list[tuple[Waveform, Waveform]]) -> list[SwapRecord]:
    """Per pair: T60 of both reconstructions, then of both decodes with environments exchanged."""
    env = codec.config.environment
    records = []
    for index, (x_a, x_b) in enumerate(pairs):
        length = min(len(x_a), len(x_b))
        x_a = Waveform(x_a.samples[:length], x_a.sample_rate)
        x_b = Waveform(x_b.samples[:length], x_b.sample_rate)
        z_a, z_b = codec.transmit(x_a), codec.transmit(x_b)
        swapped_a, swapped_b = swap_partition(z_a, z_b, env)
        outputs = [trimmed(decode(z, codec), length) for z in (z_a, z_b, swapped_a, swapped_b)]
        estimates = [_try_t60(w) for w in outputs]
        record = SwapRecord(index, *(t for t, _ in estimates), errors=[e for _, e in estimates if e])
        if record.errors:
            logger.debug(f"swap item {index}: {record.errors}")
        records.append(record)
    return records


def flip_rate(records: list[SwapRecord]) -> float | None:
    valid = [r for r in records if r.valid]
    if not valid:
        return None
    return sum(r.flipped for r in valid) / len(valid)


# === WEIGHT SWEEP ===

@dataclass
class SweepResult:
    factors: tuple[float, ...]
    means: tuple[float | None, ...]
    ci_low: tuple[float | None, ...]
    ci_high: tuple[float | None, ...]
    counts: tuple[int, ...]
    skipped: int = 0

    def records(self) -> list[dict]:
        return [{"factor": f, "normalized_t60": m, "ci_low": lo, "ci_high": hi, "count": n}
                for f, m, lo, hi, n in zip(self.factors, self.means, self.ci_low, self.ci_high, self.counts)]


def weight_sweep(codec: Codec, inputs: list[Waveform], factors: tuple[float, ...] = SWEEP_FACTORS,
                 seed: int = 0, rounds: int = BOOTSTRAP_ROUNDS, allow_amplify: bool = False) -> SweepResult:
    """Scale the environment partition by each factor; T60 normalized by the factor-1 decode, with bootstrap CIs."""
    if not factors:
        raise ConfigError("weight sweep needs at least one factor")
    env = codec.config.environment
    ratios: dict[float, list[float]] = {f: [] for f in factors}
    skipped = 0
    for x in inputs:
        z = codec.transmit(x)
        base, _ = _try_t60(trimmed(decode(z, codec), len(x)))
        if base is None:
            skipped += 1
            continue
        for f in factors:
            if f == 1.0:
                ratios[f].append(1.0)
                continue
            t60, _ = _try_t60(trimmed(decode(scale_partition(z, env, f, allow_amplify), codec), len(x)))
            if t60 is not None:
                ratios[f].append(t60 / base)

    rng = np.random.default_rng(seed)
    means, lows, highs = [], [], []
    for f in factors:
        values = np.array(ratios[f])
        if values.size == 0:
            means.append(None)
            lows.append(None)
            highs.append(None)
            continue
        boot = rng.choice(values, size=(rounds, values.size), replace=True).mean(axis=1)
        means.append(float(values.mean()))
        lows.append(float(np.percentile(boot, 2.5)))
        highs.append(float(np.percentile(boot, 97.5)))
    return SweepResult(tuple(factors), tuple(means), tuple(lows), tuple(highs),
                       tuple(len(ratios[f]) for f in factors), skipped)


# === DENOISING ===

@dataclass
class DenoiseItem:
    index: int
    snr_input: float | None
    snr_masked: float | None
    snr_full: float | None
    improvement: float | None
    spectral_distance_masked: float
    spectral_distance_full: float
    snr_noise_only: float | None
    snr_swapped: float | None = None
    spectral_distance_swapped: float | None = None

    def record(self) -> dict:
        data = asdict(self)
        for key in ("snr_input", "snr_masked", "snr_full", "snr_noise_only", "snr_swapped"):
            if data[key] is not None:
                data[key] = format_snr(data[key])
        return data


@dataclass
class DenoiseReport:
    items: list[DenoiseItem]

    @property
    def mean_improvement(self) -> float | None:
        values = [i.improvement for i in self.items if i.improvement is not None]
        return float(np.mean(values)) if values else None

    @property
    def masked_better_fraction(self) -> float | None:
        pairs = [(i.snr_masked, i.snr_full) for i in self.items if i.snr_masked is not None and i.snr_full is not None]
        return sum(m > f for m, f in pairs) / len(pairs) if pairs else None

    @property
    def mean_swapped_snr(self) -> float | None:
        values = [i.snr_swapped for i in self.items if i.snr_swapped is not None and math.isfinite(i.snr_swapped)]
        return float(np.mean(values)) if values else None


def _snr(reference: Waveform, test: Waveform) -> float | None:
    try:
        return snr_db(reference, test)
    except UndefinedMetric:
        return None


def _swapped_scores(codec: Codec, items: list[tuple[Waveform, Waveform]], streams: list, index: int) -> dict:
    donor = (index + 1) % len(items)
    (noisy, clean), (donor_noisy, donor_clean) = items[index], items[donor]
    if donor == index or len(donor_noisy) != len(noisy):
        return {}
    swapped, _ = swap_partition(streams[index], streams[donor], codec.config.environment)
    output = trimmed(decode(swapped, codec), len(noisy))
    target = clean.with_samples(clean.samples + donor_noisy.samples - donor_clean.samples)
    return {"snr_swapped": _snr(target, output),
            "spectral_distance_swapped": loss_rec(target, output) / len(WINDOW_LENGTHS)}


def denoise_report(codec: Codec, items: list[tuple[Waveform, Waveform]]) -> DenoiseReport:
    """
    Per (noisy, clean) item: SNR gain of the noise-masked decode over the
    noisy input, plus the decode that carries the next item's noise partition
    scored against this item's clean speech with the next item's noise added.
    """
    env = codec.config.environment
    streams = [codec.transmit(noisy) for noisy, _ in items]
    out = []
    for index, (noisy, clean) in enumerate(items):
        z = streams[index]
        full = trimmed(decode(z, codec), len(noisy))
        masked = trimmed(decode(mask_partition(z, env), codec), len(noisy))
        snr_input, snr_masked = _snr(clean, noisy), _snr(clean, masked)
        improvement = None
        if snr_input is not None and snr_masked is not None and math.isfinite(snr_input) and math.isfinite(snr_masked):
            improvement = snr_masked - snr_input

        noise = noisy.with_samples(noisy.samples - clean.samples)
        noise_only = trimmed(decode(decode_partition_only(z, env), codec), len(noisy))
        out.append(DenoiseItem(
            index=index, snr_input=snr_input, snr_masked=snr_masked, snr_full=_snr(clean, full),
            improvement=improvement,
            spectral_distance_masked=loss_rec(clean, masked) / len(WINDOW_LENGTHS),
            spectral_distance_full=loss_rec(clean, full) / len(WINDOW_LENGTHS),
            snr_noise_only=_snr(noise, noise_only),
            **_swapped_scores(codec, items, streams, index),
        ))
    return DenoiseReport(out)


# === TEST SETS, REPORTS & PLOTS ===

def held_out_pairs(task: Task, count: int, seed: int, duration_s: float = 1.92):
    corpus = build_corpus(CorpusConfig(seed=seed + HELD_OUT_SEED_OFFSET, count=max(count, 2), duration_s=duration_s))
    return [make_pair(task, corpus, seed + HELD_OUT_SEED_OFFSET, i) for i in range(count)]


def write_jsonl(records: list[dict], path: Path):
    path.write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in records))


def plot_decay(w: Waveform, path: Path):
    fig, ax = plt.subplots(figsize=(7, 4))
    for start, end in find_decay_regions(w.samples, w.sample_rate):
        segment = w.samples[start:end]
        try:
            curve = schroeder_curve(segment)
        except EstimationUnavailable:
            continue
        t = np.arange(segment.size) / w.sample_rate
        ax.plot(t, curve, linewidth=1)
        fit = _decay_fit(segment, w.sample_rate)
        if fit is not None:
            slope, intercept, first, last = fit
            span = t[first: last + 1]
            ax.plot(span, intercept + slope * span, "k--", linewidth=1)
    ax.set_ylim(-60, 1)
    ax.set_xlabel("time in region (s)")
    ax.set_ylabel("energy decay (dB)")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def plot_sweep(result: SweepResult, path: Path):
    fig, ax = plt.subplots(figsize=(5, 4))
    points = [(f, m, lo, hi) for f, m, lo, hi in zip(result.factors, result.means, result.ci_low, result.ci_high)
              if m is not None]
    if points:
        f, m, lo, hi = map(np.array, zip(*points))
        ax.errorbar(f, m, yerr=[np.maximum(m - lo, 0.0), np.maximum(hi - m, 0.0)], marker="o", capsize=3)
    ax.set_xlabel("environment weight")
    ax.set_ylabel("normalized T60")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def run_evaluation(kind: str, codec: Codec, out_dir: str | Path, count: int, seed: int,
                   factors: tuple[float, ...] = SWEEP_FACTORS, plot: bool = False, duration_s: float = 1.92,
                   allow_amplify: bool = False) -> list[Path]:
    """Run one harness on a held-out set; returns the report files written."""
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise ConfigError(f"cannot create report directory {out_dir}: {e}") from e
    task = codec.config.task
    records_path, summary_path = out_dir / f"{kind}.jsonl", out_dir / f"{kind}.txt"
    written = [records_path, summary_path]

    if kind == "denoise":
        pairs = held_out_pairs(task, count, seed, duration_s)
        report = denoise_report(codec, [(p.input_a, p.target_a) for p in pairs])
        write_jsonl([i.record() for i in report.items], records_path)
        summary = [f"items: {len(report.items)}",
                   f"mean SNR improvement (dB): {report.mean_improvement}",
                   f"masked beats full reconstruction: {report.masked_better_fraction}",
                   f"mean SNR of the noise-swapped decode (dB): {report.mean_swapped_snr}"]
    elif kind == "swap":
        pairs = held_out_pairs(task, count, seed, duration_s)
        records = swap_experiment(codec, [(p.input_a, p.input_b) for p in pairs])
        write_jsonl([asdict(r) for r in records], records_path)
        summary = [f"pairs: {len(records)}", f"valid: {sum(r.valid for r in records)}",
                   f"sign flip rate: {flip_rate(records)}"]
        if plot and pairs:
            plot_decay(pairs[0].input_a, out_dir / "swap_decay.png")
            written.append(out_dir / "swap_decay.png")
    elif kind == "sweep":
        pairs = held_out_pairs(task, count, seed, duration_s)
        result = weight_sweep(codec, [p.input_a for p in pairs], factors, seed=seed, allow_amplify=allow_amplify)
        write_jsonl(result.records(), records_path)
        summary = [f"inputs: {len(pairs)} (skipped {result.skipped})"] + [
            f"factor {r['factor']}: {r['normalized_t60']} [{r['ci_low']}, {r['ci_high']}] n={r['count']}"
            for r in result.records()]
        if plot:
            plot_sweep(result, out_dir / "sweep.png")
            written.append(out_dir / "sweep.png")
    else:
        raise ConfigError(f"unknown evaluation kind {kind!r}")

    summary_path.write_text("\n".join(summary) + "\n")
    logger.info(f"{kind} report: " + "; ".join(summary))
    return written
