"""
Partitioned streaming codec: configuration and presets, the causal
encoder/decoder networks, partition edits (mask / swap / scale) and
tick-by-tick streaming inference.

Every layer has two forward paths over the same weights:

- `__call__` builds autodiff tensors over a whole crop (training);
- `step` consumes one frame tick of plain arrays and carries its own
  history in a per-stream state dict (inference).

Inference always runs tick by tick, so any chunking of the input into
multiples of `frame_samples` produces bit-identical embeddings and audio.
"""

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

import autodiff as ad
import checkpoint
from augment import Task
from dsp import SAMPLE_RATE, Waveform
from errors import ConfigError, ContractViolation, PartitionLookupError
from rvq import CodeGrid, ResidualQuantizer, straight_through

logger = logging.getLogger(__name__)

SLOW_DIVISOR = 10
EDGE_KERNEL = 7
RESIDUAL_KERNEL = 3
PROJECTION_KERNEL = 3
MAX_CODEBOOK_BITS = 16
QUANTIZATION_MODES = ("per-partition", "global", "none")


# === CONFIGURATION ===

@dataclass(frozen=True)
class PartitionSpec:
    name: str
    dim: int
    frame_rate_divisor: int = 1
    n_q: int = 4
    codebook_bits: int = 6

    def __post_init__(self):
        if not self.name or len(self.name.encode()) > 255:
            raise ConfigError(f"partition name must be 1-255 bytes, got {self.name!r}")
        if self.dim < 1:
            raise ConfigError(f"partition {self.name}: dim must be >= 1, got {self.dim}")
        if self.frame_rate_divisor not in (1, SLOW_DIVISOR):
            raise ConfigError(f"partition {self.name}: frame_rate_divisor must be 1 or {SLOW_DIVISOR}, "
                              f"got {self.frame_rate_divisor}")
        if self.n_q < 0:
            raise ConfigError(f"partition {self.name}: n_q must be >= 0, got {self.n_q}")
        if not 1 <= self.codebook_bits <= MAX_CODEBOOK_BITS:
            raise ConfigError(f"partition {self.name}: codebook_bits must be in 1..{MAX_CODEBOOK_BITS}, "
                              f"got {self.codebook_bits}")

    @property
    def slow(self) -> bool:
        return self.frame_rate_divisor > 1


@dataclass(frozen=True)
class CodecConfig:
    partitions: tuple[PartitionSpec, ...]
    environment: str
    sample_rate: int = SAMPLE_RATE
    strides: tuple[int, ...] = (2, 4, 5, 8)
    channels: tuple[int, ...] = (16, 16, 32, 32, 64)
    quantization: str = "per-partition"

    def __post_init__(self):
        object.__setattr__(self, "partitions", tuple(self.partitions))
        object.__setattr__(self, "strides", tuple(self.strides))
        object.__setattr__(self, "channels", tuple(self.channels))
        names = [p.name for p in self.partitions]
        if not names:
            raise ConfigError("codec needs at least one partition")
        if len(set(names)) != len(names):
            raise ConfigError(f"partition names must be unique, got {names}")
        if self.environment not in names:
            raise ConfigError(f"environment partition {self.environment!r} is not one of {names}")
        if not self.fast_partitions:
            raise ConfigError("codec needs at least one fast (divisor 1) partition")
        if len(self.partitions) - len(self.fast_partitions) > 1:
            raise ConfigError("at most one slow partition is supported")
        if len(self.channels) != len(self.strides) + 1:
            raise ConfigError(f"need len(strides)+1 channel widths, got {self.channels} for {self.strides}")
        if any(s < 1 for s in self.strides) or any(c < 1 for c in self.channels):
            raise ConfigError(f"strides and channels must be positive: {self.strides}, {self.channels}")
        if self.sample_rate <= 0:
            raise ConfigError(f"sample_rate must be positive, got {self.sample_rate}")
        if self.quantization not in QUANTIZATION_MODES:
            raise ConfigError(f"quantization must be one of {QUANTIZATION_MODES}, got {self.quantization!r}")
        if self.quantization == "global" and self.slow_partition is not None:
            raise ConfigError("global quantization cannot cover a slow partition")

    @property
    def frame_samples(self) -> int:
        return math.prod(self.strides)

    @property
    def frame_rate_hz(self) -> float:
        return self.sample_rate / self.frame_samples

    @property
    def total_dim(self) -> int:
        return sum(p.dim for p in self.partitions)

    @property
    def fast_partitions(self) -> tuple[PartitionSpec, ...]:
        return tuple(p for p in self.partitions if not p.slow)

    @property
    def fast_dim(self) -> int:
        return sum(p.dim for p in self.fast_partitions)

    @property
    def slow_partition(self) -> PartitionSpec | None:
        return next((p for p in self.partitions if p.slow), None)

    @property
    def task(self) -> Task:
        return Task.REVERB if self.partition(self.environment).slow else Task.NOISE

    def partition(self, name: str) -> PartitionSpec:
        for p in self.partitions:
            if p.name == name:
                return p
        raise PartitionLookupError(f"unknown partition {name!r}; known: {[p.name for p in self.partitions]}")

    def to_dict(self) -> dict:
        data = asdict(self)
        data["partitions"] = [asdict(p) for p in self.partitions]
        data["strides"] = list(self.strides)
        data["channels"] = list(self.channels)
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "CodecConfig":
        try:
            fields = dict(data)
            fields["partitions"] = tuple(PartitionSpec(**p) for p in fields["partitions"])
            return cls(**fields)
        except (KeyError, TypeError) as e:
            raise ConfigError(f"invalid codec config: {e}") from e

    @classmethod
    def load(cls, path: str | Path) -> "CodecConfig":
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read codec config {path}: {e}") from e
        return cls.from_dict(data)


PRESETS: dict[str, CodecConfig] = {
    "noise-split": CodecConfig(
        partitions=(PartitionSpec("speech", 128, 1, 14, 9), PartitionSpec("noise", 128, 1, 14, 9)),
        environment="noise",
    ),
    "reverb-split": CodecConfig(
        partitions=(PartitionSpec("speech", 54, 1, 14, 9), PartitionSpec("reverb", 10, SLOW_DIVISOR, 4, 9)),
        environment="reverb",
    ),
    "noise-toy": CodecConfig(
        partitions=(PartitionSpec("speech", 32, 1, 4, 6), PartitionSpec("noise", 32, 1, 4, 6)),
        environment="noise",
    ),
    "reverb-toy": CodecConfig(
        partitions=(PartitionSpec("speech", 54, 1, 4, 6), PartitionSpec("reverb", 10, SLOW_DIVISOR, 4, 6)),
        environment="reverb",
    ),
}


def preset(name: str) -> CodecConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; available: {sorted(PRESETS)}")
    return PRESETS[name]


# === EMBEDDINGS & PARTITION EDITS ===

@dataclass(frozen=True, eq=False)
class PartitionedEmbeddings:
    """
    Per-partition matrices: fast partitions [F x dim], the slow one [ceil(F/10) x dim].
    Values are numpy arrays at inference and autodiff tensors during training;
    the edit operations treat both alike.
    """
    config: CodecConfig
    partitions: dict[str, Any]
    original_length: int | None = None

    def __post_init__(self):
        names = [p.name for p in self.config.partitions]
        if set(self.partitions) != set(names):
            raise ContractViolation(f"embedding partitions {sorted(self.partitions)} do not match config {names}")
        object.__setattr__(self, "partitions", {name: self.partitions[name] for name in names})

        frames = {self.partitions[p.name].shape[0] for p in self.config.fast_partitions}
        if len(frames) != 1:
            raise ContractViolation(f"fast partitions disagree on frame count: {sorted(frames)}")
        count = frames.pop()
        for p in self.config.partitions:
            shape = self.partitions[p.name].shape
            expected = (-(-count // p.frame_rate_divisor), p.dim)
            if tuple(shape) != expected:
                raise ContractViolation(f"partition {p.name}: shape {tuple(shape)}, expected {expected}")

    @property
    def num_frames(self) -> int:
        return self.partitions[self.config.fast_partitions[0].name].shape[0]

    def __getitem__(self, name: str):
        self.config.partition(name)
        return self.partitions[name]

    def replace(self, name: str, value) -> "PartitionedEmbeddings":
        self.config.partition(name)
        return PartitionedEmbeddings(self.config, {**self.partitions, name: value}, self.original_length)

    def tick_slice(self, start: int, stop: int) -> dict[str, np.ndarray]:
        """Rows a decoder consumes on ticks start..stop-1 (slow rows j with 10j in range)."""
        rows = {}
        for p in self.config.partitions:
            d = p.frame_rate_divisor
            rows[p.name] = self.partitions[p.name][-(-start // d): -(-stop // d)]
        return rows

    def prefix(self, frames: int) -> "PartitionedEmbeddings":
        parts = {name: rows[: -(-frames // self.config.partition(name).frame_rate_divisor)]
                 for name, rows in self.partitions.items()}
        return PartitionedEmbeddings(self.config, parts)


def _zeros_like(value):
    if isinstance(value, ad.Tensor):
        return ad.Tensor(np.zeros(value.shape))
    return np.zeros(value.shape)


def mask_partition(z: PartitionedEmbeddings, name: str) -> PartitionedEmbeddings:
    return z.replace(name, _zeros_like(z[name]))


def swap_partition(z_a: PartitionedEmbeddings, z_b: PartitionedEmbeddings,
                   name: str) -> tuple[PartitionedEmbeddings, PartitionedEmbeddings]:
    if z_a.config != z_b.config:
        raise ContractViolation("swap_partition needs embeddings of the same codec config")
    if z_a.num_frames != z_b.num_frames:
        raise ContractViolation(f"swap_partition: frame counts differ ({z_a.num_frames} vs {z_b.num_frames})")
    donor_a, donor_b = z_a[name], z_b[name]
    return z_a.replace(name, donor_b), z_b.replace(name, donor_a)


def scale_partition(z: PartitionedEmbeddings, name: str, w: float,
                    allow_amplify: bool = False) -> PartitionedEmbeddings:
    value = z[name]
    if w < 0.0 or (w > 1.0 and not allow_amplify):
        raise ContractViolation(f"partition weight must be in [0, 1] (got {w}); pass allow_amplify for w > 1")
    if w == 0.0:
        return mask_partition(z, name)
    if w == 1.0:
        return z
    return z.replace(name, value * w)


def decode_partition_only(z: PartitionedEmbeddings, name: str) -> PartitionedEmbeddings:
    """Keep `name`, zero every other partition."""
    z.config.partition(name)
    for other in z.config.partitions:
        if other.name != name:
            z = mask_partition(z, other.name)
    return z


# === LAYERS ===

class CausalConv:
    def __init__(self, name: str, cin: int, cout: int, kernel_size: int, stride: int = 1):
        self.name = name
        self.cin, self.cout = cin, cout
        self.kernel_size, self.stride = kernel_size, stride

    def init(self, store: ad.ParameterStore, rng: np.random.Generator):
        scale = 1.0 / math.sqrt(self.kernel_size * self.cin)
        store.add(f"{self.name}.weight", rng.normal(0.0, scale, (self.kernel_size, self.cin, self.cout)))
        store.add(f"{self.name}.bias", np.zeros(self.cout))

    def convs(self) -> list["CausalConv"]:
        return [self]

    def __call__(self, store: ad.ParameterStore, x: ad.Tensor) -> ad.Tensor:
        return ad.conv1d_causal(x, store[f"{self.name}.weight"], store[f"{self.name}.bias"], self.stride)

    def step(self, store: ad.ParameterStore, x: np.ndarray, state: dict) -> np.ndarray:
        history, consumed = state.get(self.name, (np.zeros((self.kernel_size - 1, self.cin)), 0))
        extended = np.concatenate([history, x])
        # first output whose window ends inside this chunk
        start = -(-consumed // self.stride) * self.stride - consumed
        out = ad.conv1d_valid(extended[start:], store[f"{self.name}.weight"].value,
                              store[f"{self.name}.bias"].value, self.stride)
        state[self.name] = (extended[extended.shape[0] - (self.kernel_size - 1):], consumed + x.shape[0])
        return out


class CausalConvTranspose(CausalConv):
    """Upsampling by `stride`; frame t writes samples t*stride .. t*stride+K-1."""

    def __call__(self, store: ad.ParameterStore, x: ad.Tensor) -> ad.Tensor:
        return ad.conv1d_transposed(x, store[f"{self.name}.weight"], store[f"{self.name}.bias"],
                                    self.stride, causal=True)

    def step(self, store: ad.ParameterStore, x: np.ndarray, state: dict) -> np.ndarray:
        cols = ad.transposed_columns(x, store[f"{self.name}.weight"].value)
        buffer = ad.overlap_add(cols, self.stride)
        carry = state.get(self.name, np.zeros((max(self.kernel_size - self.stride, 0), self.cout)))
        buffer[: carry.shape[0]] += carry
        n = self.stride * x.shape[0]
        state[self.name] = buffer[n:]
        return buffer[:n] + store[f"{self.name}.bias"].value


class ResidualUnit:
    def __init__(self, name: str, channels: int):
        self.conv_a = CausalConv(f"{name}.conv_a", channels, channels, RESIDUAL_KERNEL)
        self.conv_b = CausalConv(f"{name}.conv_b", channels, channels, 1)

    def convs(self) -> list[CausalConv]:
        return [self.conv_a, self.conv_b]

    def __call__(self, store, x: ad.Tensor) -> ad.Tensor:
        h = self.conv_a(store, ad.elu(x))
        return x + self.conv_b(store, ad.elu(h))

    def step(self, store, x: np.ndarray, state: dict) -> np.ndarray:
        h = self.conv_a.step(store, ad.elu_array(x), state)
        return x + self.conv_b.step(store, ad.elu_array(h), state)


class EncoderBlock:
    def __init__(self, name: str, cin: int, cout: int, stride: int):
        self.residual = ResidualUnit(f"{name}.residual", cin)
        self.down = CausalConv(f"{name}.down", cin, cout, 2 * stride, stride)

    def convs(self) -> list[CausalConv]:
        return self.residual.convs() + [self.down]

    def __call__(self, store, x):
        return self.down(store, ad.elu(self.residual(store, x)))

    def step(self, store, x, state):
        return self.down.step(store, ad.elu_array(self.residual.step(store, x, state)), state)


class DecoderBlock:
    def __init__(self, name: str, cin: int, cout: int, stride: int):
        self.up = CausalConvTranspose(f"{name}.up", cin, cout, 2 * stride, stride)
        self.residual = ResidualUnit(f"{name}.residual", cout)

    def convs(self) -> list[CausalConv]:
        return [self.up] + self.residual.convs()

    def __call__(self, store, x):
        return self.residual(store, self.up(store, ad.elu(x)))

    def step(self, store, x, state):
        return self.residual.step(store, self.up.step(store, ad.elu_array(x), state), state)


class Encoder:
    def __init__(self, config: CodecConfig):
        c = config.channels
        self.input = CausalConv("encoder.input", 1, c[0], EDGE_KERNEL)
        self.blocks = [EncoderBlock(f"encoder.block{i}", c[i], c[i + 1], s) for i, s in enumerate(config.strides)]
        self.fast = CausalConv("encoder.fast", c[-1], config.fast_dim, PROJECTION_KERNEL)
        slow = config.slow_partition
        self.slow = CausalConv("encoder.slow", c[-1], slow.dim, SLOW_DIVISOR, SLOW_DIVISOR) if slow else None

    def convs(self) -> list[CausalConv]:
        layers = [self.input] + [conv for b in self.blocks for conv in b.convs()] + [self.fast]
        return layers + ([self.slow] if self.slow else [])

    def __call__(self, store, x: ad.Tensor) -> tuple[ad.Tensor, ad.Tensor | None]:
        h = self.input(store, x)
        for block in self.blocks:
            h = block(store, h)
        h = ad.elu(h)
        return self.fast(store, h), (self.slow(store, h) if self.slow else None)

    def step(self, store, x: np.ndarray, state: dict) -> tuple[np.ndarray, np.ndarray | None]:
        h = self.input.step(store, x, state)
        for block in self.blocks:
            h = block.step(store, h, state)
        h = ad.elu_array(h)
        return self.fast.step(store, h, state), (self.slow.step(store, h, state) if self.slow else None)


class Decoder:
    def __init__(self, config: CodecConfig):
        c = config.channels
        self.input = CausalConv("decoder.input", config.total_dim, c[-1], EDGE_KERNEL)
        self.blocks = [DecoderBlock(f"decoder.block{i}", c[i + 1], c[i], s)
                       for i, s in reversed(list(enumerate(config.strides)))]
        self.output = CausalConv("decoder.output", c[0], 1, EDGE_KERNEL)

    def convs(self) -> list[CausalConv]:
        return [self.input] + [conv for b in self.blocks for conv in b.convs()] + [self.output]

    def __call__(self, store, z: ad.Tensor) -> ad.Tensor:
        h = self.input(store, z)
        for block in self.blocks:
            h = block(store, h)
        return self.output(store, ad.elu(h))

    def step(self, store, z: np.ndarray, state: dict) -> np.ndarray:
        h = self.input.step(store, z, state)
        for block in self.blocks:
            h = block.step(store, h, state)
        return self.output.step(store, ad.elu_array(h), state)


# === MODEL ===

class Codec:
    """Weights (ParameterStore), quantizers and the two networks for one CodecConfig."""

    def __init__(self, config: CodecConfig, seed: int = 0):
        self.config = config
        self.seed = seed
        self.params = ad.ParameterStore()
        self.encoder = Encoder(config)
        self.decoder = Decoder(config)
        rng = np.random.default_rng(seed)
        for conv in self.encoder.convs() + self.decoder.convs():
            conv.init(self.params, rng)
        self.quantizers = self._build_quantizers()
        logger.debug(f"Codec with {self.params.count()} parameters, frame {config.frame_samples} samples")

    def _build_quantizers(self) -> dict[str, ResidualQuantizer]:
        cfg = self.config
        if cfg.quantization == "none":
            return {}
        if cfg.quantization == "global":
            first = cfg.fast_partitions[0]
            n_q = sum(p.n_q for p in cfg.fast_partitions)
            return {"global": ResidualQuantizer(cfg.fast_dim, n_q, first.codebook_bits, seed=(self.seed, 1000))}
        return {p.name: ResidualQuantizer(p.dim, p.n_q, p.codebook_bits, seed=(self.seed, 1000 + i))
                for i, p in enumerate(cfg.partitions)}

    # training path

    def embed(self, samples: np.ndarray) -> PartitionedEmbeddings:
        """Unquantized embeddings as tensors; len(samples) must be a multiple of frame_samples."""
        samples = np.asarray(samples, dtype=np.float64).reshape(-1)
        if samples.size == 0 or samples.size % self.config.frame_samples:
            raise ContractViolation(f"training input length {samples.size} is not a positive multiple "
                                    f"of {self.config.frame_samples}")
        fast, slow = self.encoder(self.params, ad.Tensor(samples[:, None]))
        parts, lo = {}, 0
        for p in self.config.fast_partitions:
            parts[p.name] = ad.take(fast, (slice(None), slice(lo, lo + p.dim)))
            lo += p.dim
        if slow is not None:
            parts[self.config.slow_partition.name] = slow
        return PartitionedEmbeddings(self.config, parts)

    def quantize_tensors(self, z: PartitionedEmbeddings,
                         offsets: dict[str, np.ndarray] | None = None
                         ) -> tuple[PartitionedEmbeddings, dict[str, np.ndarray]]:
        """
        Straight-through quantization of tensor embeddings. With `offsets`,
        the quantized value is v + offset instead of a fresh codebook lookup,
        which keeps the surrogate smooth for finite-difference checks.
        """
        values = {name: t.value for name, t in z.partitions.items()}
        if offsets is None:
            quantized = self.quantize_arrays(values)
            offsets = {name: quantized[name] - values[name] for name in values}
        out = {name: straight_through(t, t.value + offsets[name]) for name, t in z.partitions.items()}
        return PartitionedEmbeddings(self.config, out), offsets

    def synthesize(self, z: PartitionedEmbeddings) -> ad.Tensor:
        """Decoder over tensor embeddings; returns a 1-D tensor of F*frame_samples samples."""
        frames = z.num_frames
        columns = []
        for p in self.config.partitions:
            value = z[p.name]
            value = value if isinstance(value, ad.Tensor) else ad.Tensor(value)
            columns.append(ad.repeat_frames(value, p.frame_rate_divisor, frames) if p.slow else value)
        y = self.decoder(self.params, ad.concat(columns, axis=1))
        return ad.take(y, (slice(None), 0))

    def update_codebooks(self, embeddings: list[PartitionedEmbeddings]):
        """EMA step of every quantizer on the (unquantized) embeddings of a minibatch."""
        values = [{name: np.asarray(getattr(v, "value", v)) for name, v in z.partitions.items()} for z in embeddings]
        if self.config.quantization == "global":
            names = [p.name for p in self.config.fast_partitions]
            batch = np.vstack([np.hstack([v[n] for n in names]) for v in values])
            self.quantizers["global"].train_update(batch)
            return
        for name, quantizer in self.quantizers.items():
            quantizer.train_update(np.vstack([v[name] for v in values]))

    def freeze_quantizers(self):
        for quantizer in self.quantizers.values():
            quantizer.freeze()

    # quantization of plain arrays

    def quantize_arrays(self, values: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
        cfg = self.config
        if cfg.quantization == "none":
            return {name: v.copy() for name, v in values.items()}
        if cfg.quantization == "global":
            names = [p.name for p in cfg.fast_partitions]
            q = self.quantizers["global"].quantize(np.hstack([values[n] for n in names])).quantized
            out, lo = {}, 0
            for p in cfg.fast_partitions:
                out[p.name] = q[:, lo: lo + p.dim]
                lo += p.dim
            return out
        return {name: self.quantizers[name].quantize(v).quantized for name, v in values.items()}

    def quantize(self, z: PartitionedEmbeddings) -> PartitionedEmbeddings:
        return PartitionedEmbeddings(self.config, self.quantize_arrays(dict(z.partitions)), z.original_length)

    def to_codes(self, z: PartitionedEmbeddings) -> CodeGrid:
        if self.config.quantization != "per-partition":
            raise ConfigError(f"only per-partition quantization can be serialized, "
                              f"this codec uses {self.config.quantization!r}")
        return CodeGrid({name: self.quantizers[name].quantize(v).indices for name, v in z.partitions.items()},
                        z.num_frames)

    def from_codes(self, codes: CodeGrid, original_length: int | None = None) -> PartitionedEmbeddings:
        """Dequantize a CodeGrid; dropped partitions come back as zeros."""
        parts = {}
        for p in self.config.partitions:
            rows = -(-codes.num_frames // p.frame_rate_divisor)
            indices = codes.codes.get(p.name)
            if indices is None:
                parts[p.name] = np.zeros((rows, p.dim))
            else:
                parts[p.name] = self.quantizers[p.name].dequantize(np.asarray(indices).reshape(rows, p.n_q))
        return PartitionedEmbeddings(self.config, parts, original_length)

    def transmit(self, x: Waveform) -> PartitionedEmbeddings:
        """Encode then quantize: the embeddings a receiver of x would decode."""
        return self.quantize(encode(x, self))

    # checkpointing

    def checkpoint_data(self, meta: dict | None = None,
                        stores: dict[str, ad.ParameterStore] | None = None) -> checkpoint.CheckpointData:
        arrays, store_meta = checkpoint.store_state(self.params, "codec")
        quantizer_meta = {}
        for name, quantizer in self.quantizers.items():
            arrays.update(quantizer.state_arrays(f"quantizer/{name}"))
            quantizer_meta[name] = quantizer.state_meta()
        extra_meta = {}
        for prefix, store in (stores or {}).items():
            extra_arrays, extra_meta[prefix] = checkpoint.store_state(store, prefix)
            arrays.update(extra_arrays)
        full_meta = {"seed": self.seed, "codec": store_meta, "quantizers": quantizer_meta, "stores": extra_meta,
                     **(meta or {})}
        return checkpoint.CheckpointData(config=self.config.to_dict(), meta=full_meta, arrays=arrays)

    @classmethod
    def from_checkpoint(cls, data: checkpoint.CheckpointData) -> "Codec":
        codec = cls(CodecConfig.from_dict(data.config), seed=data.meta.get("seed", 0))
        checkpoint.restore_store(codec.params, "codec", data.arrays, data.meta["codec"])
        for name, quantizer in codec.quantizers.items():
            quantizer.load_state(f"quantizer/{name}", data.arrays, data.meta["quantizers"][name])
        return codec

    def save(self, path: str | Path, meta: dict | None = None, stores: dict[str, ad.ParameterStore] | None = None):
        checkpoint.write_checkpoint(path, self.checkpoint_data(meta, stores))

    @classmethod
    def load(cls, path: str | Path) -> "Codec":
        return cls.from_checkpoint(checkpoint.read_checkpoint(path))


# === STREAMING INFERENCE ===

class StreamingEncoder:
    """Per-stream encoder state; push samples in any chunking, read embeddings for whole frames."""

    def __init__(self, codec: Codec):
        self.codec = codec
        self.state: dict = {}
        self.pending = np.zeros(0)
        self.ticks = 0
        self._rows: dict[str, list[np.ndarray]] = {p.name: [] for p in codec.config.partitions}

    def push(self, samples: np.ndarray) -> int:
        """Consume samples; returns the number of frame ticks completed."""
        cfg = self.codec.config
        self.pending = np.concatenate([self.pending, np.asarray(samples, dtype=np.float64).reshape(-1)])
        done = 0
        while self.pending.size >= cfg.frame_samples:
            block, self.pending = self.pending[: cfg.frame_samples], self.pending[cfg.frame_samples:]
            fast, slow = self.codec.encoder.step(self.codec.params, block[:, None], self.state)
            lo = 0
            for p in cfg.fast_partitions:
                self._rows[p.name].append(fast[:, lo: lo + p.dim])
                lo += p.dim
            if slow is not None:
                self._rows[cfg.slow_partition.name].append(slow)
            self.ticks += 1
            done += 1
        return done

    def embeddings(self, original_length: int | None = None) -> PartitionedEmbeddings:
        parts = {}
        for p in self.codec.config.partitions:
            rows = self._rows[p.name]
            parts[p.name] = np.vstack(rows) if rows else np.zeros((0, p.dim))
        return PartitionedEmbeddings(self.codec.config, parts, original_length)


class StreamingDecoder:
    """Per-stream decoder state; each tick consumes one fast row per fast partition."""

    def __init__(self, codec: Codec):
        self.codec = codec
        self.state: dict = {}
        self.ticks = 0
        self.held: dict[str, np.ndarray] = {}

    def push(self, rows: dict[str, np.ndarray]) -> np.ndarray:
        cfg = self.codec.config
        count = rows[cfg.fast_partitions[0].name].shape[0]
        cursor = {p.name: 0 for p in cfg.partitions}
        out = []
        for _ in range(count):
            columns = []
            for p in cfg.partitions:
                if self.ticks % p.frame_rate_divisor == 0:
                    self.held[p.name] = rows[p.name][cursor[p.name]]
                    cursor[p.name] += 1
                columns.append(self.held[p.name])
            z = np.concatenate(columns)[None, :]
            out.append(self.codec.decoder.step(self.codec.params, z, self.state)[:, 0])
            self.ticks += 1
        return np.concatenate(out) if out else np.zeros(0)


def encode(x: Waveform, codec: Codec) -> PartitionedEmbeddings:
    """Zero-pad to a whole number of frames, encode tick by tick, record the original length."""
    if x.sample_rate != codec.config.sample_rate:
        raise ContractViolation(f"input rate {x.sample_rate} != codec rate {codec.config.sample_rate}")
    frames = -(-len(x) // codec.config.frame_samples)
    padded = np.pad(x.samples, (0, frames * codec.config.frame_samples - len(x)))
    encoder = StreamingEncoder(codec)
    encoder.push(padded)
    return encoder.embeddings(original_length=len(x))


def decode(z: PartitionedEmbeddings, codec: Codec) -> Waveform:
    """F*frame_samples samples; use `trimmed` to cut back to the recorded input length."""
    if z.config != codec.config:
        raise ContractViolation("embeddings were produced under a different codec config")
    samples = StreamingDecoder(codec).push(z.tick_slice(0, z.num_frames))
    if samples.size == 0:
        raise ContractViolation("cannot decode zero frames")
    return Waveform(samples, codec.config.sample_rate)


def trimmed(w: Waveform, original_length: int | None) -> Waveform:
    if original_length is None or original_length >= len(w):
        return w
    return Waveform(w.samples[:original_length], w.sample_rate)
