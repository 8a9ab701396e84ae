"""
Residual vector quantizers with EMA-learned codebooks, the discrete CodeGrid
transport form, and bitrate accounting.

Entry 0 of every codebook is a pinned zero vector. Because "emit nothing"
is always a candidate, every layer's residual is at most as large as its
input, and an all-zero partition quantizes to exactly zero.
"""

import logging
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.cluster.vq import kmeans2

from autodiff import straight_through  # noqa: F401  re-exported: the codec's quantizer bypass
from errors import ContractViolation

logger = logging.getLogger(__name__)

EMA_DECAY = 0.99
DEAD_CODE_THRESHOLD = 1e-3
_DISTANCE_CHUNK = 256


@dataclass
class Codebook:
    entries: np.ndarray
    ema_count: np.ndarray
    ema_sum: np.ndarray
    initialized: bool = False

    @classmethod
    def create(cls, bits: int, dim: int, rng: np.random.Generator) -> "Codebook":
        entries = rng.normal(0.0, 0.1, size=(2 ** bits, dim))
        entries[0] = 0.0
        return cls(entries=entries, ema_count=np.ones(2 ** bits), ema_sum=entries.copy())

    @property
    def size(self) -> int:
        return self.entries.shape[0]

    def nearest(self, x: np.ndarray) -> np.ndarray:
        """Index of the closest entry (squared Euclidean, first on ties) for each row of x."""
        indices = np.empty(x.shape[0], dtype=np.int64)
        for lo in range(0, x.shape[0], _DISTANCE_CHUNK):
            block = x[lo: lo + _DISTANCE_CHUNK]
            distances = ((block[:, None, :] - self.entries[None, :, :]) ** 2).sum(axis=2)
            indices[lo: lo + _DISTANCE_CHUNK] = np.argmin(distances, axis=1)
        return indices

    def initialize(self, residuals: np.ndarray, rng: np.random.Generator):
        """k-means seeding of entries 1.. from the first batch of residuals."""
        k = self.size - 1
        unique = np.unique(residuals, axis=0)
        if unique.shape[0] > k:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                centroids, _ = kmeans2(residuals, k, minit="++", seed=rng)
        else:
            centroids = residuals[rng.integers(residuals.shape[0], size=k)]
        self.entries[1:] = centroids
        self.entries[0] = 0.0
        self.ema_count[:] = 1.0
        self.ema_sum[:] = self.entries
        self.initialized = True

    def ema_update(self, residuals: np.ndarray, assigned: np.ndarray, rng: np.random.Generator,
                   decay: float = EMA_DECAY, dead_threshold: float = DEAD_CODE_THRESHOLD):
        counts = np.bincount(assigned, minlength=self.size).astype(np.float64)
        sums = np.zeros_like(self.ema_sum)
        np.add.at(sums, assigned, residuals)

        self.ema_count = decay * self.ema_count + (1.0 - decay) * counts
        self.ema_sum = decay * self.ema_sum + (1.0 - decay) * sums
        live = self.ema_count > 0.0
        self.entries[live] = self.ema_sum[live] / self.ema_count[live, None]
        self.entries[0] = 0.0
        self.ema_sum[0] = 0.0

        dead = (self.ema_count < dead_threshold) & (counts == 0)
        dead[0] = False
        for j in np.flatnonzero(dead):
            self.entries[j] = residuals[rng.integers(residuals.shape[0])]
            self.ema_sum[j] = self.entries[j]
            self.ema_count[j] = 1.0
        if dead.any():
            logger.debug(f"Reseeded {int(dead.sum())} dead codebook entries")


@dataclass(frozen=True, eq=False)
class Quantized:
    indices: np.ndarray
    quantized: np.ndarray
    residual: np.ndarray


class ResidualQuantizer:
    def __init__(self, dim: int, n_q: int, bits: int, seed: int | tuple[int, ...] = 0):
        if dim < 1 or n_q < 0 or bits < 1:
            raise ContractViolation(f"invalid quantizer shape dim={dim} n_q={n_q} bits={bits}")
        self.dim = dim
        self.n_q = n_q
        self.bits = bits
        self.rng = np.random.default_rng(seed)
        self.layers = [Codebook.create(bits, dim, self.rng) for _ in range(n_q)]
        self.frozen = False

    def __repr__(self):
        return f"ResidualQuantizer(dim={self.dim}, n_q={self.n_q}, bits={self.bits}, frozen={self.frozen})"

    @property
    def initialized(self) -> bool:
        return all(layer.initialized for layer in self.layers)

    def _rows(self, v: np.ndarray) -> np.ndarray:
        v = np.asarray(v, dtype=np.float64)
        rows = v.reshape(1, -1) if v.ndim == 1 else v
        if rows.ndim != 2 or rows.shape[1] != self.dim:
            raise ContractViolation(f"quantizer expects vectors of dim {self.dim}, got shape {v.shape}")
        return rows

    def quantize(self, v: np.ndarray) -> Quantized:
        """Quantize one vector [dim] or a batch [n x dim]; indices are [n_q] or [n x n_q]."""
        rows = self._rows(v)
        residual = rows.copy()
        quantized = np.zeros_like(rows)
        indices = np.zeros((rows.shape[0], self.n_q), dtype=np.int64)
        for level, layer in enumerate(self.layers):
            chosen = layer.nearest(residual)
            indices[:, level] = chosen
            quantized += layer.entries[chosen]
            residual = residual - layer.entries[chosen]
        if np.ndim(v) == 1:
            return Quantized(indices[0], quantized[0], residual[0])
        return Quantized(indices, quantized, residual)

    def dequantize(self, indices: np.ndarray) -> np.ndarray:
        indices = np.asarray(indices, dtype=np.int64)
        rows = indices.reshape(1, -1) if indices.ndim == 1 else indices
        if rows.shape[1] != self.n_q:
            raise ContractViolation(f"expected {self.n_q} code columns, got {rows.shape[1]}")
        out = np.zeros((rows.shape[0], self.dim))
        for level, layer in enumerate(self.layers):
            out += layer.entries[rows[:, level]]
        return out[0] if indices.ndim == 1 else out

    def train_update(self, batch: np.ndarray):
        """One EMA step per layer toward the residuals assigned to each entry (no-op once frozen)."""
        if self.frozen:
            return
        residual = self._rows(batch).copy()
        if residual.shape[0] == 0:
            raise ContractViolation("train_update needs a non-empty batch")
        for layer in self.layers:
            if not layer.initialized:
                layer.initialize(residual, self.rng)
            assigned = layer.nearest(residual)
            layer.ema_update(residual, assigned, self.rng)
            residual = residual - layer.entries[layer.nearest(residual)]

    def freeze(self):
        self.frozen = True

    def state_arrays(self, prefix: str) -> dict[str, np.ndarray]:
        arrays = {}
        for level, layer in enumerate(self.layers):
            arrays[f"{prefix}/{level}/entries"] = layer.entries
            arrays[f"{prefix}/{level}/ema_count"] = layer.ema_count
            arrays[f"{prefix}/{level}/ema_sum"] = layer.ema_sum
        return arrays

    def state_meta(self) -> dict:
        return {"frozen": self.frozen, "initialized": [layer.initialized for layer in self.layers],
                "rng": self.rng.bit_generator.state}

    def load_state(self, prefix: str, arrays: dict[str, np.ndarray], meta: dict):
        for level, layer in enumerate(self.layers):
            layer.entries = arrays[f"{prefix}/{level}/entries"].copy()
            layer.ema_count = arrays[f"{prefix}/{level}/ema_count"].copy()
            layer.ema_sum = arrays[f"{prefix}/{level}/ema_sum"].copy()
            layer.initialized = bool(meta["initialized"][level])
        self.frozen = bool(meta["frozen"])
        self.rng.bit_generator.state = meta["rng"]


@dataclass(frozen=True, eq=False)
class CodeGrid:
    """Per-partition [frames x n_q] code indices; None marks a partition that was dropped."""
    codes: dict[str, np.ndarray | None]
    num_frames: int

    def same_as(self, other: "CodeGrid") -> bool:
        if self.num_frames != other.num_frames or list(self.codes) != list(other.codes):
            return False
        for name, mine in self.codes.items():
            theirs = other.codes[name]
            if (mine is None) != (theirs is None):
                return False
            if mine is not None and not np.array_equal(mine, theirs):
                return False
        return True


def bitrate(spec, base_frame_rate_hz: float) -> float:
    """Bits per second of one partition: (R_f / divisor) * N * n_q."""
    return (base_frame_rate_hz / spec.frame_rate_divisor) * spec.codebook_bits * spec.n_q
