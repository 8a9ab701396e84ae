"""
The .pcdc wire format.

    header:  "PCDC" | version u8 | sample_rate u32 | frame_samples u16 |
             original_length u64 | partition count u8 |
             per partition: name length u8, name, dim u16, divisor u8,
                            n_q u8, codebook_bits u8, flags u8 (bit 0 = dropped)
    payload: one byte-aligned block per frame tick; a partition contributes
             its n_q indices (codebook_bits each, MSB first) on ticks where
             tick % divisor == 0, unless it is dropped.

All multi-byte integers are little-endian.
"""

import logging
import struct
from dataclasses import dataclass, replace

import numpy as np

from errors import ContractViolation, EncodingError, FormatError, FramingError, PartitionLookupError
from rvq import CodeGrid

logger = logging.getLogger(__name__)

MAGIC = b"PCDC"
VERSION = 1
_FIXED = struct.Struct("<4sBIHQB")
_ENTRY = struct.Struct("<HBBBB")
_DROPPED = 0x01


@dataclass(frozen=True)
class PartitionEntry:
    name: str
    dim: int
    divisor: int
    n_q: int
    bits: int
    dropped: bool = False

    def present(self, tick: int) -> bool:
        return not self.dropped and tick % self.divisor == 0

    @property
    def tick_bits(self) -> int:
        return self.n_q * self.bits


@dataclass(frozen=True)
class StreamHeader:
    sample_rate: int
    frame_samples: int
    original_length: int
    partitions: tuple[PartitionEntry, ...]

    @classmethod
    def from_config(cls, config, original_length: int) -> "StreamHeader":
        entries = tuple(PartitionEntry(p.name, p.dim, p.frame_rate_divisor, p.n_q, p.codebook_bits)
                        for p in config.partitions)
        return cls(config.sample_rate, config.frame_samples, original_length, entries)

    @property
    def num_frames(self) -> int:
        return -(-self.original_length // self.frame_samples)

    def entry(self, name: str) -> PartitionEntry:
        for e in self.partitions:
            if e.name == name:
                return e
        raise PartitionLookupError(f"stream has no partition {name!r}; known: {[e.name for e in self.partitions]}")

    def tick_bytes(self, tick: int) -> int:
        return -(-sum(e.tick_bits for e in self.partitions if e.present(tick)) // 8)

    def encode(self) -> bytes:
        parts = [_FIXED.pack(MAGIC, VERSION, self.sample_rate, self.frame_samples, self.original_length,
                             len(self.partitions))]
        for e in self.partitions:
            name = e.name.encode()
            parts.append(struct.pack("<B", len(name)) + name)
            parts.append(_ENTRY.pack(e.dim, e.divisor, e.n_q, e.bits, _DROPPED if e.dropped else 0))
        return b"".join(parts)

    @classmethod
    def decode(cls, data: bytes) -> tuple["StreamHeader", int]:
        """Parse the header; returns it with the offset of the first payload byte."""
        if len(data) < 4 or data[:4] != MAGIC:
            raise FormatError(f"not a .pcdc stream: bad magic {bytes(data[:4])!r}")
        if len(data) < _FIXED.size:
            raise FramingError(f"truncated header at byte offset {len(data)}", len(data))
        _, version, sample_rate, frame_samples, original_length, count = _FIXED.unpack_from(data)
        if version != VERSION:
            raise FormatError(f"unsupported .pcdc version {version} (expected {VERSION})")
        if frame_samples < 1:
            raise FormatError("header frame_samples must be >= 1, got 0")

        offset, entries = _FIXED.size, []
        for _ in range(count):
            if offset >= len(data):
                raise FramingError(f"truncated partition table at byte offset {offset}", offset)
            name_len = data[offset]
            end = offset + 1 + name_len + _ENTRY.size
            if end > len(data):
                raise FramingError(f"truncated partition table at byte offset {offset}", offset)
            try:
                name = bytes(data[offset + 1: offset + 1 + name_len]).decode()
            except UnicodeDecodeError as e:
                raise FormatError(f"partition name at byte offset {offset} is not valid UTF-8: {e}") from e
            dim, divisor, n_q, bits, flags = _ENTRY.unpack_from(data, offset + 1 + name_len)
            if min(dim, divisor, bits) < 1:
                raise FormatError(f"partition {name!r}: dim, divisor and codebook_bits must be >= 1, "
                                  f"got {dim}, {divisor}, {bits}")
            entries.append(PartitionEntry(name, dim, divisor, n_q, bits, bool(flags & _DROPPED)))
            offset = end
        return cls(sample_rate, frame_samples, original_length, tuple(entries)), offset


def _index_bits(row: np.ndarray, width: int) -> np.ndarray:
    shifts = np.arange(width - 1, -1, -1)
    return ((row[:, None] >> shifts) & 1).astype(np.uint8).reshape(-1)


def _check_codes(codes: CodeGrid, header: StreamHeader):
    if codes.num_frames != header.num_frames:
        raise ContractViolation(f"code grid has {codes.num_frames} frames, header original_length "
                                f"{header.original_length} implies {header.num_frames}")
    for e in header.partitions:
        if e.name not in codes.codes:
            raise ContractViolation(f"code grid has no partition {e.name!r}")
        rows = codes.codes[e.name]
        if e.dropped:
            continue
        if rows is None:
            raise ContractViolation(f"partition {e.name!r} has no codes but is not marked dropped")
        expected = (-(-codes.num_frames // e.divisor), e.n_q)
        if tuple(rows.shape) != expected:
            raise ContractViolation(f"partition {e.name!r}: codes shape {tuple(rows.shape)}, expected {expected}")
        if rows.size and (rows.min() < 0 or rows.max() >= 2 ** e.bits):
            bad = rows[(rows < 0) | (rows >= 2 ** e.bits)][0]
            raise EncodingError(f"partition {e.name!r}: index {bad} does not fit in {e.bits} bits")


def pack(codes: CodeGrid, header: StreamHeader) -> bytes:
    _check_codes(codes, header)
    chunks = [header.encode()]
    for tick in range(codes.num_frames):
        bits = [_index_bits(np.asarray(codes.codes[e.name][tick // e.divisor], dtype=np.int64), e.bits)
                for e in header.partitions if e.present(tick)]
        if bits:
            chunks.append(np.packbits(np.concatenate(bits)).tobytes())
    return b"".join(chunks)


def unpack(data: bytes) -> tuple[StreamHeader, CodeGrid]:
    """
    Decode a stream, or any prefix of it that ends on a tick boundary.
    A tick cut short raises FramingError naming the tick and byte offset.
    """
    header, offset = StreamHeader.decode(data)
    rows: dict[str, list[np.ndarray]] = {e.name: [] for e in header.partitions}
    weights = {e.name: 1 << np.arange(e.bits - 1, -1, -1) for e in header.partitions}

    tick = 0
    while tick < header.num_frames:
        size = header.tick_bytes(tick)
        if offset >= len(data) and size > 0:
            break
        if offset + size > len(data):
            raise FramingError(f"stream truncated inside tick {tick} at byte offset {offset}", offset, tick)
        bits = np.unpackbits(np.frombuffer(data, dtype=np.uint8, count=size, offset=offset))
        cursor = 0
        for e in header.partitions:
            if e.present(tick):
                chunk = bits[cursor: cursor + e.tick_bits].reshape(e.n_q, e.bits).astype(np.int64)
                rows[e.name].append(chunk @ weights[e.name])
                cursor += e.tick_bits
        offset += size
        tick += 1
    if offset != len(data):
        raise FormatError(f"{len(data) - offset} unexpected trailing bytes after tick {tick}")

    codes = {e.name: None if e.dropped else np.array(rows[e.name], dtype=np.int64).reshape(len(rows[e.name]), e.n_q)
             for e in header.partitions}
    return header, CodeGrid(codes, tick)


def drop_partitions(data: bytes, names: list[str]) -> bytes:
    """Re-emit the stream with `names` marked dropped and their payload removed."""
    header, codes = unpack(data)
    for name in names:
        header.entry(name)
    if not names:
        return bytes(data)
    entries = tuple(replace(e, dropped=True) if e.name in names else e for e in header.partitions)
    # a tick-boundary prefix carries fewer frames than its header's original_length
    length = min(header.original_length, codes.num_frames * header.frame_samples)
    kept = {name: None if name in names else rows for name, rows in codes.codes.items()}
    logger.debug(f"Dropping partitions {sorted(names)} from a {codes.num_frames}-tick stream")
    return pack(CodeGrid(kept, codes.num_frames), replace(header, original_length=length, partitions=entries))


def payload_bytes(header: StreamHeader, num_frames: int) -> int:
    """Exact payload size for num_frames ticks, including per-tick padding."""
    return sum(header.tick_bytes(tick) for tick in range(num_frames))
