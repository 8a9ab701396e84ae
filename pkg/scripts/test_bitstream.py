"""
The .pcdc stream: pack/unpack over random layouts, truncation and framing
errors, exact payload sizes and partition dropping.

Usage: pytest scripts/test_bitstream.py
"""

import numpy as np
import pytest

from bitstream import MAGIC, PartitionEntry, StreamHeader, drop_partitions, pack, payload_bytes, unpack
from codec import Codec, decode, encode, mask_partition, preset
from dsp import Waveform
from errors import ContractViolation, EncodingError, FormatError, FramingError, PartitionLookupError
from rvq import CodeGrid


def random_stream(rng: np.random.Generator) -> tuple[StreamHeader, CodeGrid]:
    entries = []
    for i in range(int(rng.integers(1, 4))):
        entries.append(PartitionEntry(f"part{i}", int(rng.integers(1, 9)), int(rng.choice([1, 10]) if i else 1),
                                      int(rng.integers(0, 5)), int(rng.integers(1, 17))))
    frame_samples = int(rng.choice([4, 160, 320]))
    original_length = int(rng.integers(1, 40 * frame_samples))
    header = StreamHeader(16000, frame_samples, original_length, tuple(entries))
    frames = header.num_frames
    codes = {e.name: rng.integers(0, 2 ** e.bits, size=(-(-frames // e.divisor), e.n_q)) for e in entries}
    return header, CodeGrid(codes, frames)


def test_pack_unpack_random_layouts():
    rng = np.random.default_rng(0)
    for _ in range(10_000):
        header, codes = random_stream(rng)
        data = pack(codes, header)
        assert len(data) == len(header.encode()) + payload_bytes(header, codes.num_frames)
        parsed, restored = unpack(data)
        assert parsed == header
        assert restored.same_as(codes)


def test_bits_are_written_msb_first():
    header = StreamHeader(16000, 4, 4, (PartitionEntry("speech", 2, 1, 2, 4),))
    data = pack(CodeGrid({"speech": np.array([[0b1010, 0b0011]])}, 1), header)
    assert data[:4] == MAGIC
    assert data[-1:] == bytes([0b10100011])


def test_nine_bit_indices_are_padded_per_tick():
    header = StreamHeader(16000, 320, 320, (PartitionEntry("speech", 8, 1, 2, 9),))
    data = pack(CodeGrid({"speech": np.array([[0, 1]])}, 1), header)
    assert data[len(header.encode()):] == bytes([0x00, 0x00, 0x40])


def test_zero_frames_is_header_only():
    header = StreamHeader(16000, 4, 0, (PartitionEntry("speech", 2, 1, 2, 5),))
    data = pack(CodeGrid({"speech": np.zeros((0, 2), dtype=np.int64)}, 0), header)
    assert data == header.encode()
    _, codes = unpack(data)
    assert codes.num_frames == 0
    assert codes.codes["speech"].shape == (0, 2)


def test_slow_partition_appears_every_tenth_tick():
    header = StreamHeader(16000, 4, 80, (PartitionEntry("speech", 2, 1, 1, 8), PartitionEntry("reverb", 2, 10, 1, 8)))
    assert [header.tick_bytes(t) for t in range(20)] == [2] + [1] * 9 + [2] + [1] * 9


def test_tick_boundary_prefix_is_a_shorter_stream():
    header = StreamHeader(16000, 4, 40, (PartitionEntry("speech", 2, 1, 2, 5),))
    codes = CodeGrid({"speech": np.arange(20).reshape(10, 2)}, 10)
    data = pack(codes, header)
    start = len(header.encode())
    _, prefix = unpack(data[: start + 4 * 2])
    assert prefix.num_frames == 4
    assert np.array_equal(prefix.codes["speech"], codes.codes["speech"][:4])


def test_dropping_from_a_prefix_keeps_the_decoded_ticks():
    header = StreamHeader(16000, 4, 40, (PartitionEntry("speech", 2, 1, 2, 5), PartitionEntry("noise", 2, 1, 2, 5)))
    codes = CodeGrid({"speech": np.arange(20).reshape(10, 2), "noise": np.arange(20, 40).reshape(10, 2)}, 10)
    data = pack(codes, header)
    prefix = data[: len(header.encode()) + 4 * 3]
    parsed, restored = unpack(drop_partitions(prefix, ["noise"]))
    assert parsed.original_length == 16
    assert parsed.entry("noise").dropped
    assert restored.num_frames == 4
    assert restored.codes["noise"] is None
    assert np.array_equal(restored.codes["speech"], codes.codes["speech"][:4])


def test_truncation_inside_a_tick_names_tick_and_offset():
    header = StreamHeader(16000, 4, 40, (PartitionEntry("speech", 2, 1, 2, 5),))
    data = pack(CodeGrid({"speech": np.arange(20).reshape(10, 2)}, 10), header)
    start = len(header.encode())
    with pytest.raises(FramingError) as info:
        unpack(data[: start + 2 * 2 + 1])
    assert info.value.tick == 2
    assert info.value.byte_offset == start + 4
    assert info.value.exit_code == 4


def test_truncated_header():
    header = StreamHeader(16000, 4, 40, (PartitionEntry("speech", 2, 1, 2, 5),))
    with pytest.raises(FramingError):
        unpack(header.encode()[:-2])
    with pytest.raises(FramingError):
        unpack(header.encode()[:10])


def test_trailing_bytes_are_refused():
    header = StreamHeader(16000, 4, 8, (PartitionEntry("speech", 2, 1, 1, 8),))
    data = pack(CodeGrid({"speech": np.array([[1], [2]])}, 2), header)
    with pytest.raises(FormatError, match="trailing"):
        unpack(data + b"\x00")


def test_bad_magic_and_version():
    header = StreamHeader(16000, 4, 4, (PartitionEntry("speech", 2, 1, 1, 8),))
    data = pack(CodeGrid({"speech": np.array([[7]])}, 1), header)
    with pytest.raises(FormatError, match="magic"):
        unpack(b"RIFF" + data[4:])
    with pytest.raises(FormatError, match="version"):
        unpack(data[:4] + bytes([2]) + data[5:])


def patched(data: bytes, offset: int, values: bytes) -> bytes:
    out = bytearray(data)
    out[offset: offset + len(values)] = values
    return bytes(out)


@pytest.mark.parametrize("field_offset, width", [(0, 2), (2, 1), (4, 1)], ids=["dim", "divisor", "bits"])
def test_zero_layout_fields_are_format_errors(field_offset, width):
    header = StreamHeader(16000, 4, 8, (PartitionEntry("speech", 2, 1, 1, 8),))
    data = pack(CodeGrid({"speech": np.array([[1], [2]])}, 2), header)
    entry = data.index(b"speech") + len("speech")
    with pytest.raises(FormatError) as info:
        unpack(patched(data, entry + field_offset, bytes(width)))
    assert info.value.exit_code == 4


def test_zero_frame_samples_is_a_format_error():
    header = StreamHeader(16000, 4, 8, (PartitionEntry("speech", 2, 1, 1, 8),))
    data = pack(CodeGrid({"speech": np.array([[1], [2]])}, 2), header)
    with pytest.raises(FormatError, match="frame_samples"):
        unpack(patched(data, 9, bytes(2)))


def test_partition_name_must_be_utf8():
    header = StreamHeader(16000, 4, 8, (PartitionEntry("speech", 2, 1, 1, 8),))
    data = pack(CodeGrid({"speech": np.array([[1], [2]])}, 2), header)
    with pytest.raises(FormatError, match="UTF-8"):
        unpack(patched(data, data.index(b"speech"), b"\xff" * len("speech")))


def test_index_overflow_is_an_encoding_error():
    header = StreamHeader(16000, 4, 4, (PartitionEntry("speech", 2, 1, 1, 3),))
    with pytest.raises(EncodingError):
        pack(CodeGrid({"speech": np.array([[8]])}, 1), header)
    with pytest.raises(EncodingError):
        pack(CodeGrid({"speech": np.array([[-1]])}, 1), header)


def test_code_grid_must_match_the_header():
    header = StreamHeader(16000, 4, 8, (PartitionEntry("speech", 2, 1, 1, 3),))
    with pytest.raises(ContractViolation):
        pack(CodeGrid({"speech": np.array([[1]])}, 1), header)
    with pytest.raises(ContractViolation):
        pack(CodeGrid({"speech": None}, 2), header)


@pytest.mark.parametrize("name, expected", [("noise-toy", 18000), ("reverb-toy", 9900)])
def test_payload_size_for_a_minute(name, expected):
    header = StreamHeader.from_config(preset(name), 60 * 16000)
    assert header.num_frames == 3000
    assert payload_bytes(header, header.num_frames) == expected


def test_dropping_nothing_returns_the_input():
    header = StreamHeader(16000, 4, 8, (PartitionEntry("speech", 2, 1, 1, 8),))
    data = pack(CodeGrid({"speech": np.array([[1], [2]])}, 2), header)
    assert drop_partitions(data, []) == data


def test_dropping_an_unknown_partition():
    header = StreamHeader(16000, 4, 8, (PartitionEntry("speech", 2, 1, 1, 8),))
    data = pack(CodeGrid({"speech": np.array([[1], [2]])}, 2), header)
    with pytest.raises(PartitionLookupError):
        drop_partitions(data, ["noise"])


@pytest.mark.parametrize("fixture, dropped", [("noise_codec", "noise"), ("reverb_codec", "reverb")])
def test_drop_then_decode_equals_mask_then_decode(request, fixture, dropped):
    codec: Codec = request.getfixturevalue(fixture)
    rng = np.random.default_rng(5)
    for case in range(10):
        x = Waveform(0.3 * rng.standard_normal(int(rng.integers(40, 400))))
        z = encode(x, codec)
        codes = codec.to_codes(z)
        data = pack(codes, StreamHeader.from_config(codec.config, len(x)))

        slim = drop_partitions(data, [dropped])
        header, received = unpack(slim)
        assert header.entry(dropped).dropped
        assert received.codes[dropped] is None
        assert len(slim) < len(data) or codec.config.partition(dropped).n_q == 0

        from_stream = decode(codec.from_codes(received, header.original_length), codec)
        masked = decode(mask_partition(codec.quantize(z), dropped), codec)
        assert np.array_equal(from_stream.samples, masked.samples), f"case {case}"
