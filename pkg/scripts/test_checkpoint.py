"""
Checkpoint files: byte-for-byte determinism and rejection of damaged files.

Usage: pytest scripts/test_checkpoint.py
"""

import numpy as np
import pytest

from checkpoint import MAGIC, CheckpointData, read_checkpoint, write_checkpoint
from codec import Codec
from errors import ConfigError, FormatError


def sample_data() -> CheckpointData:
    rng = np.random.default_rng(0)
    return CheckpointData(config={"environment": "noise"}, meta={"seed": 3, "note": "tiny"},
                          arrays={"b": rng.standard_normal((2, 3)), "a": rng.standard_normal(4)})


def test_same_state_writes_same_bytes(tmp_path, noise_codec):
    noise_codec.save(tmp_path / "one.pckp")
    noise_codec.save(tmp_path / "two.pckp")
    assert (tmp_path / "one.pckp").read_bytes() == (tmp_path / "two.pckp").read_bytes()
    assert (tmp_path / "one.pckp").read_bytes()[:4] == MAGIC


def test_round_trip(tmp_path):
    data = sample_data()
    write_checkpoint(tmp_path / "nested" / "x.pckp", data)
    back = read_checkpoint(tmp_path / "nested" / "x.pckp")
    assert back.config == data.config
    assert back.meta == data.meta
    assert set(back.arrays) == set(data.arrays)
    for name, array in data.arrays.items():
        assert back.arrays[name].shape == array.shape
        assert np.array_equal(back.arrays[name], array)


def test_codec_restores_identical_weights(tmp_path, reverb_codec):
    reverb_codec.save(tmp_path / "codec.pckp")
    restored = Codec.load(tmp_path / "codec.pckp")
    assert restored.seed == reverb_codec.seed
    for name in reverb_codec.params.names():
        assert np.array_equal(restored.params[name].value, reverb_codec.params[name].value)


def test_bad_magic(tmp_path):
    write_checkpoint(tmp_path / "x.pckp", sample_data())
    raw = (tmp_path / "x.pckp").read_bytes()
    (tmp_path / "x.pckp").write_bytes(b"PCDC" + raw[4:])
    with pytest.raises(FormatError, match="magic"):
        read_checkpoint(tmp_path / "x.pckp")


def test_unsupported_version(tmp_path):
    write_checkpoint(tmp_path / "x.pckp", sample_data())
    raw = (tmp_path / "x.pckp").read_bytes()
    (tmp_path / "x.pckp").write_bytes(raw[:4] + bytes([9]) + raw[5:])
    with pytest.raises(FormatError, match="version"):
        read_checkpoint(tmp_path / "x.pckp")


def test_truncated_weights(tmp_path):
    write_checkpoint(tmp_path / "x.pckp", sample_data())
    raw = (tmp_path / "x.pckp").read_bytes()
    (tmp_path / "x.pckp").write_bytes(raw[:-8])
    with pytest.raises(FormatError, match="truncated"):
        read_checkpoint(tmp_path / "x.pckp")
    (tmp_path / "x.pckp").write_bytes(raw[:3])
    with pytest.raises(FormatError):
        read_checkpoint(tmp_path / "x.pckp")


def test_corrupt_header(tmp_path):
    write_checkpoint(tmp_path / "x.pckp", sample_data())
    raw = bytearray((tmp_path / "x.pckp").read_bytes())
    raw[9] = 0xFF
    (tmp_path / "x.pckp").write_bytes(bytes(raw))
    with pytest.raises(FormatError):
        read_checkpoint(tmp_path / "x.pckp")


def test_missing_file_is_a_config_error(tmp_path):
    with pytest.raises(ConfigError):
        read_checkpoint(tmp_path / "absent.pckp")
