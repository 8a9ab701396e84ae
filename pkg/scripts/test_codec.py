"""
Codec configuration and presets, partition edits, and streaming inference
against the whole-crop training path.

Usage: pytest scripts/test_codec.py
"""

import numpy as np
import pytest

from codec import (PRESETS, Codec, CodecConfig, PartitionSpec, StreamingDecoder, StreamingEncoder,
                   decode, decode_partition_only, encode, mask_partition, preset, scale_partition,
                   swap_partition, trimmed)
from dsp import Waveform
from errors import ConfigError, ContractViolation, PartitionLookupError
from rvq import bitrate
from conftest import tiny_noise_config

SIGNAL = 400


def signal(seed: int, length: int = SIGNAL) -> Waveform:
    return Waveform(0.5 * np.random.default_rng(seed).standard_normal(length))


def total_bitrate(config: CodecConfig) -> float:
    return sum(bitrate(p, config.frame_rate_hz) for p in config.partitions)


# configuration

def test_default_frame_is_twenty_milliseconds():
    for config in PRESETS.values():
        assert config.frame_samples == 320
        assert config.frame_rate_hz == 50.0


@pytest.mark.parametrize("name, expected", [
    ("noise-split", 12600),
    ("reverb-split", 6480),
    ("noise-toy", 2400),
    ("reverb-toy", 1320),
])
def test_preset_bitrates(name, expected):
    assert total_bitrate(preset(name)) == expected


def test_unknown_preset_is_a_config_error():
    with pytest.raises(ConfigError, match="noise-split"):
        preset("music-split")


@pytest.mark.parametrize("fields", [
    dict(name="x", dim=4, frame_rate_divisor=3),
    dict(name="x", dim=0),
    dict(name="x", dim=4, n_q=-1),
    dict(name="x", dim=4, codebook_bits=17),
    dict(name="", dim=4),
])
def test_invalid_partition_spec(fields):
    with pytest.raises(ConfigError):
        PartitionSpec(**fields)


def test_invalid_codec_configs():
    speech = PartitionSpec("speech", 4)
    slow = PartitionSpec("reverb", 2, 10)
    with pytest.raises(ConfigError):
        CodecConfig((speech,), environment="noise")
    with pytest.raises(ConfigError):
        CodecConfig((speech, PartitionSpec("speech", 2)), environment="speech")
    with pytest.raises(ConfigError):
        CodecConfig((speech, slow, PartitionSpec("room", 2, 10)), environment="reverb")
    with pytest.raises(ConfigError):
        CodecConfig((slow,), environment="reverb")
    with pytest.raises(ConfigError):
        CodecConfig((speech, slow), environment="reverb", quantization="global")
    with pytest.raises(ConfigError):
        CodecConfig((speech,), environment="speech", strides=(2, 2), channels=(4, 4))


def test_unknown_partition_lookup(noise_config, noise_codec):
    with pytest.raises(PartitionLookupError) as info:
        noise_config.partition("music")
    assert info.value.exit_code == 8
    assert "speech" in str(info.value)
    z = encode(signal(0), noise_codec)
    with pytest.raises(PartitionLookupError):
        mask_partition(z, "music")


def test_config_survives_dict_and_file(tmp_path, reverb_config):
    assert CodecConfig.from_dict(reverb_config.to_dict()) == reverb_config
    path = tmp_path / "codec.json"
    path.write_text("{not json")
    with pytest.raises(ConfigError):
        CodecConfig.load(path)
    with pytest.raises(ConfigError):
        CodecConfig.from_dict({"environment": "noise"})


def test_task_follows_the_environment_partition(noise_config, reverb_config):
    assert noise_config.task.value == "noise"
    assert reverb_config.task.value == "reverb"


# shapes and lengths

@pytest.mark.parametrize("length", [1, 4, 399, 401])
def test_encode_frame_counts(noise_codec, reverb_codec, length):
    frames = -(-length // 4)
    z = encode(signal(1, length), noise_codec)
    assert z.num_frames == frames
    assert z["speech"].shape == (frames, 3)
    assert z.original_length == length
    z = encode(signal(1, length), reverb_codec)
    assert z["reverb"].shape == (-(-frames // 10), 2)


def test_decode_length_and_trim(noise_codec):
    x = signal(2, 401)
    z = encode(x, noise_codec)
    y = decode(z, noise_codec)
    assert len(y) == 404
    assert len(trimmed(y, z.original_length)) == 401
    assert trimmed(y, None) is y


def test_encode_refuses_other_sample_rates(noise_codec):
    with pytest.raises(ContractViolation):
        encode(Waveform(np.ones(400), 8000), noise_codec)


def test_decode_refuses_other_configs(noise_codec, reverb_codec):
    z = encode(signal(3), noise_codec)
    with pytest.raises(ContractViolation):
        decode(z, reverb_codec)


# partition edits

def test_swap_twice_restores_both_reconstructions(noise_codec):
    z_a, z_b = encode(signal(4), noise_codec), encode(signal(5), noise_codec)
    swapped_a, swapped_b = swap_partition(z_a, z_b, "noise")
    assert np.array_equal(swapped_a["noise"], z_b["noise"])
    assert np.array_equal(swapped_a["speech"], z_a["speech"])
    back_a, back_b = swap_partition(swapped_a, swapped_b, "noise")
    assert np.array_equal(decode(back_a, noise_codec).samples, decode(z_a, noise_codec).samples)
    assert np.array_equal(decode(back_b, noise_codec).samples, decode(z_b, noise_codec).samples)


def test_swap_needs_matching_streams(noise_codec, reverb_codec):
    z = encode(signal(6), noise_codec)
    with pytest.raises(ContractViolation):
        swap_partition(z, encode(signal(6), reverb_codec), "speech")
    with pytest.raises(ContractViolation):
        swap_partition(z, encode(signal(6, 800), noise_codec), "noise")


def test_scale_weights(noise_codec):
    z = encode(signal(7), noise_codec)
    assert scale_partition(z, "noise", 1.0) is z
    masked = scale_partition(z, "noise", 0.0)
    assert np.array_equal(masked["noise"], mask_partition(z, "noise")["noise"])
    assert not masked["noise"].any()
    assert np.allclose(scale_partition(z, "noise", 0.5)["noise"], 0.5 * z["noise"])
    with pytest.raises(ContractViolation):
        scale_partition(z, "noise", 1.5)
    with pytest.raises(ContractViolation):
        scale_partition(z, "noise", -0.1)
    assert np.allclose(scale_partition(z, "noise", 2.0, allow_amplify=True)["noise"], 2.0 * z["noise"])


def test_decode_partition_only_zeros_the_rest(reverb_codec):
    z = encode(signal(8), reverb_codec)
    only = decode_partition_only(z, "reverb")
    assert np.array_equal(only["reverb"], z["reverb"])
    assert not only["speech"].any()


def test_edits_leave_the_input_untouched(noise_codec):
    z = encode(signal(9), noise_codec)
    before = z["noise"].copy()
    mask_partition(z, "noise")
    scale_partition(z, "noise", 0.25)
    assert np.array_equal(z["noise"], before)


# streaming against the training path

@pytest.mark.parametrize("fixture", ["noise_codec", "reverb_codec"])
def test_streaming_matches_whole_crop(request, fixture):
    codec = request.getfixturevalue(fixture)
    x = signal(10)
    batch = codec.embed(x.samples)
    streamed = encode(x, codec)
    for name in streamed.partitions:
        assert np.allclose(streamed[name], batch[name].value, rtol=0.0, atol=1e-9)
    assert np.allclose(decode(streamed, codec).samples, codec.synthesize(streamed).value, rtol=0.0, atol=1e-9)


@pytest.mark.parametrize("fixture", ["noise_codec", "reverb_codec"])
def test_any_chunking_gives_identical_output(request, fixture):
    codec = request.getfixturevalue(fixture)
    x = signal(11)
    whole = encode(x, codec)

    encoder = StreamingEncoder(codec)
    for lo, hi in [(0, 3), (3, 53), (53, 54), (54, SIGNAL)]:
        encoder.push(x.samples[lo:hi])
    chunked = encoder.embeddings()
    for name in whole.partitions:
        assert np.array_equal(chunked[name], whole[name])

    decoder = StreamingDecoder(codec)
    pieces = [decoder.push(whole.tick_slice(lo, hi)) for lo, hi in [(0, 7), (7, 23), (23, 23), (23, 100)]]
    assert np.array_equal(np.concatenate(pieces), decode(whole, codec).samples)


@pytest.mark.parametrize("fixture", ["noise_codec", "reverb_codec"])
def test_random_chunkings(request, fixture):
    codec = request.getfixturevalue(fixture)
    fs = codec.config.frame_samples
    rng = np.random.default_rng(12)
    for case in range(50):
        frames = int(rng.integers(1, 60))
        x = Waveform(0.5 * rng.standard_normal(frames * fs))
        whole = encode(x, codec)

        cuts = np.sort(rng.integers(0, frames + 1, size=int(rng.integers(0, 6)))) * fs
        bounds = [0, *cuts.tolist(), len(x)]
        encoder = StreamingEncoder(codec)
        for lo, hi in zip(bounds, bounds[1:]):
            encoder.push(x.samples[lo:hi])
        chunked = encoder.embeddings()
        for name in whole.partitions:
            assert np.array_equal(chunked[name], whole[name]), f"case {case}"

        ticks = [0, *np.sort(rng.integers(0, frames + 1, size=int(rng.integers(0, 6)))).tolist(), frames]
        decoder = StreamingDecoder(codec)
        pieces = [decoder.push(whole.tick_slice(lo, hi)) for lo, hi in zip(ticks, ticks[1:])]
        assert np.array_equal(np.concatenate(pieces), decode(whole, codec).samples), f"case {case}"


def test_embeddings_depend_only_on_the_past(reverb_codec):
    x = signal(12).samples.copy()
    base = encode(Waveform(x), reverb_codec)
    x[200:] += 1.0
    changed = encode(Waveform(x), reverb_codec)
    assert np.array_equal(base["speech"][:50], changed["speech"][:50])
    assert not np.array_equal(base["speech"][50:], changed["speech"][50:])
    assert np.array_equal(base["reverb"][:5], changed["reverb"][:5])


def test_prefix_keeps_whole_ticks(reverb_codec):
    z = encode(signal(13), reverb_codec)
    head = z.prefix(25)
    assert head.num_frames == 25
    assert head["reverb"].shape[0] == 3


# quantization

def test_codes_dequantize_to_the_quantized_embeddings(reverb_codec):
    z = encode(signal(14), reverb_codec)
    codes = reverb_codec.to_codes(z)
    assert codes.codes["speech"].shape == (100, 2)
    assert codes.codes["reverb"].shape == (10, 2)
    quantized = reverb_codec.quantize(z)
    restored = reverb_codec.from_codes(codes, z.original_length)
    for name in z.partitions:
        assert np.array_equal(restored[name], quantized[name])


def test_dropped_codes_decode_as_zeros(noise_codec):
    codes = noise_codec.to_codes(encode(signal(15), noise_codec))
    codes.codes["noise"] = None
    restored = noise_codec.from_codes(codes)
    assert not restored["noise"].any()


def test_unquantized_and_global_modes():
    raw = Codec(tiny_noise_config(quantization="none"), seed=1)
    z = encode(signal(16), raw)
    assert raw.quantizers == {}
    assert all(np.array_equal(raw.quantize(z)[n], z[n]) for n in z.partitions)

    joint = Codec(tiny_noise_config(quantization="global"), seed=1)
    assert list(joint.quantizers) == ["global"]
    assert joint.quantizers["global"].dim == 6
    assert joint.quantizers["global"].n_q == 4
    z = encode(signal(16), joint)
    assert joint.quantize(z)["noise"].shape == z["noise"].shape
    with pytest.raises(ConfigError):
        joint.to_codes(z)


def test_checkpoint_round_trip_preserves_the_codec(tmp_path, reverb_codec):
    x = signal(17)
    reverb_codec.update_codebooks([encode(x, reverb_codec)])
    reverb_codec.save(tmp_path / "codec.ckpt")
    restored = Codec.load(tmp_path / "codec.ckpt")
    assert restored.config == reverb_codec.config
    a = decode(reverb_codec.transmit(x), reverb_codec)
    b = decode(restored.transmit(x), restored)
    assert np.array_equal(a.samples, b.samples)
