"""
Shared fixtures: tiny codec configs (4-sample frames, a few hundred
parameters) so model tests run in seconds, plus short synthetic signals.
"""

import numpy as np
import pytest

from augment import synth_speech
from codec import Codec, CodecConfig, PartitionSpec
from dsp import Waveform


def tiny_noise_config(**overrides) -> CodecConfig:
    fields = dict(
        partitions=(PartitionSpec("speech", 3, 1, 2, 3), PartitionSpec("noise", 3, 1, 2, 3)),
        environment="noise",
        strides=(2, 2),
        channels=(4, 4, 4),
    )
    fields.update(overrides)
    return CodecConfig(**fields)


def tiny_reverb_config(**overrides) -> CodecConfig:
    fields = dict(
        partitions=(PartitionSpec("speech", 3, 1, 2, 3), PartitionSpec("reverb", 2, 10, 2, 3)),
        environment="reverb",
        strides=(2, 2),
        channels=(4, 4, 4),
    )
    fields.update(overrides)
    return CodecConfig(**fields)


@pytest.fixture
def noise_config() -> CodecConfig:
    return tiny_noise_config()


@pytest.fixture
def reverb_config() -> CodecConfig:
    return tiny_reverb_config()


@pytest.fixture
def noise_codec(noise_config) -> Codec:
    return Codec(noise_config, seed=3)


@pytest.fixture
def reverb_codec(reverb_config) -> Codec:
    return Codec(reverb_config, seed=3)


@pytest.fixture
def speech() -> Waveform:
    return synth_speech(np.random.default_rng(11), duration_s=1.5)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)
