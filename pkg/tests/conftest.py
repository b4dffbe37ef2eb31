"""Shared tiny-scale configs and helpers for the test suite."""

import numpy as np
import pytest

from seqssl.features import ChannelConfig
from seqssl.scanning import DetectorConfig
from seqssl.synth import SynthConfig, generate

# small model window over gradient channels only: fast enough for unit tests
TINY_CCFG = ChannelConfig(channels=("grad_hist",), cell_size=4, window_w=16, window_h=32)
TINY_DCFG = DetectorConfig(
    scales_per_octave=4,
    min_scale=0.45,
    max_scale=1.0,
    stage1_threshold=-1.0,
    stage2_threshold=-1.0,
)


def tiny_synth_cfg(**kw):
    defaults = dict(
        seed=0,
        frames=16,
        test_frames=8,
        size=(160, 120),
        fps=30.0,
        n_targets=2,
        target_height=(36, 56),
        velocity=(1.5, 2.5),
        noise_sigma=8.0,
        distractors=4,
        distractor_height=(36, 56),
        target_contrast=(0.75, 1.0),
        distractor_contrast=(0.4, 0.65),
    )
    defaults.update(kw)
    return SynthConfig(**defaults)


@pytest.fixture(scope="session")
def tiny_seq():
    return generate(tiny_synth_cfg(), salt=1)


def rand_descriptor_matrix(rng, n, d):
    return rng.normal(0.0, 1.0, size=(n, d))
