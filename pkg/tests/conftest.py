import os

import hypothesis
import numpy as np
import pytest

import crowdmotion as cm

hypothesis.settings.register_profile("ci", deadline=None)
hypothesis.settings.load_profile(os.getenv("HYPOTHESIS_PROFILE", "ci"))


@pytest.fixture
def micro_config() -> cm.ModelConfig:
    return cm.ModelConfig(joints=3, out_steps=4, layers=1, heads=2, d_model=8, d_ff=16)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)
