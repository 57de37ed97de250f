import numpy as np
import pytest

from src.config import DescriptorConfig, PhantomSpec, ScaleSpaceConfig


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def fine_scale_cfg() -> ScaleSpaceConfig:
    return ScaleSpaceConfig(base_sigma=1.0, scales_per_octave=4)


@pytest.fixture
def descriptor_cfg() -> DescriptorConfig:
    return DescriptorConfig()


@pytest.fixture
def tiny_phantom_spec() -> PhantomSpec:
    return PhantomSpec(
        dims=(32, 32, 32),
        blob_count=8,
        sigma_range=(2.0, 3.0),
        clone_pairs=1,
        nt_pairs=1,
        singletons=1,
        seed=7,
    )
