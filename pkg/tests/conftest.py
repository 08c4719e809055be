import numpy as np
import pytest
import torch

from abswift.dataset import FlowSample, make_sample
from abswift.model import ModelConfig, build
from abswift.profiles import StabilityParams

torch.set_num_threads(1)


def tiny_config(variant: str = "step4", **overrides) -> ModelConfig:
    """Small but structurally complete configuration for fast tests."""
    base = dict(
        d=24,
        n_heads=3,
        n_gnd=40,
        n_obs=40,
        n_gnd_sn=8,
        n_obs_sn=8,
        r_gnd=400.0,
        r_obs=400.0,
        n_vol_anchor=16,
        n_processor_blocks=2,
        n_decoder_blocks=2,
        variant=variant,
    )
    base.update(overrides)
    return ModelConfig(**base).validate()


def tiny_sample(
    seed: int = 0,
    n_gnd: int = 40,
    n_obs: int = 40,
    n_vol: int = 32,
    n_buildings: int = 2,
    stability: StabilityParams | None = None,
) -> FlowSample:
    rng = np.random.default_rng(seed)
    return make_sample(rng, n_buildings, n_gnd, n_obs, n_vol, stability=stability)


@pytest.fixture(scope="session")
def tiny_model():
    return build(tiny_config(), seed=0)


@pytest.fixture(scope="session")
def tiny_flow_samples():
    return [tiny_sample(seed=s) for s in range(4)]
