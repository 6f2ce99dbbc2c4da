import math

import pytest
import torch

from morphoflow.ldt import LdtConfig
from morphoflow.synthdata import PhantomSpec, generate_subject, random_velocity
from morphoflow.volume import ScalarVolume, Boundary, identity_grid


def sinusoid_image(shape=16, period=16.0, boundary=Boundary.WRAP) -> ScalarVolume:
    """Smooth periodic test image, 0.5 + 0.15 * (sin h + sin w + sin l)"""
    x = identity_grid(shape)
    k = 2 * math.pi / period
    return ScalarVolume(0.5 + 0.15 * (torch.sin(k * x[0]) + torch.sin(k * x[1]) + torch.sin(k * x[2])), boundary)


def tiny_ldt_config(**overrides) -> LdtConfig:
    values = dict(d_model=24, n_heads=2, n_layers=1, patch_size=2, field_shape=[4, 4, 4], max_frames=3,
                  frequency_embedding_size=32)
    values.update(overrides)
    return LdtConfig(**values).validate()


def randomize(model: torch.nn.Module, std: float = 0.2, seed: int = 0) -> torch.nn.Module:
    """Replaces every parameter with Gaussian noise so zero-initialized gates and heads become live"""
    generator = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in model.parameters():
            p.copy_(torch.randn(p.shape, generator=generator, dtype=p.dtype) * std)
    return model


@pytest.fixture
def sinusoid():
    return sinusoid_image()


@pytest.fixture
def smooth_field():
    return random_velocity(16, max_norm=1.0, sigma=3.0, seed=3, boundary=Boundary.WRAP)


@pytest.fixture
def phantom_spec():
    return PhantomSpec(shape=[16, 16, 16], n_subjects=4, frames=2, noise_sigma=0.0, seed=11)


@pytest.fixture
def phantom(phantom_spec):
    return generate_subject(phantom_spec, 1234, 'sub-test')


@pytest.fixture
def tiny_cfg():
    return tiny_ldt_config()
