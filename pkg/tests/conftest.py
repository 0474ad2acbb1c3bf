import os

import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, settings

from vera.generator import SemanticGenerator
from vera.latent import GeneratorConfig, estimate_w_mean, sample_latent

torch.set_num_threads(1)

settings.register_profile('vera', max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get('HYPOTHESIS_PROFILE', 'vera'))

TINY = GeneratorConfig(
    slot_dims={'identity': 4, 'expression': 4, 'pose': 4, 'age': 4, 'free': 8},
    d_local=4, resolution=16, grid_size=8, d_fourier=8, c_feat=8,
    renderer_channels=(8, 4))


@pytest.fixture(scope='session')
def tiny_config():
    return TINY


@pytest.fixture(scope='session')
def tiny_generator():
    return SemanticGenerator(TINY).eval()


@pytest.fixture(scope='session')
def tiny_w_mean(tiny_generator):
    return estimate_w_mean(0, 512, tiny_generator.mapping, TINY)


@pytest.fixture
def tiny_target(tiny_generator):
    with torch.no_grad():
        out = tiny_generator.synthesize(sample_latent(7, TINY))
    return out.image[0], out.labels()[0]


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if not RESULTS:
        return
    terminalreporter.section('acceptance criteria')
    for n in sorted(RESULTS):
        terminalreporter.write_line(RESULTS[n])
