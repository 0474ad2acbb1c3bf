import math

import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from vera.contrastive import (ContrastiveConfig, Discriminator, ProjectionHead, StubEncoder,
                              Trainer, attribute_loss, directional_infonce, mirrored_loss,
                              module_hash, similarity_g)
from vera.errors import DomainError
from vera.generator import SemanticGenerator
from vera.latent import make_contrastive_batch

from conftest import TINY


def _oracle_directional(v, a, p, tau):
    """Plain-loop ``-log(g(a,p) / sum_{c != a} g(a,c))``."""
    def g(i, j):
        return math.exp(float(v[i] @ v[j]) / (np.linalg.norm(v[i]) * np.linalg.norm(v[j])) / tau)
    den = sum(g(a, c) for c in range(len(v)) if c != a)
    return -math.log(g(a, p) / den)


def _oracle_mirrored(v, a, b, tau):
    return _oracle_directional(v, a, b, tau) + _oracle_directional(v, b, a, tau)


batches = st.integers(2, 6).flatmap(lambda n: arrays(
    np.float64, (n, 5), elements=st.floats(-3, 3, allow_nan=False)).filter(
        lambda x: (np.linalg.norm(x, axis=1) > 1e-3).all()))


@given(batches, st.data())
def test_mirrored_loss_matches_loop_oracle(v, data):
    n = len(v)
    a = data.draw(st.integers(0, n - 1))
    b = data.draw(st.integers(0, n - 1).filter(lambda i: i != a))
    tau = data.draw(st.sampled_from([0.07, 0.5, 1.0]))
    got = mirrored_loss(torch.from_numpy(v), (a, b), tau).item()
    assert got == pytest.approx(_oracle_mirrored(v, a, b, tau), rel=1e-9, abs=1e-9)
    assert got >= -1e-12
    # symmetric in the pair
    assert got == pytest.approx(mirrored_loss(torch.from_numpy(v), (b, a), tau).item(), abs=1e-9)


@given(batches, st.data())
def test_directional_loss_matches_loop_oracle(v, data):
    n = len(v)
    a = data.draw(st.integers(0, n - 1))
    p = data.draw(st.integers(0, n - 1).filter(lambda i: i != a))
    got = directional_infonce(torch.from_numpy(v), a, p, 0.07).item()
    assert got == pytest.approx(_oracle_directional(v, a, p, 0.07), rel=1e-9, abs=1e-9)


def test_pair_only_batch_is_zero():
    v = torch.randn(2, 8, dtype=torch.float64)
    assert mirrored_loss(v, (0, 1), 0.07).item() == 0.0


def test_similarity_kernel_values():
    u = torch.tensor([1.0, 2.0, -1.0], dtype=torch.float64)
    tau = 0.07
    assert similarity_g(u, u, tau).item() == pytest.approx(math.exp(1 / tau), rel=1e-12)
    assert similarity_g(u, -u, tau).item() == pytest.approx(math.exp(-1 / tau), rel=1e-12)
    o = torch.tensor([2.0, -1.0, 0.0], dtype=torch.float64)
    assert similarity_g(u, o, tau).item() == pytest.approx(1.0, abs=1e-12)
    with pytest.raises(DomainError):
        similarity_g(u, torch.zeros(3, dtype=torch.float64), tau)


def test_zero_embedding_is_a_domain_error():
    v = torch.randn(4, 3, dtype=torch.float64)
    v[2] = 0
    with pytest.raises(DomainError):
        mirrored_loss(v, (0, 1), 0.07)


@pytest.mark.parametrize('pair', [(0, 0), (1, 1)])
def test_degenerate_pair_rejected(pair):
    with pytest.raises(ValueError):
        mirrored_loss(torch.randn(4, 3), pair, 0.07)


def test_single_embedding_rejected():
    with pytest.raises(ValueError):
        directional_infonce(torch.randn(1, 3), 0, 0, 0.07)


def test_stub_encoder_is_frozen_and_deterministic():
    a, b = StubEncoder(3), StubEncoder(3)
    x = torch.rand(2, 3, 16, 16) * 2 - 1
    assert torch.equal(a(x), b(x))
    assert list(a.parameters()) == []
    assert a.embed(x[0]).shape == (32,)


def test_projection_head_keeps_batch_spread():
    head = ProjectionHead(8, 16, 16, seed=0)
    x = torch.randn(8, 8) * 1e-3 + 5.0
    y = head(x)
    assert y.std(0).mean() > 0.1


def test_attribute_loss_counts_pairs():
    gen = SemanticGenerator(TINY)
    batch = make_contrastive_batch(0, 8, ['pose', 'age'], TINY)
    images = gen(gen.mapping(batch.latents)).image
    cfg = ContrastiveConfig(encoder_dim=8, head_dim=8)
    enc, head = StubEncoder(0, 8), ProjectionHead(8, 8, 8)
    loss, n = attribute_loss(batch, images, 'pose', enc, head, cfg)
    assert n == 2 and loss.item() > 0
    loss, n = attribute_loss(batch, images, 'identity', enc, head, cfg)
    assert n == 0 and loss.item() == 0


def test_discriminator_shape():
    d = Discriminator(16)
    assert d(torch.zeros(3, 3, 16, 16)).shape == (3,)


def _trainer(**kw):
    cfg = ContrastiveConfig(**{'batch_size': 4, 'encoder_dim': 8, 'head_dim': 8, **kw})
    return Trainer(SemanticGenerator(TINY), cfg)


def test_training_step_updates_generator_only():
    tr = _trainer()
    enc_hash = {s: module_hash(e) for s, e in tr.encoders.items()}
    g_hash = module_hash(tr.generator)
    reals = torch.rand(6, 3, 16, 16) * 2 - 1
    report = tr.step(0, reals)
    assert not report['aborted']
    assert module_hash(tr.generator) != g_hash
    assert {s: module_hash(e) for s, e in tr.encoders.items()} == enc_hash
    assert {'contrastive', 'adv/d', 'adv/g', 'adv/r1', 'total'} <= set(report)


def test_heads_frozen_when_disabled():
    tr = _trainer(use_heads=False)
    h = module_hash(tr.heads)
    tr.step(0)
    assert module_hash(tr.heads) == h


def test_training_is_bit_reproducible():
    reals = torch.rand(6, 3, 16, 16) * 2 - 1
    a, b = _trainer(), _trainer()
    for i in range(3):
        ra, rb = a.step(i, reals), b.step(i, reals)
        assert ra == rb
    assert module_hash(a.generator) == module_hash(b.generator)
    assert a.evaluate([100, 101]) == b.evaluate([100, 101])


def test_config_validation():
    with pytest.raises(ValueError):
        ContrastiveConfig(tau=0)
    with pytest.raises(ValueError):
        ContrastiveConfig(slots=('tail',))
