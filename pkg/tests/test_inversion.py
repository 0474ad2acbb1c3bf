import math

import numpy as np
import pytest
import torch

from vera.contrastive import module_hash
from vera.errors import NumericalError
from vera.generator import SemanticGenerator
from vera.inversion import (InversionConfig, PyramidPerceptual, inversion_loss, invert_paired,
                            invert_single, psnr, seg_cross_entropy)
from vera.latent import ExtendedLatent, estimate_w_mean, sample_latent

from conftest import TINY
from helpers import central_differences, relative_error

FAST = InversionConfig(steps=20)


def test_seg_cross_entropy_loop_oracle(rng):
    p = rng.random((4, 3, 5))
    p /= p.sum(0, keepdims=True)
    t = rng.integers(0, 4, (3, 5))
    expected = np.mean([-math.log(p[t[y, x], y, x]) for y in range(3) for x in range(5)])
    got = seg_cross_entropy(torch.from_numpy(p), torch.from_numpy(t)).item()
    assert got == pytest.approx(expected, rel=1e-12)


def test_seg_cross_entropy_rejects_bad_labels():
    p = torch.full((2, 3, 3), 0.5)
    with pytest.raises(ValueError):
        seg_cross_entropy(p, torch.full((3, 3), 2))
    with pytest.raises(ValueError):
        seg_cross_entropy(p, torch.zeros(2, 2, dtype=torch.long))


def test_psnr_values():
    a = torch.zeros(3, 4, 4)
    assert psnr(a, a) == 99.0
    b = a + 2 / 255  # one grey level on the 0-255 scale
    assert psnr(a, b) == pytest.approx(10 * math.log10(255 ** 2), rel=1e-6)


def test_pyramid_perceptual_is_a_distance():
    m = PyramidPerceptual()
    a, b = torch.rand(1, 3, 16, 16), torch.rand(1, 3, 16, 16)
    assert m.distance(a, a).item() == 0
    assert m.distance(a, b).item() == pytest.approx(m.distance(b, a).item())
    assert m.distance(a, b).item() > 0


def test_loss_breakdown_at_w_mean(tiny_generator, tiny_w_mean, tiny_target):
    image, labels = tiny_target
    total, terms = inversion_loss(tiny_w_mean, image, labels, tiny_w_mean, tiny_generator)
    assert set(terms) == {'l1', 'l2', 'perceptual', 'mean', 'seg'}
    assert terms['mean'].item() == 0
    weights = InversionConfig().weights
    assert total.item() == pytest.approx(sum(w * t.item() for w, t in zip(weights, terms.values())))


def test_loss_gradient_matches_finite_differences(tiny_target):
    gen = SemanticGenerator(TINY).double()
    w_mean = estimate_w_mean(0, 256, gen.mapping, TINY)
    image, labels = tiny_target
    image = image.double()
    g = torch.Generator().manual_seed(1)
    wg = w_mean.w_global + 0.3 * torch.randn(w_mean.w_global.shape, generator=g, dtype=torch.float64)
    wl = w_mean.w_local + 0.3 * torch.randn(w_mean.w_local.shape, generator=g, dtype=torch.float64)
    n_g = wg.numel()

    def f(x):
        w = ExtendedLatent(x[:n_g], x[n_g:].reshape(wl.shape), w_mean.slots)
        return inversion_loss(w, image, labels, w_mean, gen)[0]

    idx = torch.randperm(n_g + wl.numel(), generator=g)[:24]
    grad, fd, _ = central_differences(f, torch.cat([wg, wl.flatten()]), coords=idx)
    assert relative_error(grad, fd) < 1e-3


def test_non_finite_loss_raises(tiny_generator, tiny_w_mean, tiny_target):
    image, labels = tiny_target
    bad = image.clone()
    bad[0, 0, 0] = float('nan')
    with pytest.raises(NumericalError) as err:
        inversion_loss(tiny_w_mean, bad, labels, tiny_w_mean, tiny_generator)
    assert 'l1' in err.value.breakdown


def test_invert_single_best_iterate(tiny_generator, tiny_w_mean, tiny_target):
    image, labels = tiny_target
    before = module_hash(tiny_generator)
    res = invert_single(image, labels, tiny_generator, tiny_w_mean, FAST)
    assert module_hash(tiny_generator) == before
    assert all(p.requires_grad for p in SemanticGenerator(TINY).parameters())
    best = [t['best'] for t in res.trace]
    assert all(b1 <= b0 for b0, b1 in zip(best, best[1:]))
    assert res.best_loss == min(t['loss'] for t in res.trace)
    assert res.trace[res.best_step]['loss'] == res.best_loss
    # the returned latent reproduces the best loss
    total, _ = inversion_loss(res.latent, image, labels, tiny_w_mean, tiny_generator)
    assert total.item() == pytest.approx(res.best_loss, rel=1e-5)
    assert res.best_loss < res.trace[0]['loss']


def test_invert_single_is_deterministic(tiny_generator, tiny_w_mean, tiny_target):
    image, labels = tiny_target
    cfg = InversionConfig(steps=5, init_noise=0.1)
    a = invert_single(image, labels, tiny_generator, tiny_w_mean, cfg, rng_seed=3)
    b = invert_single(image, labels, tiny_generator, tiny_w_mean, cfg, rng_seed=3)
    assert torch.equal(a.latent.w_global, b.latent.w_global)
    assert a.trace == b.trace


def test_restarts_tag_the_trace(tiny_generator, tiny_w_mean, tiny_target):
    image, labels = tiny_target
    res = invert_single(image, labels, tiny_generator, tiny_w_mean,
                        InversionConfig(steps=4, restarts=2))
    assert [t['restart'] for t in res.trace] == [0] * 4 + [1] * 4


def test_paired_inversion_shares_identity(tiny_generator, tiny_w_mean):
    with torch.no_grad():
        outs = [tiny_generator.synthesize(sample_latent(s, TINY)) for s in (1, 2)]
    images = [o.image[0] for o in outs]
    labels = [o.labels()[0] for o in outs]
    res = invert_paired(images, labels, tiny_generator, tiny_w_mean, FAST, checkpoint_every=5)
    assert len(res.checkpoints) == 4
    for _, _, wa, wb in res.checkpoints:
        assert torch.equal(wa.slot('identity'), wb.slot('identity'))
    assert all(t['identity_shared'] for t in res.trace)
    a, b = res.latents
    assert torch.equal(a.slot('identity'), res.identity)
    assert not torch.equal(a.slot('pose'), b.slot('pose'))
    with pytest.raises(ValueError):
        invert_paired(images[:1], labels[:1], tiny_generator, tiny_w_mean, FAST)


@pytest.mark.parametrize('kw', [{'steps': 0}, {'weight_l1': -1}, {'restarts': 0},
                                {'optimizer': 'sgd'}])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        InversionConfig(**kw)
