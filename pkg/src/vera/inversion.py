"""Optimization-based projection of images into ``W+``.

Single-image inversion optimizes every ``W+`` coordinate with Adam against a
weighted sum of pixel l1/l2, a perceptual distance, a pull towards the mean
latent, and cross-entropy between the generated semantic map and target
labels.  Paired inversion shares one identity-slot variable across both images.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import asdict, dataclass, field
from typing import Protocol

import torch
import torch.nn.functional as F

from .errors import NumericalError
from .generator import SemanticGenerator
from .latent import AttributeSlot, ExtendedLatent

__all__ = [
    'InversionConfig', 'PerceptualMetric', 'PyramidPerceptual', 'InversionResult',
    'PairedInversionResult', 'seg_cross_entropy', 'inversion_loss', 'invert_single',
    'invert_paired', 'psnr',
]

TERMS = ('l1', 'l2', 'perceptual', 'mean', 'seg')


@dataclass(frozen=True)
class InversionConfig:
    weight_l1: float = 1.0
    weight_l2: float = 0.1
    weight_perceptual: float = 2.0
    weight_mean: float = 1.0
    weight_seg: float = 1.0
    steps: int = 300
    learning_rate: float = 0.1
    optimizer: str = 'adam'
    init_noise: float = 0.0
    restarts: int = 1
    restart_noise: float = 0.3

    def __post_init__(self):
        if min(self.weights) < 0:
            raise ValueError('loss weights must be >= 0')
        if self.steps < 1:
            raise ValueError('steps must be >= 1')
        if self.restarts < 1:
            raise ValueError('restarts must be >= 1')
        if self.optimizer != 'adam':
            raise ValueError(f'unsupported optimizer {self.optimizer!r}')

    @property
    def weights(self) -> tuple[float, ...]:
        return (self.weight_l1, self.weight_l2, self.weight_perceptual,
                self.weight_mean, self.weight_seg)

    def to_dict(self):
        return asdict(self)


class PerceptualMetric(Protocol):
    def distance(self, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
        """Differentiable, symmetric, zero on identical inputs."""


class PyramidPerceptual:
    """Mean squared error averaged over a box-downsampled image pyramid."""

    def __init__(self, levels: int = 3):
        self.levels = levels

    def distance(self, a, b):
        total = 0
        for level in range(self.levels):
            if level:
                a = F.avg_pool2d(a, 2)
                b = F.avg_pool2d(b, 2)
            total = total + (a - b).pow(2).mean()
        return total / self.levels


def seg_cross_entropy(pred: torch.Tensor, target: torch.Tensor, eps: float = 1e-8) -> torch.Tensor:
    """Mean over pixels of ``-log pred[target]`` with a probability floor.

    ``pred`` is ``(K, H, W)`` or ``(B, K, H, W)``; ``target`` the matching
    integer label map without the ``K`` axis.
    """
    if pred.dim() == 3:
        pred, target = pred[None], target[None]
    K = pred.shape[1]
    if tuple(target.shape) != (pred.shape[0],) + tuple(pred.shape[2:]):
        raise ValueError(f'label shape {tuple(target.shape)} does not match prediction')
    target = target.long()
    if target.numel() and (target.min() < 0 or target.max() >= K):
        raise ValueError(f'labels must lie in [0, {K - 1}]')
    picked = pred.gather(1, target.unsqueeze(1)).squeeze(1)
    return -torch.log(picked.clamp_min(eps)).mean()


def _image_terms(image, target_image, labels, target_labels, perceptual):
    diff = image - target_image
    return [diff.abs().mean(), diff.pow(2).mean(), perceptual.distance(image, target_image),
            None, seg_cross_entropy(labels, target_labels)]


def inversion_loss(w: ExtendedLatent, target_image, target_labels, w_mean: ExtendedLatent,
                   generator: SemanticGenerator, config: InversionConfig = InversionConfig(),
                   perceptual: PerceptualMetric = None):
    """Returns ``(total, breakdown)`` where breakdown holds unweighted terms.

    The mean term is the mean squared deviation of all ``W+`` coordinates from
    ``w_mean``.  Images are ``(3, H, W)``, labels ``(H, W)``.
    """
    perceptual = perceptual or PyramidPerceptual()
    out = generator(w)
    target_image = target_image.reshape(out.image.shape)
    target_labels = target_labels.reshape(out.semantic_map.shape[:1] + out.semantic_map.shape[2:])
    terms = _image_terms(out.image, target_image, out.semantic_map, target_labels, perceptual)
    terms[3] = (w.flat() - w_mean.flat()).pow(2).mean()
    total = sum(wt * t for wt, t in zip(config.weights, terms))
    breakdown = dict(zip(TERMS, terms))
    if not torch.isfinite(total):
        raise NumericalError('non-finite inversion loss',
                             {k: float(v.detach()) for k, v in breakdown.items()})
    return total, breakdown


@contextlib.contextmanager
def frozen(module):
    flags = [p.requires_grad for p in module.parameters()]
    for p in module.parameters():
        p.requires_grad_(False)
    try:
        yield module
    finally:
        for p, flag in zip(module.parameters(), flags):
            p.requires_grad_(flag)


def psnr(a, b, peak: float = 255.0, cap: float = 99.0) -> float:
    """PSNR of two ``[-1, 1]`` images measured on the 0-255 scale."""
    mse = (((a - b) * 127.5).double() ** 2).mean().item()
    if mse == 0:
        return cap
    return min(cap, 10 * math.log10(peak ** 2 / mse))


@dataclass
class InversionResult:
    latent: ExtendedLatent
    trace: list = field(default_factory=list)
    best_loss: float = math.inf
    best_step: int = -1
    diverged: bool = False
    header: dict = field(default_factory=dict)


def _init_latent(w_mean: ExtendedLatent, config: InversionConfig, rng_seed, restart=0):
    """``w_mean`` plus optional Gaussian noise; later restarts use ``restart_noise``."""
    wg = w_mean.w_global.detach().clone()
    wl = w_mean.w_local.detach().clone()
    noise = config.init_noise if restart == 0 else max(config.init_noise, config.restart_noise)
    if noise:
        g = torch.Generator()
        g.manual_seed(int(rng_seed) * 1009 + restart)
        wg = wg + noise * torch.randn(wg.shape, generator=g, dtype=wg.dtype)
        wl = wl + noise * torch.randn(wl.shape, generator=g, dtype=wl.dtype)
    return wg, wl


def invert_single(target_image, target_labels, generator: SemanticGenerator,
                  w_mean: ExtendedLatent, config: InversionConfig = InversionConfig(),
                  rng_seed: int = 0, perceptual: PerceptualMetric = None) -> InversionResult:
    """Inverts one image with generator weights frozen; returns the best iterate.

    With ``config.restarts > 1`` the best iterate over all restarts wins; the
    trace concatenates the runs and tags each entry with its restart.
    """
    result = InversionResult(w_mean.detach(), header={'config': config.to_dict()})
    with frozen(generator):
        for restart in range(config.restarts):
            wg, wl = _init_latent(w_mean, config, rng_seed, restart)
            wg.requires_grad_(True)
            wl.requires_grad_(True)
            opt = torch.optim.Adam([wg, wl], lr=config.learning_rate)
            for step in range(config.steps):
                w = ExtendedLatent(wg, wl, w_mean.slots)
                try:
                    total, terms = inversion_loss(w, target_image, target_labels, w_mean,
                                                  generator, config, perceptual)
                except NumericalError:
                    result.diverged = True
                    break
                value = total.item()
                if value < result.best_loss:
                    result.best_loss, result.best_step = value, step
                    result.latent = w.detach()
                result.trace.append({'restart': restart, 'step': step, 'loss': value,
                                     'best': result.best_loss,
                                     **{k: v.item() for k, v in terms.items()}})
                opt.zero_grad(set_to_none=True)
                total.backward()
                opt.step()
    return result


@dataclass
class PairedInversionResult:
    identity: torch.Tensor
    latents: tuple
    trace: list = field(default_factory=list)
    best_loss: float = math.inf
    best_step: int = -1
    diverged: bool = False
    header: dict = field(default_factory=dict)
    checkpoints: list = field(default_factory=list)


def invert_paired(targets, labels, generator: SemanticGenerator, w_mean: ExtendedLatent,
                  config: InversionConfig = InversionConfig(), rng_seed: int = 0,
                  perceptual: PerceptualMetric = None,
                  checkpoint_every: int = 0) -> PairedInversionResult:
    """Inverts two images of one person with a single shared identity variable.

    The objective is the sum of both single-image losses; every other ``W+``
    coordinate is private to its image.  ``checkpoint_every > 0`` stores
    ``(restart, step, w_a, w_b)`` snapshots.
    """
    if len(targets) != 2 or len(labels) != 2:
        raise ValueError('paired inversion takes exactly two images and two label maps')
    slots = w_mean.slots
    r = slots.range(AttributeSlot.IDENTITY)
    result = PairedInversionResult(w_mean.w_global[r].detach().clone(),
                                   (w_mean.detach(), w_mean.detach()),
                                   header={'config': config.to_dict()})
    with frozen(generator):
        for restart in range(config.restarts):
            wg0, wl0 = _init_latent(w_mean, config, rng_seed, restart)
            identity = wg0[r].clone().requires_grad_(True)
            before = [wg0[:r.start].clone().requires_grad_(True) for _ in range(2)]
            after = [wg0[r.stop:].clone().requires_grad_(True) for _ in range(2)]
            local = [wl0.clone().requires_grad_(True) for _ in range(2)]
            opt = torch.optim.Adam([identity, *before, *after, *local], lr=config.learning_rate)
            for step in range(config.steps):
                ws = [ExtendedLatent(torch.cat([before[i], identity, after[i]]), local[i], slots)
                      for i in range(2)]
                try:
                    losses = [inversion_loss(ws[i], targets[i], labels[i], w_mean, generator,
                                             config, perceptual) for i in range(2)]
                except NumericalError:
                    result.diverged = True
                    break
                total = losses[0][0] + losses[1][0]
                value = total.item()
                shared = bool(torch.equal(ws[0].slot(AttributeSlot.IDENTITY),
                                          ws[1].slot(AttributeSlot.IDENTITY)))
                if value < result.best_loss:
                    result.best_loss, result.best_step = value, step
                    result.identity = identity.detach().clone()
                    result.latents = (ws[0].detach(), ws[1].detach())
                if checkpoint_every and step % checkpoint_every == 0:
                    result.checkpoints.append((restart, step, ws[0].detach(), ws[1].detach()))
                result.trace.append({'restart': restart, 'step': step, 'loss': value,
                                     'best': result.best_loss, 'loss_a': losses[0][0].item(),
                                     'loss_b': losses[1][0].item(), 'identity_shared': shared})
                opt.zero_grad(set_to_none=True)
                total.backward()
                opt.step()
    return result
