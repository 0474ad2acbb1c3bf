"""Generative contrastive learning over the global attribute slots.

Images generated from a contrastive batch are embedded by frozen attribute
encoders, optionally passed through learnable projection heads, and scored
with the mirrored loss: both members of a positive pair act as anchors.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass, field
from typing import Protocol, Sequence

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .errors import DomainError
from .generator import SemanticGenerator
from .latent import CONSTRAINED_SLOTS, AttributeSlot, ContrastiveBatch, make_contrastive_batch

__all__ = [
    'AttributeEncoder', 'StubEncoder', 'ProjectionHead', 'ContrastiveConfig',
    'Discriminator', 'Trainer', 'similarity_g', 'mirrored_loss', 'directional_infonce',
    'attribute_loss', 'training_step', 'module_hash',
]


def similarity_g(u: torch.Tensor, v: torch.Tensor, tau: float) -> torch.Tensor:
    """``exp(cos(u, v) / tau)``."""
    nu, nv = u.norm(), v.norm()
    if nu == 0 or nv == 0:
        raise DomainError('similarity of a zero vector is undefined')
    return torch.exp((u @ v) / (nu * nv) / tau)


def _scaled_cosines(v: torch.Tensor, tau: float) -> torch.Tensor:
    norms = v.norm(dim=1, keepdim=True)
    if (norms == 0).any():
        raise DomainError('embedding batch contains a zero vector')
    u = v / norms
    return u @ u.T / tau


def _log_denominator(s: torch.Tensor, anchor: int) -> torch.Tensor:
    keep = torch.arange(s.shape[0]) != anchor
    return torch.logsumexp(s[anchor][keep], dim=0)


def directional_infonce(v: torch.Tensor, anchor: int, positive: int, tau: float) -> torch.Tensor:
    """``-log(g(a, p) / sum_{c != a} g(a, c))`` for a batch ``v`` of shape ``(N, d)``."""
    if v.shape[0] < 2:
        raise ValueError('contrastive loss needs at least two embeddings')
    if anchor == positive:
        raise ValueError('anchor and positive must differ')
    s = _scaled_cosines(v, tau)
    return _log_denominator(s, anchor) - s[anchor, positive]


def mirrored_loss(v: torch.Tensor, pair: tuple[int, int], tau: float) -> torch.Tensor:
    """Contrastive loss with both pair members used as anchors.

    ``-log[g(a,b)^2 / (sum_{c != a} g(a,c) * sum_{c != b} g(b,c))]``; each sum
    runs over every index except its anchor, so it includes the partner.
    """
    a, b = pair
    if v.shape[0] < 2:
        raise ValueError('contrastive loss needs at least two embeddings')
    if a == b:
        raise ValueError('pair members must differ')
    s = _scaled_cosines(v, tau)
    return _log_denominator(s, a) + _log_denominator(s, b) - 2 * s[a, b]


class AttributeEncoder(Protocol):
    """Frozen, deterministic, differentiable image embedder."""

    def __call__(self, images: torch.Tensor) -> torch.Tensor:
        """``(B, 3, H, W)`` in ``[-1, 1]`` to ``(B, d)``."""


class StubEncoder(nn.Module):
    """Seeded random linear map of box-downsampled pixels.

    Stands in for a pretrained attribute classifier; the weights live in a
    buffer so no optimizer can pick them up.
    """

    def __init__(self, seed: int, out_dim: int = 32, pool: int = 8, channels: int = 3):
        super().__init__()
        g = torch.Generator()
        g.manual_seed(int(seed))
        n_in = channels * pool * pool
        self.pool = pool
        self.register_buffer('weight', torch.randn(out_dim, n_in, generator=g) / math.sqrt(n_in))
        self.register_buffer('bias', torch.randn(out_dim, generator=g) * 0.1)
        self.out_dim = out_dim
        self.match_threshold = 0.5

    def forward(self, images):
        x = F.adaptive_avg_pool2d(images, self.pool).flatten(1)
        return F.linear(x, self.weight.to(x.dtype), self.bias.to(x.dtype))

    def embed(self, image) -> np.ndarray:
        """Single-image embedding as a numpy vector (``FaceEmbedder`` interface)."""
        if not torch.is_tensor(image):
            image = torch.as_tensor(np.asarray(image), dtype=torch.float64)
            if image.dim() == 3 and image.shape[-1] == 3:
                image = image.permute(2, 0, 1)
        with torch.no_grad():
            out = self(image.reshape(1, *image.shape[-3:]).to(self.weight.dtype))
        return out[0].double().numpy()


class ProjectionHead(nn.Module):
    """Linear, batch norm, ReLU, linear.

    Batch norm always uses the statistics of the current batch, so a head
    cannot map a whole batch onto one vector.
    """

    def __init__(self, in_dim: int, hidden: int = 128, out_dim: int = 128, seed: int = 0):
        super().__init__()
        g = torch.Generator()
        g.manual_seed(int(seed))
        self.fc1 = nn.Linear(in_dim, hidden)
        self.norm = nn.BatchNorm1d(hidden, track_running_stats=False)
        self.fc2 = nn.Linear(hidden, out_dim)
        with torch.no_grad():
            self.fc1.weight.normal_(0, 1 / math.sqrt(in_dim), generator=g)
            self.fc2.weight.normal_(0, 1 / math.sqrt(hidden), generator=g)
            self.fc1.bias.zero_()
            self.fc2.bias.zero_()

    def forward(self, x):
        return self.fc2(F.relu(self.norm(self.fc1(x))))


@dataclass(frozen=True)
class ContrastiveConfig:
    tau: float = 0.07
    mirroring: bool = True
    use_heads: bool = True
    batch_size: int = 8
    slots: tuple = tuple(s.value for s in CONSTRAINED_SLOTS)
    head_dim: int = 128
    encoder_dim: int = 32
    learning_rate: float = 0.002
    adv_weight: float = 1.0
    r1_gamma: float = 1.0

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError('tau must be positive')
        object.__setattr__(self, 'slots', tuple(AttributeSlot(s).value for s in self.slots))

    def to_dict(self):
        return asdict(self)


def attribute_loss(batch: ContrastiveBatch, images: torch.Tensor, slot, encoder, head,
                   config: ContrastiveConfig) -> tuple[torch.Tensor, int]:
    """Sum of the contrastive loss over the batch pairs tied on ``slot``.

    Returns ``(loss, n_pairs)``; with no pairs the loss is zero.
    """
    pairs = batch.pairs_for(slot)
    if not pairs:
        return images.new_zeros(()), 0
    v = encoder(images)
    if config.use_heads:
        v = head(v)
    total = images.new_zeros(())
    for a, b in pairs:
        if config.mirroring:
            total = total + mirrored_loss(v, (a, b), config.tau)
        else:
            total = total + directional_infonce(v, a, b, config.tau)
    return total, len(pairs)


class Discriminator(nn.Module):
    """Three strided convolutions and a linear logit."""

    def __init__(self, resolution: int, channels=(16, 32, 64), seed: int = 0):
        super().__init__()
        g = torch.Generator()
        g.manual_seed(int(seed))
        chans = (3,) + tuple(channels)
        self.convs = nn.ModuleList(
            nn.Conv2d(chans[i], chans[i + 1], 3, stride=2, padding=1) for i in range(3))
        side = resolution // 8
        self.fc = nn.Linear(chans[-1] * side * side, 1)
        with torch.no_grad():
            for m in list(self.convs) + [self.fc]:
                m.weight.normal_(0, 1 / math.sqrt(m.weight[0].numel()), generator=g)
                m.bias.zero_()

    def forward(self, x):
        for conv in self.convs:
            x = F.leaky_relu(conv(x), 0.2)
        return self.fc(x.flatten(1)).squeeze(1)


def module_hash(module: nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


@dataclass
class Trainer:
    """Mutable training state: generator, heads, frozen encoders, discriminator."""

    generator: SemanticGenerator
    config: ContrastiveConfig = field(default_factory=ContrastiveConfig)
    encoders: dict = None
    heads: nn.ModuleDict = None
    discriminator: Discriminator = None
    step_count: int = 0

    def __post_init__(self):
        cfg = self.config
        if self.encoders is None:
            self.encoders = {s: StubEncoder(1000 + i, cfg.encoder_dim)
                             for i, s in enumerate(cfg.slots)}
        for enc in self.encoders.values():
            for p in enc.parameters():
                p.requires_grad_(False)
        if self.heads is None:
            self.heads = nn.ModuleDict({
                s: ProjectionHead(cfg.encoder_dim, cfg.head_dim, cfg.head_dim, seed=2000 + i)
                for i, s in enumerate(cfg.slots)})
        if self.discriminator is None:
            self.discriminator = Discriminator(self.generator.config.resolution)
        g_params = list(self.generator.parameters())
        if cfg.use_heads:
            g_params += list(self.heads.parameters())
        self.g_opt = torch.optim.Adam(g_params, lr=cfg.learning_rate, betas=(0.0, 0.99))
        self.d_opt = torch.optim.Adam(self.discriminator.parameters(), lr=cfg.learning_rate,
                                      betas=(0.0, 0.99))

    def contrastive_losses(self, batch: ContrastiveBatch, images) -> dict:
        return {s: attribute_loss(batch, images, s, self.encoders[s], self.heads[s],
                                  self.config)[0] for s in self.config.slots}

    def _d_step(self, fake, real):
        d = self.discriminator
        real = real.detach().requires_grad_(True)
        real_logits = d(real)
        loss = F.softplus(d(fake.detach())).mean() + F.softplus(-real_logits).mean()
        grad, = torch.autograd.grad(real_logits.sum(), real, create_graph=True)
        r1 = grad.pow(2).flatten(1).sum(1).mean()
        total = loss + self.config.r1_gamma / 2 * r1
        if not torch.isfinite(total):
            return None
        self.d_opt.zero_grad(set_to_none=True)
        total.backward()
        self.d_opt.step()
        return loss.item(), r1.item()

    def step(self, rng_seed: int, real_images: torch.Tensor = None) -> dict:
        """One optimizer step; returns a JSON-serializable loss report."""
        cfg = self.config
        batch = make_contrastive_batch(rng_seed, cfg.batch_size, cfg.slots,
                                       self.generator.config)
        w = self.generator.mapping(batch.latents)
        images = self.generator(w).image
        losses = self.contrastive_losses(batch, images)
        contrastive = sum(losses[s] for s in cfg.slots)
        report = {'step': self.step_count, 'seed': rng_seed,
                  **{f'contrastive/{s}': losses[s].item() for s in cfg.slots},
                  'contrastive': contrastive.item()}
        adversarial = images.new_zeros(())
        use_adv = real_images is not None and cfg.adv_weight > 0
        if use_adv:
            g = torch.Generator()
            g.manual_seed(int(rng_seed))
            idx = torch.randint(len(real_images), (cfg.batch_size,), generator=g)
            d_out = self._d_step(images, real_images[idx])
            if d_out is None:
                report['aborted'] = True
                return report
            report['adv/d'], report['adv/r1'] = d_out
            adversarial = F.softplus(-self.discriminator(images)).mean()
            report['adv/g'] = adversarial.item()
        total = contrastive + cfg.adv_weight * adversarial if use_adv else contrastive
        if not torch.isfinite(total):
            report['aborted'] = True
            return report
        self.g_opt.zero_grad(set_to_none=True)
        total.backward()
        self.g_opt.step()
        self.discriminator.zero_grad(set_to_none=True)
        report['total'] = total.item()
        report['aborted'] = False
        self.step_count += 1
        return report

    @torch.no_grad()
    def evaluate(self, seeds: Sequence[int]) -> dict:
        """Mean mirrored loss per slot over fixed evaluation batches."""
        cfg = self.config
        eval_cfg = ContrastiveConfig(**{**cfg.to_dict(), 'mirroring': True})
        sums = {s: 0.0 for s in cfg.slots}
        for seed in seeds:
            batch = make_contrastive_batch(seed, cfg.batch_size, cfg.slots,
                                           self.generator.config)
            images = self.generator(self.generator.mapping(batch.latents)).image
            for s in cfg.slots:
                sums[s] += attribute_loss(batch, images, s, self.encoders[s], self.heads[s],
                                          eval_cfg)[0].item()
        return {s: v / len(seeds) for s, v in sums.items()}


def training_step(trainer: Trainer, rng_seed: int, real_images=None) -> dict:
    return trainer.step(rng_seed, real_images)
