"""Compositional generator: per-component coarse/structure/texture stages.

Every semantic component ``k`` owns three small generators evaluated on a
fixed Fourier-feature grid.  The coarse stage is modulated by the global code
only, the structure and texture stages by the component's local codes.  The
structure stage also emits the component's attention logits.  Features are
fused with a per-pixel softmax over components and rendered to an RGB image and
a K-way semantic probability map.

Tensors use channels-first layout: images are ``(B, 3, H, W)`` in ``[-1, 1]``
and semantic maps ``(B, K, H, W)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .errors import ConfigError
from .latent import ExtendedLatent, GeneratorConfig, MappingNetwork

__all__ = [
    'make_fourier_grid', 'ComponentFeature', 'GeneratedOutput', 'ModulatedLinear',
    'SemanticGenerator', 'fuse', 'generate', 'pose_transform',
]

_ACT_GAIN = float(np.sqrt(2))


def _fourier_freqs(seed, d_fourier, bandwidth):
    if d_fourier <= 0 or d_fourier % 2:
        raise ConfigError('d_fourier must be positive and even')
    g = torch.Generator()
    g.manual_seed(int(seed))
    return torch.randn(d_fourier // 2, 2, generator=g, dtype=torch.float64) * bandwidth


def _base_coords(H0, W0):
    ys = torch.linspace(-1, 1, H0, dtype=torch.float64)
    xs = torch.linspace(-1, 1, W0, dtype=torch.float64)
    return torch.stack(torch.meshgrid(ys, xs, indexing='ij'), dim=-1)


def make_fourier_grid(seed: int, H0: int, W0: int, d_fourier: int,
                      bandwidth: float, dtype=torch.float32) -> torch.Tensor:
    """Returns ``(H0, W0, d_fourier)`` features ``[sin(Bx), cos(Bx)]``.

    ``x`` runs over pixel coordinates normalized to ``[-1, 1]^2`` and ``B`` is a
    seeded standard-normal ``(d_fourier / 2, 2)`` matrix scaled by ``bandwidth``.
    """
    if min(H0, W0) <= 0:
        raise ConfigError('grid dims must be positive')
    freqs = _fourier_freqs(seed, d_fourier, bandwidth)
    proj = _base_coords(H0, W0) @ freqs.T
    return torch.cat([torch.sin(proj), torch.cos(proj)], dim=-1).to(dtype)


def _orthonormal(rows, cols, generator):
    """Random ``(rows, cols)`` matrix with orthonormal rows or columns."""
    if rows == 0 or cols == 0:
        return torch.zeros(rows, cols)
    m = torch.randn(max(rows, cols), min(rows, cols), generator=generator, dtype=torch.float64)
    q, r = torch.linalg.qr(m)
    q = q * torch.sign(torch.diagonal(r))
    q = q if rows >= cols else q.T
    return q.float()


def pose_transform(params: torch.Tensor, coords: torch.Tensor) -> torch.Tensor:
    """Applies a similarity transform to ``(h, w, 2)`` ``(y, x)`` coordinates.

    ``params`` is ``(B, 4)``: rotation angle, log scale, y shift, x shift.
    Returns ``(B, h, w, 2)``.
    """
    theta, log_s, ty, tx = params.unbind(-1)
    c, s = torch.cos(theta), torch.sin(theta)
    rot = torch.stack([torch.stack([c, -s], -1), torch.stack([s, c], -1)], -2)
    rot = rot * torch.exp(log_s)[:, None, None]
    shift = torch.stack([ty, tx], -1)
    return torch.einsum('bij,hwj->bhwi', rot, coords) + shift[:, None, None, :]


@dataclass(frozen=True)
class ComponentFeature:
    """Pre-fusion output of the component generators.

    ``features``: ``(B, K, C, h, w)``; ``logits``: ``(B, K, h, w)``.
    """

    features: torch.Tensor
    logits: torch.Tensor


@dataclass(frozen=True)
class GeneratedOutput:
    image: torch.Tensor         # (B, 3, H, W), [-1, 1]
    semantic_map: torch.Tensor  # (B, K, H, W), sums to 1 over K

    def labels(self) -> torch.Tensor:
        return self.semantic_map.argmax(dim=1)


class ModulatedLinear(nn.Module):
    """A 1x1 modulated convolution replicated over ``K`` components.

    Style per input channel is ``1 + A(w)`` so a zero affine leaves the base
    weights untouched.  Weights are demodulated, StyleGAN2-style.
    """

    def __init__(self, K, c_in, c_out, w_dim, activate=True, demodulate=True,
                 generator=None, style_gain=1.0):
        super().__init__()
        self.K, self.c_in, self.c_out, self.w_dim = K, c_in, c_out, w_dim
        self.activate = activate
        self.demodulate = demodulate
        self.weight = nn.Parameter(torch.randn(K, c_out, c_in, generator=generator))
        self.bias = nn.Parameter(torch.zeros(K, c_out))
        self.affine_weight = nn.Parameter(
            torch.randn(K, c_in, w_dim, generator=generator) * style_gain / np.sqrt(max(w_dim, 1)))
        self.affine_bias = nn.Parameter(torch.zeros(K, c_in))

    def styles(self, w, ks=None):
        """``w`` is ``(B, w_dim)`` shared over components or ``(B, K', w_dim)``."""
        aw = self.affine_weight if ks is None else self.affine_weight[ks]
        ab = self.affine_bias if ks is None else self.affine_bias[ks]
        if w.dim() == 2:
            s = torch.einsum('kiw,bw->bki', aw, w)
        else:
            s = torch.einsum('kiw,bkw->bki', aw, w)
        return 1 + s + ab

    def forward(self, x, w, ks=None):
        """``x``: ``(B, K', c_in, h, w)``; ``ks`` selects a subset of components."""
        weight = self.weight if ks is None else self.weight[ks]
        bias = self.bias if ks is None else self.bias[ks]
        s = self.styles(w, ks)
        wt = weight.unsqueeze(0) * s.unsqueeze(2)  # (B, K', out, in)
        if self.demodulate:
            wt = wt * torch.rsqrt(wt.pow(2).sum(dim=3, keepdim=True) + 1e-8)
        out = torch.einsum('bkoi,bkihw->bkohw', wt, x) + bias[None, :, :, None, None]
        if self.activate:
            out = F.leaky_relu(out, 0.2) * _ACT_GAIN
        return out


class ComponentGenerators(nn.Module):
    """Coarse, structure and texture stages for all ``K`` components."""

    def __init__(self, config: GeneratorConfig, generator=None):
        super().__init__()
        K, C = config.n_components, config.c_feat
        d_g, d_l = config.slots.total, config.d_local
        g = generator
        self.coarse = nn.ModuleList([
            ModulatedLinear(K, config.d_fourier, C, d_g, generator=g, style_gain=config.style_gain),
            ModulatedLinear(K, C, C, d_g, generator=g, style_gain=config.style_gain)])
        self.structure = nn.ModuleList([
            ModulatedLinear(K, C, C, d_l, generator=g, style_gain=config.style_gain),
            ModulatedLinear(K, C, C, d_l, generator=g, style_gain=config.style_gain)])
        self.texture = nn.ModuleList([
            ModulatedLinear(K, C, C, d_l, generator=g, style_gain=config.style_gain),
            ModulatedLinear(K, C, C, d_l, generator=g, style_gain=config.style_gain)])
        self.to_logit = nn.Parameter(torch.randn(K, C, generator=g) * config.logit_gain / np.sqrt(C))
        self.logit_bias = nn.Parameter(torch.zeros(K))

    def forward(self, grid, w_global, w_structure, w_texture, ks=None):
        """``grid``: ``(B, d_fourier, h, w)``; ``w_structure``/``w_texture``:
        ``(B, K', d_local)``.  Returns a ``ComponentFeature``."""
        B = w_global.shape[0]
        n = self.to_logit.shape[0] if ks is None else len(ks)
        x = grid.expand(B, *grid.shape[1:]).unsqueeze(1).expand(B, n, *grid.shape[1:])
        for layer in self.coarse:
            x = layer(x, w_global, ks)
        for layer in self.structure:
            x = layer(x, w_structure, ks)
        to_logit = self.to_logit if ks is None else self.to_logit[ks]
        logit_bias = self.logit_bias if ks is None else self.logit_bias[ks]
        logits = torch.einsum('kc,bkchw->bkhw', to_logit, x) + logit_bias[None, :, None, None]
        for layer in self.texture:
            x = layer(x, w_texture, ks)
        return ComponentFeature(x, logits)


def fuse(features: torch.Tensor, logits: torch.Tensor) -> torch.Tensor:
    """Per-pixel softmax over components, then attention-weighted feature sum.

    ``features``: ``(B, K, C, h, w)``; ``logits``: ``(B, K, h, w)``.
    """
    if features.shape[1] != logits.shape[1]:
        raise ValueError(f'{features.shape[1]} feature maps but {logits.shape[1]} logit maps')
    attn = torch.softmax(logits, dim=1)
    return (attn.unsqueeze(2) * features).sum(dim=1)


class Renderer(nn.Module):
    """Upsampling conv cascade producing the image and semantic residual."""

    def __init__(self, config: GeneratorConfig, generator=None):
        super().__init__()
        chans = (config.c_feat,) + tuple(config.renderer_channels)
        self.convs = nn.ModuleList(
            nn.Conv2d(chans[i], chans[i + 1], 3, padding=1) for i in range(len(chans) - 1))
        self.to_rgb = nn.Conv2d(chans[-1], 3, 1)
        self.to_seg = nn.Conv2d(chans[-1], config.n_components, 1)
        self.resolution = config.resolution
        self.seg_gain = config.seg_gain
        with torch.no_grad():
            for m in list(self.convs) + [self.to_rgb, self.to_seg]:
                fan_in = m.in_channels * m.kernel_size[0] * m.kernel_size[1]
                m.weight.normal_(0, 1 / np.sqrt(fan_in), generator=generator)
                m.bias.zero_()

    def forward(self, fused, logits) -> GeneratedOutput:
        x = fused
        for i, conv in enumerate(self.convs):
            if i > 0:
                x = F.interpolate(x, scale_factor=2, mode='bilinear', align_corners=False)
            x = F.leaky_relu(conv(x), 0.2) * _ACT_GAIN
        image = torch.tanh(self.to_rgb(x))
        up = F.interpolate(logits, size=(self.resolution, self.resolution),
                           mode='bilinear', align_corners=False)
        seg = torch.softmax(self.seg_gain * (up + self.to_seg(x)), dim=1)
        seg = seg / seg.sum(dim=1, keepdim=True)
        return GeneratedOutput(image, seg)


class SemanticGenerator(nn.Module):
    """Mapping network, component generators and renderer."""

    def __init__(self, config: GeneratorConfig):
        super().__init__()
        self.config = config
        self.mapping = MappingNetwork(config)
        g = torch.Generator()
        g.manual_seed(config.init_seed)
        self.components = ComponentGenerators(config, g)
        self.renderer = Renderer(config, g)
        self.register_buffer('freqs', _fourier_freqs(
            config.fourier_seed, config.d_fourier, config.fourier_bandwidth).float())
        self.register_buffer('coords', _base_coords(config.grid_size, config.grid_size).float())
        # the pose slot also drives a similarity warp of the Fourier grid
        n_pose = config.slots.width('pose')
        self.register_buffer('pose_warp', _orthonormal(4, n_pose, g) * config.pose_warp_gain)

    def fourier_grid(self, w_global: torch.Tensor) -> torch.Tensor:
        """``(B, d_fourier, h, w)`` features on the pose-warped coordinates."""
        pose = w_global[:, self.config.slots.range('pose')]
        coords = pose_transform(pose @ self.pose_warp.T, self.coords)
        proj = coords @ self.freqs.T
        return torch.cat([torch.sin(proj), torch.cos(proj)], dim=-1).permute(0, 3, 1, 2)

    def _check(self, w: ExtendedLatent):
        cfg = self.config
        if w.w_global.shape[-1] != cfg.slots.total:
            raise ConfigError(f'w_global has {w.w_global.shape[-1]} dims, '
                              f'generator expects {cfg.slots.total}')
        if tuple(w.w_local.shape[-3:]) != (cfg.n_components, 2, cfg.d_local):
            raise ConfigError(f'w_local shape {tuple(w.w_local.shape[-3:])} does not match '
                              f'({cfg.n_components}, 2, {cfg.d_local})')

    def component_features(self, w: ExtendedLatent, ks=None) -> ComponentFeature:
        self._check(w)
        wg, wl = w.w_global, w.w_local
        if wg.dim() == 1:
            wg, wl = wg[None], wl[None]
        if ks is not None:
            wl = wl[:, ks]
        return self.components(self.fourier_grid(wg), wg, wl[:, :, 0], wl[:, :, 1], ks)

    def forward(self, w: ExtendedLatent) -> GeneratedOutput:
        comp = self.component_features(w)
        return self.renderer(fuse(comp.features, comp.logits), comp.logits)

    def synthesize(self, z):
        return self(self.mapping(z))


def generate_component(k: int, w: ExtendedLatent, generator: SemanticGenerator) -> ComponentFeature:
    """Evaluates component ``k`` alone (0-based)."""
    if not 0 <= k < generator.config.n_components:
        raise ConfigError(f'component index {k} out of range')
    return generator.component_features(w, ks=[k])


def generate(w: ExtendedLatent, generator: SemanticGenerator) -> GeneratedOutput:
    return generator(w)
