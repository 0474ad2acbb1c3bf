"""Latent spaces of the compositional generator.

The sampled code ``z`` has a global part, split into non-overlapping attribute
slots (identity, expression, pose, age, free), and one local code per semantic
component.  Each attribute slot and the local code have their own mapping MLP;
the mapped codes form the extended latent ``W+`` used for inversion: the global
``w`` plus a (structure, texture) pair per component.
"""

from __future__ import annotations

import enum
import warnings
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np
import torch
from torch import nn

from .errors import ConfigError

__all__ = [
    'AttributeSlot', 'SemanticLayout', 'GeneratorConfig', 'SlotLayout',
    'LatentSample', 'ExtendedLatent', 'MappingNetwork', 'ContrastiveBatch',
    'PCAResult', 'sample_latent', 'map_to_w', 'make_contrastive_batch',
    'substitute_slot', 'estimate_w_mean', 'slot_pca_directions',
]


class AttributeSlot(str, enum.Enum):
    IDENTITY = 'identity'
    EXPRESSION = 'expression'
    POSE = 'pose'
    AGE = 'age'
    FREE = 'free'


# Slots carrying a contrastive constraint.
CONSTRAINED_SLOTS = (AttributeSlot.IDENTITY, AttributeSlot.EXPRESSION,
                     AttributeSlot.POSE, AttributeSlot.AGE)

DEFAULT_COMPONENTS = (
    'background', 'face', 'eyes', 'eyebrows', 'nose', 'mouth', 'eyeglasses',
    'ears', 'earrings', 'hair', 'hats', 'neck', 'clothes',
)

FACE_EXTERIOR = frozenset(
    {'hair', 'neck', 'background', 'clothes', 'ears', 'earrings', 'hats'})


@dataclass(frozen=True)
class SemanticLayout:
    """Ordered semantic component names; index ``i`` is label value ``i``."""

    names: tuple[str, ...] = DEFAULT_COMPONENTS

    def __post_init__(self):
        object.__setattr__(self, 'names', tuple(self.names))
        if not self.names:
            raise ConfigError('layout needs at least one component')
        if len(set(self.names)) != len(self.names):
            raise ConfigError(f'duplicate component names in {self.names}')

    def __len__(self):
        return len(self.names)

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise ConfigError(
                f'unknown component {name!r}; known: {list(self.names)}'
            ) from None

    def indices(self, names: Iterable[str]) -> list[int]:
        return sorted(self.index(n) for n in names)

    @property
    def exterior(self) -> frozenset[str]:
        return frozenset(n for n in self.names if n in FACE_EXTERIOR)

    @property
    def interior(self) -> frozenset[str]:
        return frozenset(n for n in self.names if n not in FACE_EXTERIOR)

    def to_json(self) -> dict[str, int]:
        return {name: i for i, name in enumerate(self.names)}

    @classmethod
    def from_json(cls, table: dict[str, int]) -> 'SemanticLayout':
        order = sorted(table.items(), key=lambda kv: kv[1])
        if [i for _, i in order] != list(range(len(order))):
            raise ConfigError('layout indices must be contiguous from 0')
        return cls(tuple(name for name, _ in order))


@dataclass(frozen=True)
class SlotLayout:
    """Index ranges of each attribute slot inside the global vector."""

    dims: tuple[tuple[AttributeSlot, int], ...]

    def __post_init__(self):
        tags = [s for s, _ in self.dims]
        if sorted(tags) != sorted(AttributeSlot):
            raise ConfigError(f'slot layout must list each of {list(AttributeSlot)} once')
        for slot, d in self.dims:
            if d < 0:
                raise ConfigError(f'slot {slot.value} has negative dimension {d}')
        # disjoint, contiguous ranges by construction
        ranges = [self.range(s) for s in tags]
        for i, a in enumerate(ranges):
            for b in ranges[i + 1:]:
                assert a.stop <= b.start or b.stop <= a.start

    @property
    def total(self) -> int:
        return sum(d for _, d in self.dims)

    def width(self, slot) -> int:
        slot = AttributeSlot(slot)
        return dict(self.dims)[slot]

    def range(self, slot) -> slice:
        slot = AttributeSlot(slot)
        start = 0
        for s, d in self.dims:
            if s == slot:
                return slice(start, start + d)
            start += d
        raise KeyError(slot)


@dataclass(frozen=True)
class GeneratorConfig:
    """Dimensions of the latent spaces and the toy generator architecture."""

    slot_dims: dict = field(default_factory=lambda: {
        'identity': 64, 'expression': 64, 'pose': 64, 'age': 64, 'free': 256})
    d_local: int = 64
    components: tuple[str, ...] = DEFAULT_COMPONENTS
    mapping_layers: int = 3
    resolution: int = 64
    grid_size: int = 16
    d_fourier: int = 64
    fourier_bandwidth: float = 4.0
    c_feat: int = 64
    renderer_channels: tuple[int, ...] = (64, 32, 16)
    mapping_gain: float = 0.5
    style_gain: float = 2.0
    logit_gain: float = 1.0
    seg_gain: float = 8.0
    pose_warp_gain: float = 0.2
    fourier_seed: int = 0
    init_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, 'components', tuple(self.components))
        object.__setattr__(self, 'renderer_channels', tuple(self.renderer_channels))
        unknown = set(self.slot_dims) - {s.value for s in AttributeSlot}
        if unknown:
            raise ConfigError(f'unknown slots {sorted(unknown)}')
        for name in ('d_local', 'mapping_layers', 'resolution', 'grid_size',
                     'd_fourier', 'c_feat'):
            if getattr(self, name) <= 0:
                raise ConfigError(f'{name} must be positive, got {getattr(self, name)}')
        if self.d_fourier % 2:
            raise ConfigError('d_fourier must be even (sin/cos halves)')
        if self.fourier_bandwidth < 0:
            raise ConfigError('fourier_bandwidth must be >= 0')
        n_up = len(self.renderer_channels) - 1
        if self.grid_size * 2 ** n_up != self.resolution:
            raise ConfigError(
                f'grid_size {self.grid_size} with {n_up} x2 upsamplings does not '
                f'reach resolution {self.resolution}')
        self.slots  # validates slot dims

    @property
    def slots(self) -> SlotLayout:
        return SlotLayout(tuple(
            (s, int(self.slot_dims.get(s.value, 0))) for s in AttributeSlot))

    @property
    def layout(self) -> SemanticLayout:
        return SemanticLayout(self.components)

    @property
    def n_components(self) -> int:
        return len(self.components)

    def with_(self, **kwargs) -> 'GeneratorConfig':
        return replace(self, **kwargs)


@dataclass(frozen=True)
class LatentSample:
    """A sampled ``z``; tensors may carry leading batch dimensions.

    ``global_`` has shape ``(..., D_g)`` and ``local`` ``(..., K, d_local)``.
    """

    global_: torch.Tensor
    local: torch.Tensor
    slots: SlotLayout

    def slot(self, slot) -> torch.Tensor:
        return self.global_[..., self.slots.range(slot)]

    def __getitem__(self, i) -> 'LatentSample':
        return LatentSample(self.global_[i], self.local[i], self.slots)

    def __len__(self):
        return self.global_.shape[0]


@dataclass(frozen=True)
class ExtendedLatent:
    """A point of ``W+``.

    ``w_global`` is ``(..., D_g)`` with the same slot layout as ``z``;
    ``w_local`` is ``(..., K, 2, d_local)`` holding the structure (index 0) and
    texture (index 1) code of each component.
    """

    w_global: torch.Tensor
    w_local: torch.Tensor
    slots: SlotLayout

    def __post_init__(self):
        if self.w_local.shape[-2] != 2:
            raise ConfigError('w_local must hold a (structure, texture) pair per component')

    def slot(self, slot) -> torch.Tensor:
        return self.w_global[..., self.slots.range(slot)]

    @property
    def structure(self) -> torch.Tensor:
        return self.w_local[..., 0, :]

    @property
    def texture(self) -> torch.Tensor:
        return self.w_local[..., 1, :]

    def __getitem__(self, i) -> 'ExtendedLatent':
        return ExtendedLatent(self.w_global[i], self.w_local[i], self.slots)

    def flat(self) -> torch.Tensor:
        """All coordinates as one vector per batch element."""
        lead = self.w_global.shape[:-1]
        return torch.cat([self.w_global, self.w_local.reshape(*lead, -1)], dim=-1)

    def detach(self) -> 'ExtendedLatent':
        return ExtendedLatent(self.w_global.detach().clone(),
                              self.w_local.detach().clone(), self.slots)

    def to(self, *args, **kwargs) -> 'ExtendedLatent':
        return ExtendedLatent(self.w_global.to(*args, **kwargs),
                              self.w_local.to(*args, **kwargs), self.slots)

    @staticmethod
    def stack(items: Sequence['ExtendedLatent']) -> 'ExtendedLatent':
        return ExtendedLatent(torch.stack([x.w_global for x in items]),
                              torch.stack([x.w_local for x in items]),
                              items[0].slots)


def _generator(seed: int) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(int(seed))
    return g


def sample_latent(rng_seed: int, config: GeneratorConfig, n=None,
                  dtype=torch.float32) -> LatentSample:
    """Draws ``z`` i.i.d. from the standard normal.

    With ``n`` given, returns a batch of ``n`` samples.
    """
    slots = config.slots
    g = _generator(rng_seed)
    lead = () if n is None else (int(n),)
    z_g = torch.randn(*lead, slots.total, generator=g, dtype=dtype)
    z_l = torch.randn(*lead, config.n_components, config.d_local, generator=g, dtype=dtype)
    return LatentSample(z_g, z_l, slots)


class MLP(nn.Module):
    """Fully connected stack with leaky ReLU between layers, linear output."""

    def __init__(self, dim, n_layers, generator=None, out_gain=1.0):
        super().__init__()
        self.dim = dim
        self.layers = nn.ModuleList(nn.Linear(dim, dim) for _ in range(n_layers))
        if dim:
            with torch.no_grad():
                for i, layer in enumerate(self.layers):
                    gain = out_gain if i == n_layers - 1 else 1.0
                    layer.weight.normal_(0, gain / np.sqrt(dim), generator=generator)
                    layer.bias.zero_()

    def forward(self, x):
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = nn.functional.leaky_relu(x, 0.2) * np.sqrt(2)
        return x


class MappingNetwork(nn.Module):
    """Independent MLPs for each attribute slot and for the local code."""

    def __init__(self, config: GeneratorConfig):
        super().__init__()
        self.config = config
        g = _generator(config.init_seed + 1)
        slots = config.slots
        self.slot_nets = nn.ModuleDict({
            s.value: MLP(slots.width(s), config.mapping_layers, g, config.mapping_gain)
            for s in AttributeSlot})
        self.local_net = MLP(config.d_local, config.mapping_layers, g, config.mapping_gain)

    def map_global(self, z_global: torch.Tensor) -> torch.Tensor:
        slots = self.config.slots
        parts = []
        for s in AttributeSlot:
            part = z_global[..., slots.range(s)]
            if part.shape[-1]:
                part = self.slot_nets[s.value](part)
            parts.append(part)
        return torch.cat(parts, dim=-1)

    def map_local(self, z_local: torch.Tensor) -> torch.Tensor:
        """Maps ``(..., d_local)`` codes and duplicates them to (structure, texture)."""
        w = self.local_net(z_local)
        return torch.stack([w, w], dim=-2)

    def forward(self, z: LatentSample) -> ExtendedLatent:
        return ExtendedLatent(self.map_global(z.global_), self.map_local(z.local), z.slots)


def map_to_w(z: LatentSample, mapping: MappingNetwork) -> ExtendedLatent:
    slots = mapping.config.slots
    if z.global_.shape[-1] != slots.total:
        raise ConfigError(
            f'global latent has {z.global_.shape[-1]} dims, mapping expects {slots.total}')
    if tuple(z.local.shape[-2:]) != (mapping.config.n_components, mapping.config.d_local):
        raise ConfigError(
            f'local latent shape {tuple(z.local.shape[-2:])} does not match '
            f'({mapping.config.n_components}, {mapping.config.d_local})')
    return mapping(z)


@dataclass(frozen=True)
class ContrastiveBatch:
    """``N`` latents plus positive pairs ``(alpha, beta, slot)``.

    Members of a pair share the slot's sub-vector exactly.
    """

    latents: LatentSample
    pairs: tuple[tuple[int, int, AttributeSlot], ...]

    def pairs_for(self, slot) -> list[tuple[int, int]]:
        slot = AttributeSlot(slot)
        return [(a, b) for a, b, s in self.pairs if s == slot]

    def __len__(self):
        return len(self.latents)


def make_contrastive_batch(rng_seed: int, N: int, slots: Sequence, config: GeneratorConfig,
                           dtype=torch.float32) -> ContrastiveBatch:
    """Samples ``N`` latents and ties consecutive pairs on round-robin slots.

    Pair ``i`` is ``(2i, 2i+1)`` and shares ``slots[i % len(slots)]``: the slot
    sub-vector of member ``2i`` is copied into member ``2i+1``.
    """
    if N < 2:
        raise ValueError(f'contrastive batch needs N >= 2, got {N}')
    if N % 2:
        raise ValueError(f'contrastive batch needs an even N, got {N}')
    slots = [AttributeSlot(s) for s in slots]
    z = sample_latent(rng_seed, config, n=N, dtype=dtype)
    z_g = z.global_.clone()
    pairs = []
    if slots:
        for i in range(N // 2):
            slot = slots[i % len(slots)]
            a, b = 2 * i, 2 * i + 1
            r = config.slots.range(slot)
            z_g[b, r] = z_g[a, r]
            pairs.append((a, b, slot))
    return ContrastiveBatch(LatentSample(z_g, z.local, z.slots), tuple(pairs))


def substitute_slot(w: ExtendedLatent, slot, code: torch.Tensor) -> ExtendedLatent:
    """Returns a copy of ``w`` with one global slot replaced by ``code``."""
    r = w.slots.range(slot)
    width = r.stop - r.start
    if code.shape[-1] != width:
        raise ValueError(f'slot {AttributeSlot(slot).value} has width {width}, '
                         f'code has {code.shape[-1]}')
    w_global = w.w_global.clone()
    w_global[..., r] = code
    return ExtendedLatent(w_global, w.w_local.clone(), w.slots)


@torch.no_grad()
def estimate_w_mean(rng_seed: int, M: int, mapping: MappingNetwork,
                    config: GeneratorConfig, chunk: int = 2048) -> ExtendedLatent:
    """Coordinate-wise mean of ``M`` mapped samples."""
    if M < 1:
        raise ValueError('M must be >= 1')
    dtype = next(mapping.parameters()).dtype
    z = sample_latent(rng_seed, config, n=M, dtype=dtype)
    g_sum = 0
    l_sum = 0
    for start in range(0, M, chunk):
        w = mapping(z[start:start + chunk])
        g_sum = g_sum + w.w_global.sum(0)
        l_sum = l_sum + w.w_local.sum(0)
    return ExtendedLatent(g_sum / M, l_sum / M, config.slots)


@dataclass(frozen=True)
class PCAResult:
    directions: np.ndarray   # (n, width), rows are unit vectors
    variances: np.ndarray    # (n,)
    degenerate: bool


def slot_pca_directions(samples, slot, n_dirs: int, slots: SlotLayout = None,
                        rtol: float = 1e-10) -> PCAResult:
    """Principal directions of one slot's sub-vectors.

    ``samples`` is a sequence of ``LatentSample``/``ExtendedLatent`` or a
    ``(M, D_g)`` array (then ``slots`` is required).  Directions whose variance
    is negligible relative to the largest are dropped and ``degenerate`` set.
    """
    if isinstance(samples, (list, tuple)) and samples and hasattr(samples[0], 'slots'):
        slots = samples[0].slots
        x = torch.stack([torch.as_tensor(s.slot(slot)) for s in samples]).double().numpy()
    else:
        if slots is None:
            raise ValueError('slots layout required for raw arrays')
        arr = samples.detach().double().numpy() if torch.is_tensor(samples) else np.asarray(samples, float)
        x = arr[:, slots.range(slot)]
    if x.shape[0] < 2:
        raise ValueError('PCA needs at least 2 samples')
    if n_dirs > x.shape[1]:
        raise ValueError(f'n_dirs={n_dirs} exceeds slot width {x.shape[1]}')
    x = x - x.mean(0)
    cov = x.T @ x / (x.shape[0] - 1)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1][:n_dirs]
    evals, evecs = evals[order], evecs[:, order].T
    keep = evals > rtol * max(evals.max(initial=0.0), np.finfo(float).tiny)
    degenerate = not keep.all()
    if degenerate:
        warnings.warn(f'slot covariance is rank-deficient; returning {int(keep.sum())} '
                      f'of {n_dirs} directions', RuntimeWarning, stacklevel=2)
    # deterministic sign: largest-magnitude coordinate positive
    dirs = evecs[keep]
    signs = np.sign(dirs[np.arange(len(dirs)), np.abs(dirs).argmax(1)])
    return PCAResult(dirs * signs[:, None], evals[keep], degenerate)
