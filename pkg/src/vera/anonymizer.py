"""Clinical and regular anonymization of single images and image pairs.

Every pipeline inverts the input(s), swaps the identity slot (and any other
requested global slot) for freshly sampled codes, re-samples the local codes
of every component that is not preserved, renders, and pastes the preserved
pixels back from the input with an inpainted transition band.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
import torch

from .blending import (BlendConfig, DiffusionInpainter, IdentityRestoration, InpaintingPrior,
                       RestorationPrior, blend_mask, fuse_region)
from .evaluation import cosine_distance
from .generator import SemanticGenerator
from .inversion import InversionConfig, PerceptualMetric, invert_paired, invert_single
from .latent import AttributeSlot, ExtendedLatent, SemanticLayout, sample_latent, substitute_slot

__all__ = [
    'AnonymizationRequest', 'AnonymizationModels', 'AnonymizationResult',
    'randomize_components', 'resample_slots', 'anonymize_single', 'anonymize_paired',
    'derive_seed',
]

log = logging.getLogger(__name__)

_STREAMS = {'components': 1, 'slots': 2, 'inversion': 3}


def derive_seed(rng_seed: int, stream: str) -> int:
    """Independent sub-seed for one named random stream of a request."""
    ss = np.random.SeedSequence([int(rng_seed), _STREAMS[stream]])
    return int(ss.generate_state(1, dtype=np.uint32)[0])


@dataclass(frozen=True)
class AnonymizationRequest:
    mode: str = 'regular'
    arity: str = 'single'
    preserve: frozenset = frozenset()
    resample_slots: frozenset = frozenset({AttributeSlot.IDENTITY})
    rng_seed: int = 0
    min_identity_distance: float = None
    max_resample_tries: int = 8

    def __post_init__(self):
        if self.mode not in ('clinical', 'regular'):
            raise ValueError(f'mode must be clinical or regular, got {self.mode!r}')
        if self.arity not in ('single', 'paired'):
            raise ValueError(f'arity must be single or paired, got {self.arity!r}')
        object.__setattr__(self, 'preserve', frozenset(self.preserve))
        object.__setattr__(self, 'resample_slots',
                           frozenset(AttributeSlot(s) for s in self.resample_slots))
        if self.mode == 'clinical' and not self.preserve:
            raise ValueError('clinical anonymization needs at least one preserved component')

    def preserved(self, layout: SemanticLayout) -> frozenset:
        """The preserved component set; regular mode always uses the face exterior."""
        if self.mode == 'regular':
            if self.preserve and self.preserve != layout.exterior:
                raise ValueError('regular mode preserves exactly the face-exterior components')
            return layout.exterior
        for name in self.preserve:
            layout.index(name)
        return self.preserve


@dataclass
class AnonymizationModels:
    generator: SemanticGenerator
    w_mean: ExtendedLatent
    inversion: InversionConfig = InversionConfig()
    blend: BlendConfig = BlendConfig()
    inpainter: InpaintingPrior = field(default_factory=DiffusionInpainter)
    restorer: RestorationPrior = field(default_factory=IdentityRestoration)
    perceptual: PerceptualMetric = None
    embedder: object = None

    @property
    def layout(self) -> SemanticLayout:
        return self.generator.config.layout


@dataclass
class AnonymizationResult:
    outputs: tuple
    recovered: tuple
    anonymized: tuple
    masks: tuple
    output_labels: tuple
    report: dict
    diverged: bool = False


def randomize_components(w: ExtendedLatent, preserve, rng_seed: int, generator: SemanticGenerator,
                         layout: SemanticLayout = None) -> ExtendedLatent:
    """Replaces both local codes of every non-preserved component.

    Fresh codes are mapped from newly sampled local latents, so the result for
    a given seed does not depend on ``w``.
    """
    layout = layout or generator.config.layout
    keep = set(layout.indices(preserve))
    z = sample_latent(rng_seed, generator.config, dtype=w.w_local.dtype)
    with torch.no_grad():
        fresh = generator.mapping.map_local(z.local)
    w_local = w.w_local.clone()
    for k in range(len(layout)):
        if k not in keep:
            w_local[..., k, :, :] = fresh[k]
    return ExtendedLatent(w.w_global.clone(), w_local, w.slots)


def resample_slots(w: ExtendedLatent, slots, rng_seed: int,
                   generator: SemanticGenerator) -> ExtendedLatent:
    """Substitutes freshly mapped codes for the given global slots."""
    z = sample_latent(rng_seed, generator.config, dtype=w.w_global.dtype)
    with torch.no_grad():
        fresh = generator.mapping.map_global(z.global_)
    for slot in sorted(slots, key=lambda s: list(AttributeSlot).index(s)):
        w = substitute_slot(w, slot, fresh[w.slots.range(slot)])
    return w


def _to_hwc(image: torch.Tensor) -> np.ndarray:
    return image.detach().cpu().numpy().transpose(1, 2, 0)


def _from_hwc(array: np.ndarray, like: torch.Tensor) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(array.transpose(2, 0, 1))).to(like.dtype)


def _render_and_fuse(image, labels, w_anon, keep_idx, models: AnonymizationModels):
    with torch.no_grad():
        out = models.generator(w_anon)
    synthetic = out.image[0]
    syn_labels = out.labels()[0]
    labels_np = labels.cpu().numpy()
    syn_np = syn_labels.cpu().numpy()
    m_real = np.isin(labels_np, keep_idx)
    m_syn = np.isin(syn_np, keep_idx)
    if not m_real.any():
        warnings.warn('preserved components absent from the input labels; skipping fusion',
                      RuntimeWarning, stacklevel=3)
        m_inp = np.zeros_like(m_real)
        fused = _to_hwc(synthetic)
    else:
        # stray synthetic copies of a preserved component are inpainted too
        m_inp = blend_mask(m_real, m_syn, models.blend) | (m_syn & ~m_real)
        fused = fuse_region(_to_hwc(image), _to_hwc(synthetic), m_real, m_inp,
                            models.inpainter)
    restored = np.array(models.restorer.restore(fused), copy=True)
    restored[m_real] = _to_hwc(image)[m_real]
    out_labels = np.where(m_real | m_inp, labels_np, syn_np)
    masks = {'real': m_real, 'synthetic': m_syn, 'inpaint': m_inp}
    return _from_hwc(restored, image), masks, torch.from_numpy(out_labels)


def _identity_ok(image, output, models, request) -> bool:
    if request.min_identity_distance is None or models.embedder is None:
        return True
    d = cosine_distance(models.embedder.embed(image), models.embedder.embed(output))
    return d > request.min_identity_distance


def _report(request, layout, keep, slots_seed, comp_seed, inversion_info, masks):
    return {
        'mode': request.mode,
        'arity': request.arity,
        'preserved_components': sorted(keep),
        'randomized_components': [n for n in layout.names if n not in keep],
        'resampled_slots': sorted(s.value for s in request.resample_slots),
        'rng_seed': request.rng_seed,
        'slot_seed': slots_seed,
        'component_seed': comp_seed,
        'inversion': inversion_info,
        'mask_pixels': [{k: int(v.sum()) for k, v in m.items()} for m in masks],
    }


def anonymize_single(image: torch.Tensor, labels: torch.Tensor, request: AnonymizationRequest,
                     models: AnonymizationModels, latent: ExtendedLatent = None) -> AnonymizationResult:
    """Anonymizes one ``(3, H, W)`` image with ``(H, W)`` labels.

    ``latent`` skips inversion and reuses a previously recovered code.
    """
    layout = models.layout
    keep = request.preserved(layout)
    keep_idx = layout.indices(keep)
    info = {}
    diverged = False
    if latent is None:
        inv = invert_single(image, labels, models.generator, models.w_mean, models.inversion,
                            derive_seed(request.rng_seed, 'inversion'), models.perceptual)
        latent = inv.latent
        diverged = inv.diverged
        info = {'best_loss': inv.best_loss, 'best_step': inv.best_step, 'diverged': diverged}
    comp_seed = derive_seed(request.rng_seed, 'components')
    slots_seed = derive_seed(request.rng_seed, 'slots')
    for attempt in range(request.max_resample_tries):
        w = resample_slots(latent, request.resample_slots, slots_seed + attempt, models.generator)
        w = randomize_components(w, keep, comp_seed, models.generator, layout)
        output, masks, out_labels = _render_and_fuse(image, labels, w, keep_idx, models)
        if _identity_ok(image, output, models, request):
            break
    report = _report(request, layout, keep, slots_seed + attempt, comp_seed, info, [masks])
    report['resample_attempts'] = attempt + 1
    return AnonymizationResult((output,), (latent,), (w,), (masks,), (out_labels,), report, diverged)


def anonymize_paired(images, labels, request: AnonymizationRequest, models: AnonymizationModels,
                     latents=None) -> AnonymizationResult:
    """Anonymizes two images of one person with one shared synthetic identity.

    Both images get the same new identity code and the same fresh local codes
    for every non-preserved component; preserved components keep their own
    inverted codes.
    """
    if len(images) != 2 or len(labels) != 2:
        raise ValueError('paired anonymization takes exactly two images')
    layout = models.layout
    keep = request.preserved(layout)
    keep_idx = layout.indices(keep)
    info = {}
    diverged = False
    if latents is None:
        inv = invert_paired(images, labels, models.generator, models.w_mean, models.inversion,
                            derive_seed(request.rng_seed, 'inversion'), models.perceptual)
        latents = inv.latents
        diverged = inv.diverged
        info = {'best_loss': inv.best_loss, 'best_step': inv.best_step, 'diverged': diverged}
    comp_seed = derive_seed(request.rng_seed, 'components')
    slots_seed = derive_seed(request.rng_seed, 'slots')
    for attempt in range(request.max_resample_tries):
        ws, outputs, masks, out_labels = [], [], [], []
        for i in range(2):
            w = resample_slots(latents[i], request.resample_slots, slots_seed + attempt,
                               models.generator)
            w = randomize_components(w, keep, comp_seed, models.generator, layout)
            out, m, lab = _render_and_fuse(images[i], labels[i], w, keep_idx, models)
            ws.append(w)
            outputs.append(out)
            masks.append(m)
            out_labels.append(lab)
        if all(_identity_ok(images[i], outputs[i], models, request) for i in range(2)):
            break
    report = _report(request, layout, keep, slots_seed + attempt, comp_seed, info, masks)
    report['resample_attempts'] = attempt + 1
    return AnonymizationResult(tuple(outputs), tuple(latents), tuple(ws), tuple(masks),
                               tuple(out_labels), report, diverged)
