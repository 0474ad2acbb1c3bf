"""Mask construction and pixel fusion for preserved semantic regions.

The inpainting band is the thresholded Gaussian blur of the union of the real
and synthetic component masks, minus the real mask.  Pixels under the real
mask come from the original image bit-exactly, pixels in the band are filled
by an inpainting prior, everything else comes from the synthetic image.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol

import numpy as np
from scipy import ndimage

__all__ = [
    'BlendConfig', 'InpaintingPrior', 'RestorationPrior', 'DiffusionInpainter',
    'IdentityRestoration', 'gaussian_kernel', 'blend_mask', 'fuse_region',
]


@dataclass(frozen=True)
class BlendConfig:
    sigma: float = 3.0
    kernel_size: int = 13
    eta: float = 0.4

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError('sigma must be >= 0')
        if not 0 < self.eta < 1:
            raise ValueError('eta must lie in (0, 1)')
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ValueError('kernel_size must be a positive odd integer')

    def scaled(self, resolution: int, base: int = 64) -> 'BlendConfig':
        """Scales blur width linearly with image resolution."""
        f = resolution / base
        size = max(1, int(round(self.kernel_size * f)) | 1)
        return BlendConfig(self.sigma * f, size, self.eta)


class InpaintingPrior(Protocol):
    def fill(self, image: np.ndarray, hole_mask: np.ndarray) -> np.ndarray:
        """Returns ``image`` with pixels under ``hole_mask`` replaced.

        Pixels outside the hole must be returned unchanged.
        """


class RestorationPrior(Protocol):
    def restore(self, image: np.ndarray) -> np.ndarray:
        """Deterministic whole-image correction."""


class IdentityRestoration:
    def restore(self, image):
        return image


class DiffusionInpainter:
    """Fills holes by repeated 4-neighbour averaging (replicate border).

    Images are ``(H, W, C)`` or ``(H, W)`` float arrays.
    """

    def __init__(self, iterations: int = 200):
        self.iterations = iterations

    def fill(self, image, hole_mask):
        image = np.asarray(image)
        hole = np.asarray(hole_mask, bool)
        out = image.astype(np.float64, copy=True)
        if not hole.any():
            return image.copy()
        squeeze = out.ndim == 2
        if squeeze:
            out = out[..., None]
        known = ~hole
        if known.any():
            # start from the mean of the known pixels
            out[hole] = out[known].mean(axis=0)
        for _ in range(self.iterations):
            p = np.pad(out, ((1, 1), (1, 1), (0, 0)), mode='edge')
            avg = (p[:-2, 1:-1] + p[2:, 1:-1] + p[1:-1, :-2] + p[1:-1, 2:]) / 4
            out[hole] = avg[hole]
        if squeeze:
            out = out[..., 0]
        result = image.copy()
        result[hole] = out[hole].astype(image.dtype)
        return result


def gaussian_kernel(sigma: float, size: int) -> np.ndarray:
    """Normalized ``(size, size)`` Gaussian; ``sigma == 0`` gives a delta."""
    if size < 1 or size % 2 == 0:
        raise ValueError(f'kernel size must be a positive odd integer, got {size}')
    if sigma < 0:
        raise ValueError('sigma must be >= 0')
    c = size // 2
    if sigma == 0:
        k = np.zeros((size, size))
        k[c, c] = 1.0
        return k
    r = np.arange(size) - c
    yy, xx = np.meshgrid(r, r, indexing='ij')
    k = np.exp(-(xx ** 2 + yy ** 2) / (2 * sigma ** 2))
    return k / k.sum()


def blend_mask(m_real, m_syn, config: BlendConfig = BlendConfig()) -> np.ndarray:
    """Inpainting band ``1[(m_real | m_syn) * k > eta] minus m_real``.

    Convolution is same-size with replicate padding; the subtraction is a set
    difference, so the result never intersects ``m_real``.
    """
    m_real = np.asarray(m_real, bool)
    m_syn = np.asarray(m_syn, bool)
    if m_real.shape != m_syn.shape:
        raise ValueError(f'mask shapes differ: {m_real.shape} vs {m_syn.shape}')
    union = (m_real | m_syn).astype(np.float64)
    k = gaussian_kernel(config.sigma, config.kernel_size)
    blurred = ndimage.correlate(union, k, mode='nearest')
    return (blurred > config.eta) & ~m_real


def fuse_region(original, synthetic, m_real, m_inp, inpainting: InpaintingPrior) -> np.ndarray:
    """Composites ``original`` under ``m_real`` onto ``synthetic`` and inpaints ``m_inp``.

    Images are ``(H, W, C)`` arrays with matching shape and dtype.
    """
    original = np.asarray(original)
    synthetic = np.asarray(synthetic)
    m_real = np.asarray(m_real, bool)
    m_inp = np.asarray(m_inp, bool)
    if original.shape != synthetic.shape:
        raise ValueError(f'image shapes differ: {original.shape} vs {synthetic.shape}')
    if m_real.shape != original.shape[:2] or m_inp.shape != original.shape[:2]:
        raise ValueError('mask shape does not match image')
    if (m_real & m_inp).any():
        raise ValueError('preserved and inpainting masks overlap')
    composite = synthetic.copy()
    composite[m_real] = original[m_real]
    out = inpainting.fill(composite, m_inp) if m_inp.any() else composite
    out = np.array(out, copy=True)
    # guard against priors that touch pixels outside the hole
    out[m_real] = original[m_real]
    return out
