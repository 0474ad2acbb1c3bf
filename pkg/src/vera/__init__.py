"""Semantic-component face anonymization with a compositional generator."""

__version__ = '0.1.0'

from .errors import ConfigError, DataError, DomainError, NumericalError, VeraError  # noqa: E402
from .latent import (AttributeSlot, ExtendedLatent, GeneratorConfig, SemanticLayout,  # noqa: E402
                     sample_latent)
from .generator import SemanticGenerator  # noqa: E402
from .inversion import InversionConfig, invert_paired, invert_single  # noqa: E402
from .blending import BlendConfig, blend_mask, fuse_region  # noqa: E402
from .anonymizer import (AnonymizationModels, AnonymizationRequest,  # noqa: E402
                         anonymize_paired, anonymize_single)

__all__ = [
    'VeraError', 'ConfigError', 'DataError', 'DomainError', 'NumericalError',
    'AttributeSlot', 'ExtendedLatent', 'GeneratorConfig', 'SemanticLayout', 'sample_latent',
    'SemanticGenerator', 'InversionConfig', 'invert_single', 'invert_paired',
    'BlendConfig', 'blend_mask', 'fuse_region', 'AnonymizationModels', 'AnonymizationRequest',
    'anonymize_single', 'anonymize_paired',
]
