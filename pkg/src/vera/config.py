"""Run configuration: one JSON document, schema-validated, unknown keys rejected.

Section schemas are derived from the dataclass defaults so the config file and
the code cannot drift apart.  Environment variables ``VERA_<SECTION>__<KEY>``
(values parsed as JSON, falling back to plain strings) override file values;
top-level keys use ``VERA_<KEY>``.
"""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import jsonschema

from .blending import BlendConfig
from .contrastive import ContrastiveConfig
from .errors import ConfigError
from .inversion import InversionConfig
from .latent import GeneratorConfig
from .storage import canonical_json

__all__ = ['SCHEMA_VERSION', 'RunConfig', 'schema', 'load_config', 'apply_env']

SCHEMA_VERSION = 1

_JSON_TYPES = {bool: 'boolean', int: 'integer', float: 'number', str: 'string',
               tuple: 'array', list: 'array', dict: 'object'}


def _section_schema(cls) -> dict:
    props = {}
    for f in dataclasses.fields(cls):
        if f.default is not dataclasses.MISSING:
            default = f.default
        elif f.default_factory is not dataclasses.MISSING:
            default = f.default_factory()
        else:
            default = None
        t = _JSON_TYPES.get(type(default))
        if t == 'number':
            props[f.name] = {'type': 'number'}
        elif t is not None:
            props[f.name] = {'type': t}
        else:
            props[f.name] = {}
    return {'type': 'object', 'properties': props, 'additionalProperties': False}


def schema() -> dict:
    return {
        'type': 'object',
        'additionalProperties': False,
        'required': ['schema_version'],
        'properties': {
            'schema_version': {'const': SCHEMA_VERSION},
            'seed': {'type': 'integer'},
            'workers': {'type': 'integer', 'minimum': 1},
            'generator': _section_schema(GeneratorConfig),
            'contrastive': _section_schema(ContrastiveConfig),
            'inversion': _section_schema(InversionConfig),
            'blend': _section_schema(BlendConfig),
            'request': {
                'type': 'object', 'additionalProperties': False,
                'properties': {
                    'mode': {'enum': ['clinical', 'regular']},
                    'preserve': {'type': 'array', 'items': {'type': 'string'}},
                    'resample_slots': {'type': 'array', 'items': {'type': 'string'}},
                },
            },
            'train': {
                'type': 'object', 'additionalProperties': False,
                'properties': {
                    'steps': {'type': 'integer', 'minimum': 0},
                    'w_mean_samples': {'type': 'integer', 'minimum': 1},
                    'log_every': {'type': 'integer', 'minimum': 1},
                },
            },
            'paths': {
                'type': 'object', 'additionalProperties': False,
                'properties': {'checkpoint': {'type': 'string'}, 'out_dir': {'type': 'string'}},
            },
        },
    }


@dataclass
class RunConfig:
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    contrastive: ContrastiveConfig = field(default_factory=ContrastiveConfig)
    inversion: InversionConfig = field(default_factory=InversionConfig)
    blend: BlendConfig = field(default_factory=BlendConfig)
    request: dict = field(default_factory=lambda: {'mode': 'regular', 'preserve': [],
                                                   'resample_slots': ['identity']})
    train: dict = field(default_factory=lambda: {'steps': 100, 'w_mean_samples': 10000,
                                                 'log_every': 10})
    seed: int = 0
    workers: int = 1
    paths: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, doc: dict) -> 'RunConfig':
        validate(doc)
        base = cls()
        kw = {}
        for name, typ in (('generator', GeneratorConfig), ('contrastive', ContrastiveConfig),
                          ('inversion', InversionConfig), ('blend', BlendConfig)):
            try:
                kw[name] = dataclasses.replace(getattr(base, name), **doc.get(name, {}))
            except (TypeError, ValueError) as e:
                raise ConfigError(f'invalid {name} section: {e}') from e
        kw['request'] = {**base.request, **doc.get('request', {})}
        kw['train'] = {**base.train, **doc.get('train', {})}
        kw['paths'] = {**base.paths, **doc.get('paths', {})}
        kw['seed'] = doc.get('seed', base.seed)
        kw['workers'] = doc.get('workers', base.workers)
        return cls(**kw)

    def to_dict(self) -> dict:
        def plain(obj):
            d = dataclasses.asdict(obj)
            return json.loads(json.dumps(d))
        return {'schema_version': SCHEMA_VERSION, 'seed': self.seed, 'workers': self.workers,
                'generator': plain(self.generator), 'contrastive': plain(self.contrastive),
                'inversion': plain(self.inversion), 'blend': plain(self.blend),
                'request': copy.deepcopy(self.request), 'train': dict(self.train),
                'paths': dict(self.paths)}

    def digest(self) -> str:
        return hashlib.sha256(canonical_json(self.to_dict())).hexdigest()


def validate(doc) -> None:
    """Raises ``ConfigError`` listing every schema violation."""
    validator = jsonschema.Draft202012Validator(schema())
    errors = sorted(validator.iter_errors(doc), key=lambda e: list(e.absolute_path))
    if errors:
        lines = [f"  {'/'.join(map(str, e.absolute_path)) or '<root>'}: {e.message}"
                 for e in errors]
        raise ConfigError('config failed schema validation:\n' + '\n'.join(lines))


def _parse_env_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_env(doc: dict, environ=None) -> dict:
    """Returns a copy of ``doc`` with ``VERA_*`` overrides applied."""
    environ = os.environ if environ is None else environ
    doc = copy.deepcopy(doc)
    for key in sorted(environ):
        if not key.startswith('VERA_'):
            continue
        parts = key[5:].lower().split('__')
        target = doc
        for part in parts[:-1]:
            target = target.setdefault(part, {})
            if not isinstance(target, dict):
                raise ConfigError(f'{key}: {part!r} is not a config section')
        target[parts[-1]] = _parse_env_value(environ[key])
    return doc


def load_config(path=None, environ=None) -> RunConfig:
    """Reads the JSON file at ``path`` (or an empty document) plus env overrides."""
    if path is None:
        doc = {'schema_version': SCHEMA_VERSION}
    else:
        try:
            doc = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f'config file not found: {path}') from None
        except json.JSONDecodeError as e:
            raise ConfigError(f'config file {path} is not valid JSON: {e}') from e
    return RunConfig.from_dict(apply_env(doc, environ))
