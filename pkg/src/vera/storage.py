"""Binary tensor container, checkpoints, PNG and label-map I/O.

Container layout (all integers little-endian)::

    b"VERA"  u32 format_version  u32 n_entries
    per entry, sorted by name:
        u32 name_len  name (utf-8)
        u8 dtype_code  u8 ndim  u64 dims[ndim]
        u64 n_bytes  raw little-endian C-order data

A ``__meta__`` entry holds canonical JSON (sorted keys) as uint8 bytes, so the
same content always serializes to the same bytes.
"""

from __future__ import annotations

import hashlib
import json
import struct
import warnings
from dataclasses import asdict, dataclass
from importlib import resources
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .errors import DataError
from .latent import ExtendedLatent, GeneratorConfig, SemanticLayout, SlotLayout

__all__ = [
    'FORMAT_VERSION', 'save_tensors', 'load_tensors', 'save_checkpoint', 'load_checkpoint',
    'Checkpoint', 'save_latents', 'load_latents', 'read_image', 'write_image', 'write_labels',
    'load_label_map', 'collapse_table', 'sha256_file', 'canonical_json', 'write_mask',
    'DatasetEntry', 'load_dataset_index',
]

MAGIC = b'VERA'
FORMAT_VERSION = 1
META = '__meta__'

_DTYPES = {
    1: np.dtype('<f4'), 2: np.dtype('<f8'), 3: np.dtype('<i8'), 4: np.dtype('<i4'),
    5: np.dtype('u1'), 6: np.dtype('?'), 7: np.dtype('<f2'),
}


def canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(',', ':'), allow_nan=False).encode()


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, 'rb') as f:
        for block in iter(lambda: f.read(1 << 16), b''):
            h.update(block)
    return h.hexdigest()


def _as_array(value) -> tuple[int, np.ndarray]:
    if torch.is_tensor(value):
        value = value.detach().cpu().numpy()
    arr = np.asarray(value)
    for code, dt in _DTYPES.items():
        if arr.dtype in (dt, dt.newbyteorder('>')):
            return code, np.require(arr.astype(dt, copy=False), requirements='C')
    raise TypeError(f'unsupported dtype {arr.dtype}')


def save_tensors(path, tensors: dict, meta: dict = None) -> None:
    """Writes named arrays (and optional JSON metadata) to ``path``."""
    entries = {name: _as_array(t) for name, t in tensors.items()}
    if META in entries:
        raise ValueError(f'{META!r} is reserved')
    if meta is not None:
        entries[META] = _as_array(np.frombuffer(canonical_json(meta), dtype=np.uint8))
    out = [MAGIC, struct.pack('<II', FORMAT_VERSION, len(entries))]
    for name in sorted(entries):
        code, arr = entries[name]
        key = name.encode()
        out.append(struct.pack('<I', len(key)) + key)
        out.append(struct.pack('<BB', code, arr.ndim))
        out.append(struct.pack(f'<{arr.ndim}Q', *arr.shape))
        data = arr.tobytes(order='C')
        out.append(struct.pack('<Q', len(data)) + data)
    Path(path).write_bytes(b''.join(out))


def load_tensors(path) -> tuple[dict, dict]:
    """Returns ``(arrays, meta)``; raises ``DataError`` on malformed files."""
    buf = Path(path).read_bytes()
    view = memoryview(buf)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise DataError(f'{path}: truncated container')
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    if bytes(take(4)) != MAGIC:
        raise DataError(f'{path}: not a tensor container')
    version, n = struct.unpack('<II', take(8))
    if version != FORMAT_VERSION:
        raise DataError(f'{path}: unsupported format version {version}')
    arrays, meta = {}, {}
    for _ in range(n):
        (name_len,) = struct.unpack('<I', take(4))
        name = bytes(take(name_len)).decode()
        code, ndim = struct.unpack('<BB', take(2))
        if code not in _DTYPES:
            raise DataError(f'{path}: unknown dtype code {code} for {name!r}')
        shape = struct.unpack(f'<{ndim}Q', take(8 * ndim))
        (nbytes,) = struct.unpack('<Q', take(8))
        arr = np.frombuffer(bytes(take(nbytes)), dtype=_DTYPES[code])
        if arr.size != int(np.prod(shape, dtype=np.int64)):
            raise DataError(f'{path}: size mismatch for {name!r}')
        arr = arr.reshape(shape)
        if name == META:
            meta = json.loads(arr.tobytes().decode())
        else:
            arrays[name] = arr.copy()
    if pos != len(buf):
        raise DataError(f'{path}: trailing bytes')
    return arrays, meta


def config_to_dict(config: GeneratorConfig) -> dict:
    d = asdict(config)
    d['components'] = list(d['components'])
    d['renderer_channels'] = list(d['renderer_channels'])
    return d


class Checkpoint:
    """Everything needed to resume training or run inference.

    ``heads`` maps slot names to projection-head state dicts.
    """

    def __init__(self, generator_config: GeneratorConfig, generator_state: dict,
                 w_mean: ExtendedLatent, heads: dict = None, step: int = 0, extra: dict = None,
                 discriminator_state: dict = None):
        self.generator_config = generator_config
        self.generator_state = generator_state
        self.w_mean = w_mean
        self.heads = heads or {}
        self.step = step
        self.extra = extra or {}
        self.discriminator_state = discriminator_state

    @property
    def layout(self) -> SemanticLayout:
        return self.generator_config.layout

    def build_generator(self):
        from .generator import SemanticGenerator
        g = SemanticGenerator(self.generator_config)
        g.load_state_dict({k: torch.as_tensor(v) for k, v in self.generator_state.items()})
        g.eval()
        return g


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    tensors = {f'generator/{k}': v for k, v in ckpt.generator_state.items()}
    for slot, state in ckpt.heads.items():
        tensors.update({f'heads/{slot}/{k}': v for k, v in state.items()})
    if ckpt.discriminator_state:
        tensors.update({f'discriminator/{k}': v for k, v in ckpt.discriminator_state.items()})
    tensors['w_mean/global'] = ckpt.w_mean.w_global
    tensors['w_mean/local'] = ckpt.w_mean.w_local
    meta = {'kind': 'checkpoint', 'version': FORMAT_VERSION, 'step': int(ckpt.step),
            'generator_config': config_to_dict(ckpt.generator_config),
            'layout': ckpt.layout.to_json(), 'extra': ckpt.extra}
    save_tensors(path, tensors, meta)


def load_checkpoint(path) -> Checkpoint:
    arrays, meta = load_tensors(path)
    if meta.get('kind') != 'checkpoint' or 'version' not in meta:
        raise DataError(f'{path}: not a checkpoint (missing kind/version)')
    gc = dict(meta['generator_config'])
    config = GeneratorConfig(**gc)
    if SemanticLayout.from_json(meta['layout']) != config.layout:
        raise DataError(f'{path}: stored layout disagrees with generator config')
    gen, heads, disc = {}, {}, {}
    for name, arr in arrays.items():
        section, _, rest = name.partition('/')
        t = torch.from_numpy(arr)
        if section == 'generator':
            gen[rest] = t
        elif section == 'heads':
            slot, _, key = rest.partition('/')
            heads.setdefault(slot, {})[key] = t
        elif section == 'discriminator':
            disc[rest] = t
    w_mean = ExtendedLatent(torch.from_numpy(arrays['w_mean/global']),
                            torch.from_numpy(arrays['w_mean/local']), config.slots)
    return Checkpoint(config, gen, w_mean, heads, meta['step'], meta.get('extra', {}),
                      disc or None)


def save_latents(path, latents, meta: dict = None) -> None:
    """Stores a list of ``ExtendedLatent`` codes with their slot layout."""
    tensors = {}
    for i, w in enumerate(latents):
        tensors[f'{i:04d}/global'] = w.w_global
        tensors[f'{i:04d}/local'] = w.w_local
    slots = [[s.value, d] for s, d in latents[0].slots.dims]
    save_tensors(path, tensors, {'kind': 'latents', 'n': len(latents), 'slots': slots,
                                 **(meta or {})})


def load_latents(path) -> tuple[list, dict]:
    arrays, meta = load_tensors(path)
    if meta.get('kind') != 'latents':
        raise DataError(f'{path}: not a latent file')
    from .latent import AttributeSlot
    slots = SlotLayout(tuple((AttributeSlot(s), d) for s, d in meta['slots']))
    out = [ExtendedLatent(torch.from_numpy(arrays[f'{i:04d}/global']),
                          torch.from_numpy(arrays[f'{i:04d}/local']), slots)
           for i in range(meta['n'])]
    return out, meta


def read_image(path, resolution: int = None) -> torch.Tensor:
    """8-bit RGB PNG to a ``(3, H, W)`` float tensor in ``[-1, 1]``."""
    try:
        with Image.open(path) as im:
            im = im.convert('RGB')
            if resolution and im.size != (resolution, resolution):
                im = im.resize((resolution, resolution), Image.BILINEAR)
            arr = np.asarray(im, dtype=np.float32)
    except (OSError, ValueError) as e:
        raise DataError(f'cannot read image {path}: {e}') from e
    return torch.from_numpy(arr.transpose(2, 0, 1) / 127.5 - 1)


def to_uint8(image) -> np.ndarray:
    if torch.is_tensor(image):
        image = image.detach().cpu().numpy().transpose(1, 2, 0)
    return np.clip(np.rint((np.asarray(image) + 1) * 127.5), 0, 255).astype(np.uint8)


def write_image(path, image) -> None:
    Image.fromarray(to_uint8(image), 'RGB').save(path, format='PNG')


def write_labels(path, labels) -> None:
    """Label map as an 8-bit grayscale PNG of component indices."""
    arr = labels.cpu().numpy() if torch.is_tensor(labels) else np.asarray(labels)
    Image.fromarray(arr.astype(np.uint8), 'L').save(path, format='PNG')


def write_mask(path, mask) -> None:
    Image.fromarray(np.asarray(mask, bool).astype(np.uint8) * 255, 'L').save(path, format='PNG')


def collapse_table(name: str = 'celebamask19') -> dict:
    """Loads a shipped label-collapse table by name."""
    text = resources.files('vera.data').joinpath(f'{name}.json').read_text()
    return json.loads(text)


def _lookup(table: dict, layout: SemanticLayout) -> np.ndarray:
    classes = table['classes']
    targets = [table['map'].get(c) for c in classes]
    bad = sorted({t for t in targets if t is None or t not in layout.names}, key=str)
    if bad:
        raise DataError(f'label table maps to components missing from the layout: {bad}')
    return np.array([layout.index(t) for t in targets], dtype=np.int64)


def load_label_map(path, layout: SemanticLayout = SemanticLayout(), table=None,
                   resolution: int = None) -> torch.Tensor:
    """Reads an indexed or grayscale PNG label map as ``(H, W)`` int64 labels.

    ``table`` is ``None`` for files already in ``layout`` order, a table name
    such as ``'celebamask19'``, or a table dict.  Values outside the source
    label set become background with a warning.
    """
    try:
        with Image.open(path) as im:
            if im.mode not in ('P', 'L', 'I', 'I;16'):
                im = im.convert('L')
            if resolution and im.size != (resolution, resolution):
                im = im.resize((resolution, resolution), Image.NEAREST)
            values = np.asarray(im).astype(np.int64)
    except (OSError, ValueError) as e:
        raise DataError(f'cannot read label map {path}: {e}') from e
    if table is None:
        lut = np.arange(len(layout))
    else:
        lut = _lookup(collapse_table(table) if isinstance(table, str) else table, layout)
    out_of_set = (values < 0) | (values >= len(lut))
    if out_of_set.any():
        warnings.warn(f'{path}: labels {sorted(set(values[out_of_set].tolist()))} are outside '
                      f'the label set; mapped to background', RuntimeWarning, stacklevel=2)
    background = layout.index('background') if 'background' in layout.names else 0
    result = np.where(out_of_set, background, lut[np.clip(values, 0, len(lut) - 1)])
    return torch.from_numpy(result)


@dataclass(frozen=True)
class DatasetEntry:
    image: str
    labels: str
    identity: str
    pair: str = None


def load_dataset_index(path) -> list[DatasetEntry]:
    """Reads a JSON list of ``{image, labels, identity, pair?}`` records.

    Relative paths resolve against the index file.  Each pair id must name
    exactly two entries with the same identity.
    """
    path = Path(path)
    try:
        records = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise DataError(f'cannot read dataset index {path}: {e}') from e
    if not isinstance(records, list):
        raise DataError(f'{path}: dataset index must be a JSON list')
    entries = []
    for i, rec in enumerate(records):
        try:
            entry = DatasetEntry(str(path.parent / rec['image']), str(path.parent / rec['labels']),
                                 str(rec['identity']), rec.get('pair'))
        except (KeyError, TypeError) as e:
            raise DataError(f'{path}: record {i} is malformed ({e})') from e
        entries.append(entry)
    pairs = {}
    for e in entries:
        if e.pair is not None:
            pairs.setdefault(e.pair, []).append(e)
    for pid, members in pairs.items():
        if len(members) != 2:
            raise DataError(f'{path}: pair {pid!r} has {len(members)} entries, expected 2')
        if members[0].identity != members[1].identity:
            raise DataError(f'{path}: pair {pid!r} mixes identities')
    return entries
