"""Command-line entry point.

Every verb writes its outputs and a ``manifest.json`` into ``--out-dir``.  The
manifest records the resolved config, seed, checkpoint hash, input hashes and
output hashes, and ``vera rerun`` replays it to verify byte-identical outputs.

Exit codes: 0 ok, 1 usage or config error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import tempfile
import warnings
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .anonymizer import (AnonymizationModels, AnonymizationRequest, anonymize_paired,
                         anonymize_single)
from .config import load_config
from .contrastive import StubEncoder, Trainer
from .errors import ConfigError, DataError, NumericalError
from .evaluation import (CentroidLandmarks, deid_rate, feature_frechet, mask_iou,
                         mean_landmark_offset, pair_consistency, region_l1, region_psnr,
                         write_report)
from .generator import SemanticGenerator
from .inversion import invert_paired, invert_single, psnr
from .latent import estimate_w_mean, sample_latent, slot_pca_directions, substitute_slot
from .storage import (Checkpoint, load_checkpoint, load_dataset_index, load_label_map,
                      load_latents, read_image, save_checkpoint, save_latents, sha256_file,
                      write_image, write_labels, write_mask)

log = logging.getLogger('vera')

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
MANIFEST = 'manifest.json'
EMBEDDER_SEED = 4242


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f'{self.prog}: error: {message}\n')


def _common(p):
    p.add_argument('--config', help='run config JSON')
    p.add_argument('--seed', type=int, help='overrides the config seed')
    p.add_argument('--checkpoint', help='checkpoint file (default: untrained generator)')
    p.add_argument('--out-dir', required=True)
    p.add_argument('--workers', type=int, help='parallel images (default from config)')
    p.add_argument('--label-table', default=None,
                   help="label collapse table for input label maps, e.g. 'celebamask19'")
    p.add_argument('-v', '--verbose', action='store_true')


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog='vera', description='Semantic face anonymization toolkit.')
    parser.add_argument('--version', action='version', version=__version__)
    sub = parser.add_subparsers(dest='verb', required=True, parser_class=_Parser)

    p = sub.add_parser('train', help='contrastive generator training')
    _common(p)
    p.add_argument('--steps', type=int)
    p.add_argument('--data', help='dataset index JSON supplying real images')

    p = sub.add_parser('sample', help='generate random images and label maps')
    _common(p)
    p.add_argument('--n', type=int, default=4)

    p = sub.add_parser('invert', help='invert images into W+')
    _common(p)
    p.add_argument('images', nargs='*')
    p.add_argument('--labels', nargs='*', help='label maps aligned with the images')
    p.add_argument('--pair', nargs=2, action='append', metavar=('A', 'B'), default=[])

    p = sub.add_parser('anonymize', help='anonymize single images or pairs')
    _common(p)
    p.add_argument('images', nargs='*')
    p.add_argument('--labels', nargs='*', help='label maps aligned with the images')
    p.add_argument('--pair', nargs=2, action='append', metavar=('A', 'B'), default=[])
    p.add_argument('--mode', choices=['regular', 'clinical'])
    p.add_argument('--preserve', nargs='+', help='components kept in clinical mode')
    p.add_argument('--resample', nargs='+', help='global slots to resample')
    p.add_argument('--from-latents', help='latents file written by invert')

    p = sub.add_parser('evaluate', help='metrics for an anonymize run')
    _common(p)
    p.add_argument('--run', required=True, help='out-dir of an anonymize run')

    p = sub.add_parser('pca-sweep', help='render a sweep along a slot PCA direction')
    _common(p)
    p.add_argument('--slot', default='pose')
    p.add_argument('--direction', type=int, default=0)
    p.add_argument('--frames', type=int, default=5)
    p.add_argument('--scale', type=float, default=3.0, help='extent in standard deviations')
    p.add_argument('--samples', type=int, default=2000)

    p = sub.add_parser('rerun', help='replay a manifest and compare output hashes')
    p.add_argument('manifest')
    p.add_argument('--out-dir', help='where to write the replay (default: temp dir)')
    p.add_argument('-v', '--verbose', action='store_true')
    return parser


# ---------------------------------------------------------------- helpers

class Run:
    """Resolved config, models and bookkeeping for one verb invocation."""

    def __init__(self, args, environ):
        self.args = args
        self.out = Path(args.out_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        cfg = load_config(args.config, environ)
        if args.seed is not None:
            cfg.seed = args.seed
        if args.workers is not None:
            if args.workers < 1:
                raise UsageError('--workers must be >= 1')
            cfg.workers = args.workers
        if args.checkpoint:
            cfg.paths['checkpoint'] = str(Path(args.checkpoint).resolve())
        self.cfg = cfg
        self.inputs = {}
        self.outputs = []
        self.status = EXIT_OK
        self._models = None

    def input(self, path) -> Path:
        path = Path(path).resolve()
        if not path.is_file():
            raise DataError(f'input not found: {path}')
        self.inputs[str(path)] = sha256_file(path)
        return path

    def output(self, name) -> Path:
        self.outputs.append(name)
        path = self.out / name
        path.parent.mkdir(parents=True, exist_ok=True)
        return path

    def fail(self, code):
        self.status = max(self.status, code)

    def checkpoint(self):
        path = self.cfg.paths.get('checkpoint')
        return self.input(path) if path else None

    def generator(self):
        if self._models is None:
            ckpt_path = self.checkpoint()
            if ckpt_path:
                ckpt = load_checkpoint(ckpt_path)
                gen, w_mean = ckpt.build_generator(), ckpt.w_mean
            else:
                gen = SemanticGenerator(self.cfg.generator).eval()
                w_mean = estimate_w_mean(self.cfg.seed, self.cfg.train['w_mean_samples'],
                                         gen.mapping, self.cfg.generator)
            gen.requires_grad_(False)
            self._models = (gen, w_mean)
        return self._models

    def anonymization_models(self):
        gen, w_mean = self.generator()
        blend = self.cfg.blend.scaled(gen.config.resolution)
        return AnonymizationModels(gen, w_mean, self.cfg.inversion, blend)

    def label_path(self, image_path, explicit=None) -> Path:
        """Explicit label map, else ``<stem>_labels.png`` next to the image."""
        return self.input(explicit or image_path.with_name(image_path.stem + '_labels.png'))

    def labels_for(self, image_path, explicit=None):
        return load_label_map(self.label_path(image_path, explicit), self.cfg.generator.layout,
                              self.args.label_table, self.cfg.generator.resolution)

    def manifest(self, extra=None):
        ckpt = self.cfg.paths.get('checkpoint')
        doc = {
            'verb': self.args.verb,
            'argv': self.args._argv,
            'version': __version__,
            'config': self.cfg.to_dict(),
            'config_hash': self.cfg.digest(),
            'seed': self.cfg.seed,
            'checkpoint': ckpt,
            'checkpoint_hash': self.inputs.get(ckpt) if ckpt else None,
            'inputs': dict(sorted(self.inputs.items())),
            'outputs': {name: sha256_file(self.out / name) for name in sorted(self.outputs)},
            'status': self.status,
            **(extra or {}),
        }
        (self.out / MANIFEST).write_text(json.dumps(doc, indent=2, sort_keys=True) + '\n')


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + '\n')


def _items(run):
    """Single images and pairs from positional args, ``--labels`` and ``--pair``."""
    args = run.args
    singles = [Path(p) for p in args.images]
    labels = args.labels or []
    if labels and len(labels) != len(singles):
        raise UsageError(f'{len(labels)} label maps given for {len(singles)} images')
    items = [('single', [run.input(p)], [labels[i] if labels else None])
             for i, p in enumerate(singles)]
    items += [('paired', [run.input(a), run.input(b)], [None, None]) for a, b in args.pair]
    if not items:
        raise UsageError('no input images given')
    return items


def _map(run, fn, items):
    with ThreadPoolExecutor(max_workers=run.cfg.workers) as pool:
        return list(pool.map(fn, range(len(items)), items))


# ---------------------------------------------------------------- verbs

def cmd_train(run):
    cfg = run.cfg
    steps = run.args.steps if run.args.steps is not None else cfg.train['steps']
    reals = None
    if run.args.data:
        entries = load_dataset_index(run.input(run.args.data))
        reals = torch.stack([read_image(run.input(e.image), cfg.generator.resolution)
                             for e in entries])
    ckpt_path = run.checkpoint()
    if ckpt_path:
        ckpt = load_checkpoint(ckpt_path)
        gen = ckpt.build_generator().train()
        trainer = Trainer(gen, cfg.contrastive, step_count=ckpt.step)
        for slot, state in ckpt.heads.items():
            trainer.heads[slot].load_state_dict(state)
        if ckpt.discriminator_state:
            trainer.discriminator.load_state_dict(ckpt.discriminator_state)
    else:
        trainer = Trainer(SemanticGenerator(cfg.generator), cfg.contrastive)
    history = []
    for i in range(steps):
        report = trainer.step(cfg.seed * 1_000_003 + trainer.step_count, reals)
        history.append(report)
        if report.get('aborted'):
            log.error('training aborted at step %d: %s', i, report)
            run.fail(EXIT_NUMERIC)
            break
        if (i + 1) % cfg.train['log_every'] == 0:
            log.info('step %d contrastive %.4f', trainer.step_count, report['contrastive'])
    gen = trainer.generator.eval()
    w_mean = estimate_w_mean(cfg.seed, cfg.train['w_mean_samples'], gen.mapping, cfg.generator)
    heads = {s: h.state_dict() for s, h in trainer.heads.items()}
    save_checkpoint(run.output('checkpoint.vera'),
                    Checkpoint(cfg.generator, gen.state_dict(), w_mean, heads,
                               trainer.step_count, {'contrastive': cfg.contrastive.to_dict()},
                               trainer.discriminator.state_dict()))
    _write_json(run.output('train_log.json'), history)


def cmd_sample(run):
    gen, _ = run.generator()
    cfg = run.cfg
    z = sample_latent(cfg.seed, cfg.generator, n=run.args.n)
    with torch.no_grad():
        w = gen.mapping(z)
        out = gen(w)
    for i in range(run.args.n):
        write_image(run.output(f'sample_{i:04d}.png'), out.image[i])
        write_labels(run.output(f'sample_{i:04d}_labels.png'), out.labels()[i])
    save_latents(run.output('latents.vera'), [w[i] for i in range(run.args.n)])


def cmd_invert(run):
    gen, w_mean = run.generator()
    items = _items(run)
    res = gen.config.resolution

    def work(idx, item):
        kind, paths, label_paths = item
        images = [read_image(p, res) for p in paths]
        labels = [run.labels_for(p, l) for p, l in zip(paths, label_paths)]
        seed = run.cfg.seed + idx
        if kind == 'single':
            r = invert_single(images[0], labels[0], gen, w_mean, run.cfg.inversion, seed)
            latents, trace = [r.latent], r.trace
        else:
            r = invert_paired(images, labels, gen, w_mean, run.cfg.inversion, seed)
            latents, trace = list(r.latents), r.trace
        return kind, paths, images, latents, trace, r.diverged, r.best_loss

    results = _map(run, work, items)
    all_latents, index = [], []
    for idx, (kind, paths, images, latents, trace, diverged, best) in enumerate(results):
        if diverged:
            log.error('inversion diverged for %s', [p.name for p in paths])
            run.fail(EXIT_NUMERIC)
        for j, (p, img, w) in enumerate(zip(paths, images, latents)):
            with torch.no_grad():
                rec = gen(w).image[0]
            name = f'{idx:04d}_{j}'
            write_image(run.output(f'recon_{name}.png'), rec)
            index.append({'item': idx, 'arity': kind, 'image': p.name, 'sha256': run.inputs[str(p)],
                          'psnr': psnr(rec, img), 'best_loss': best, 'diverged': diverged})
            all_latents.append(w)
        _write_json(run.output(f'trace_{idx:04d}.json'), trace)
    save_latents(run.output('latents.vera'), all_latents, {'entries': index})
    _write_json(run.output('invert_report.json'), index)


def _request(run, kind, seed):
    r = run.cfg.request
    mode = run.args.mode or r['mode']
    preserve = run.args.preserve if run.args.preserve is not None else r['preserve']
    resample = run.args.resample or r['resample_slots']
    try:
        return AnonymizationRequest(mode, kind, frozenset(preserve), frozenset(resample), seed)
    except ValueError as e:
        raise UsageError(str(e)) from e


def cmd_anonymize(run):
    models = run.anonymization_models()
    res = models.generator.config.resolution
    items = _items(run)
    cached = None
    if run.args.from_latents:
        cached, meta = load_latents(run.input(run.args.from_latents))
        hashes = [e['sha256'] for e in meta.get('entries', [])]
        wanted = [run.inputs[str(p)] for _, paths, _ in items for p in paths]
        if hashes != wanted:
            raise DataError('--from-latents file was computed for different inputs')
    offsets = np.cumsum([0] + [len(paths) for _, paths, _ in items])
    for kind, _, _ in items:
        _request(run, kind, 0)  # validate before any work

    def work(idx, item):
        kind, paths, label_paths = item
        images = [read_image(p, res) for p in paths]
        labels = [run.labels_for(p, l) for p, l in zip(paths, label_paths)]
        request = _request(run, kind, run.cfg.seed + idx)
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter('always')
            if kind == 'single':
                latent = cached[offsets[idx]] if cached else None
                result = anonymize_single(images[0], labels[0], request, models, latent)
            else:
                latents = cached[offsets[idx]:offsets[idx] + 2] if cached else None
                result = anonymize_paired(images, labels, request, models, latents)
        return kind, paths, labels, result, [str(w.message) for w in caught]

    results = _map(run, work, items)
    item_labels = [label_paths for _, _, label_paths in items]
    anon_latents, summary = [], []
    for idx, (kind, paths, labels, result, notes) in enumerate(results):
        for note in notes:
            log.warning('%s: %s', [p.name for p in paths], note)
        if result.diverged:
            log.error('inversion diverged for %s', [p.name for p in paths])
            run.fail(EXIT_NUMERIC)
        files = []
        for j, p in enumerate(paths):
            name = f'{idx:04d}_{j}'
            write_image(run.output(f'anon_{name}.png'), result.outputs[j])
            write_labels(run.output(f'anon_{name}_labels.png'), result.output_labels[j])
            for key, mask in result.masks[j].items():
                write_mask(run.output(f'mask_{name}_{key}.png'), mask)
            label_file = run.label_path(p, item_labels[idx][j])
            files.append({'input': p.name, 'input_sha256': run.inputs[str(p)],
                          'input_labels': str(label_file),
                          'output': f'anon_{name}.png', 'labels': f'anon_{name}_labels.png'})
            anon_latents.append(result.anonymized[j])
        report = {**result.report, 'files': files, 'warnings': notes}
        _write_json(run.output(f'report_{idx:04d}.json'), report)
        summary.append({'item': idx, 'arity': kind, 'files': files,
                        'preserved': result.report['preserved_components']})
    save_latents(run.output('anonymized_latents.vera'), anon_latents)
    _write_json(run.output('anonymize_summary.json'), summary)


def cmd_evaluate(run):
    src = Path(run.args.run)
    manifest = json.loads(run.input(src / MANIFEST).read_text())
    if manifest.get('verb') != 'anonymize':
        raise DataError(f'{src} is not an anonymize run')
    summary = json.loads(run.input(src / 'anonymize_summary.json').read_text())
    layout = run.cfg.generator.layout
    res = run.cfg.generator.resolution
    by_hash = {h: Path(p) for p, h in manifest['inputs'].items()}
    embedder = StubEncoder(EMBEDDER_SEED)
    landmarks = CentroidLandmarks(layout.indices(layout.interior))
    rows, deid_pairs, pairs, inputs, f_in, f_out = [], [], [], [], [], []
    for item in summary:
        keep = layout.indices(item['preserved'])
        outs, ins = [], []
        for f in item['files']:
            in_path = by_hash.get(f['input_sha256'])
            if in_path is None or not in_path.is_file():
                raise DataError(f"input {f['input']} of {src} is no longer available")
            image = read_image(run.input(in_path), res)
            labels = load_label_map(run.input(f['input_labels']), layout,
                                    manifest['argv_label_table'], res)
            output = read_image(run.input(src / f['output']), res)
            out_labels = load_label_map(run.input(src / f['labels']), layout)
            m_in = np.isin(labels.numpy(), keep)
            m_out = np.isin(out_labels.numpy(), keep)
            row = {'item': item['item'], 'image': f['input'], 'arity': item['arity']}
            if m_in.any():
                row['region_l1'] = region_l1(image, output, m_in)
                row['region_psnr'] = region_psnr(image, output, m_in)
            row['mask_iou'] = mask_iou(m_in, m_out)
            row['landmark_offset'] = mean_landmark_offset(landmarks.detect(labels.numpy()),
                                                          landmarks.detect(out_labels.numpy()))
            rows.append(row)
            deid_pairs.append((image, output))
            f_in.append(embedder.embed(image))
            f_out.append(embedder.embed(output))
            outs.append(output)
            ins.append(image)
        if item['arity'] == 'paired':
            pairs.append(tuple(outs))
            inputs.append(tuple(ins))
    summary_out = {'n_images': len(rows), 'deid_rate': deid_rate(deid_pairs, embedder)}
    for key in ('region_l1', 'region_psnr', 'mask_iou', 'landmark_offset'):
        vals = [r[key] for r in rows if key in r]
        if vals:
            summary_out[key] = float(np.mean(vals))
    if pairs:
        pc = pair_consistency(pairs, inputs, embedder)
        summary_out['pair_reid_rate'] = pc.reid_rate
        summary_out['pair_distance_delta'] = pc.distance_delta
    if len(rows) >= 2:
        summary_out['stub_fid'] = feature_frechet(np.array(f_in), np.array(f_out))
    run.output('metrics.json')
    run.output('metrics.csv')
    write_report(run.out / 'metrics', rows, summary_out)


def cmd_pca_sweep(run):
    gen, _ = run.generator()
    cfg, args = run.cfg, run.args
    if args.frames < 2:
        raise UsageError('--frames must be >= 2')
    with torch.no_grad():
        w_all = gen.mapping(sample_latent(cfg.seed + 1, cfg.generator, n=args.samples))
    try:
        pca = slot_pca_directions(w_all.w_global, args.slot, args.direction + 1,
                                  cfg.generator.slots)
    except (ValueError, KeyError) as e:
        raise UsageError(str(e)) from e
    if args.direction >= len(pca.directions):
        raise DataError(f'direction {args.direction} is degenerate for slot {args.slot}')
    d = torch.as_tensor(pca.directions[args.direction], dtype=torch.float32)
    sd = float(np.sqrt(pca.variances[args.direction]))
    with torch.no_grad():
        base = gen.mapping(sample_latent(cfg.seed, cfg.generator))
        offsets = np.linspace(-args.scale, args.scale, args.frames)
        frames = []
        for i, t in enumerate(offsets):
            w = substitute_slot(base, args.slot, base.slot(args.slot) + float(t) * sd * d)
            out = gen(w)
            write_image(run.output(f'sweep_{i:02d}.png'), out.image[0])
            frames.append(w)
    save_latents(run.output('sweep_latents.vera'), frames,
                 {'slot': args.slot, 'direction': args.direction,
                  'offsets_sd': [float(t) for t in offsets], 'sd': sd})


VERBS = {'train': cmd_train, 'sample': cmd_sample, 'invert': cmd_invert,
         'anonymize': cmd_anonymize, 'evaluate': cmd_evaluate, 'pca-sweep': cmd_pca_sweep}


def _replay_argv(argv):
    """Drops ``--out-dir`` and ``--config`` (with values) from a recorded argv."""
    out, skip = [], False
    for tok in argv:
        if skip:
            skip = False
            continue
        if tok in ('--out-dir', '--config'):
            skip = True
            continue
        if tok.startswith(('--out-dir=', '--config=')):
            continue
        out.append(tok)
    return out


def cmd_rerun(args) -> int:
    manifest_path = Path(args.manifest)
    try:
        manifest = json.loads(manifest_path.read_text())
    except (OSError, json.JSONDecodeError) as e:
        log.error('cannot read manifest %s: %s', manifest_path, e)
        return EXIT_DATA
    for path, digest in manifest['inputs'].items():
        if not Path(path).is_file() or sha256_file(path) != digest:
            log.error('input changed or missing since the recorded run: %s', path)
            return EXIT_DATA
    out_dir = Path(args.out_dir) if args.out_dir else Path(tempfile.mkdtemp(prefix='vera-rerun-'))
    cfg_path = out_dir.with_name(out_dir.name + '.config.json')
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_json(cfg_path, manifest['config'])
    argv = _replay_argv(manifest['argv']) + ['--config', str(cfg_path), '--out-dir', str(out_dir)]
    try:
        code = main(argv, environ={})
    finally:
        cfg_path.unlink(missing_ok=True)
    replay = json.loads((out_dir / MANIFEST).read_text())
    diff = sorted(k for k in set(manifest['outputs']) | set(replay['outputs'])
                  if manifest['outputs'].get(k) != replay['outputs'].get(k))
    for name in diff:
        print(f'DIFFERS {name}')
    print(f"rerun of {manifest['verb']}: {len(manifest['outputs']) - len(diff)}/"
          f"{len(manifest['outputs'])} outputs identical -> {out_dir}")
    if diff:
        return EXIT_DATA
    return code


def main(argv=None, environ=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format='%(levelname)s %(name)s: %(message)s')
    if args.verb == 'rerun':
        return cmd_rerun(args)
    args._argv = [os.path.abspath(a) if Path(a).exists() and not a.startswith('-') else a
                  for a in _replay_argv(argv)]
    torch.set_num_threads(1)
    environ = os.environ if environ is None else environ
    try:
        run = Run(args, environ)
        VERBS[args.verb](run)
    except (ConfigError, UsageError) as e:
        print(f'vera {args.verb}: {e}', file=sys.stderr)
        return EXIT_USAGE
    except DataError as e:
        print(f'vera {args.verb}: data error: {e}', file=sys.stderr)
        return EXIT_DATA
    except NumericalError as e:
        print(f'vera {args.verb}: numerical failure: {e}', file=sys.stderr)
        return EXIT_NUMERIC
    run.manifest({'argv_label_table': args.label_table})
    return run.status


if __name__ == '__main__':
    sys.exit(main())
