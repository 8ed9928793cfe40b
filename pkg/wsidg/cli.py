"""
Command-line entry point::

    wsidg generate --config experiment.json
    wsidg tile
    wsidg group --set grouping.k=3
    wsidg train --mode full
    wsidg eval --split test
    wsidg ablate --seed 1 --out out/seed1
    wsidg sweep-k

Every subcommand writes ``<stage>_config.json`` next to its outputs. The
process exits with status 1 when a stage fails and 0 otherwise.
"""

import argparse
import logging
import os
import sys

from dataclasses import replace

from . import __version__
from .config import ExperimentConfig, dump_config, load_config
from .encoder import StyleExtractor, build_encoder, load_checkpoint
from .evaluation import evaluate_patches, evaluate_wsis, report, write_mask, write_metrics_json
from .exceptions import RejectedInputError, WSIDGError
from .grouping import (
    build_codebook,
    bovw_vectors,
    build_grouping,
    domain_recovery,
    read_grouping,
    write_grouping,
)
from .models import PatchDataset
from .registry import MODE_ORDER, Registry
from .synthesis import generate_cohort, read_cohort, write_cohort
from .tiling import build_dataset
from .trainer import sweep_k, train

logger = logging.getLogger(__name__)


def _prepare_dir(path):
    if not os.path.isdir(path):
        os.makedirs(path)
        logger.info('Created output directory %s', path)
    return path


def _manifest_path(config):
    return os.path.join(config.patches_dir, 'manifest.json')


def load_dataset(config):
    """
    Loads the tiled dataset backed by the in-memory cohort.
    """
    cohort = read_cohort(config.cohort_dir)
    dataset = PatchDataset.load_manifest(_manifest_path(config), wsis=cohort.records)
    return cohort, dataset


def style_extractor(config):
    encoder = build_encoder(config.encoder, seed=config.train.seed)
    return StyleExtractor(encoder, mode=config.grouping.style_mode)


def run_generate(config):
    out_dir = _prepare_dir(config.cohort_dir)
    cohort = generate_cohort(config.n_wsis, config.domain_profiles(), config.per_profile_counts,
                             config.seed, config.cohort)
    path = write_cohort(cohort, out_dir)
    dump_config(config, os.path.join(out_dir, 'generate_config.json'))
    logger.info('Wrote %d WSIs to %s (manifest hash %s)', len(cohort), path, cohort.manifest_hash())
    return cohort


def run_tile(config):
    cohort = read_cohort(config.cohort_dir)
    out_dir = _prepare_dir(config.patches_dir)
    dataset = build_dataset(cohort.records, patch_size=config.tiling.patch_size,
                            stride=config.tiling.stride)
    dataset = dataset.write_patches(os.path.join(out_dir, 'images'))
    dataset.dump_manifest(_manifest_path(config))
    dump_config(config, os.path.join(out_dir, 'tile_config.json'))

    summary = dataset.summary()
    print('{} patches in total ({} tumor, {} non-tumor)'.format(
        summary['total'], summary['tumor'], summary['non_tumor']))
    for split, counts in summary['splits'].items():
        print('{}: {} tumor, {} non-tumor'.format(split, counts['tumor'], counts['non_tumor']))
    return dataset


def run_group(config):
    cohort, dataset = load_dataset(config)
    out_dir = _prepare_dir(config.grouping_dir)
    result = build_grouping(dataset, style_extractor(config), config.grouping)
    write_grouping(result, out_dir)
    dump_config(config, os.path.join(out_dir, 'group_config.json'))

    profiles = cohort.profile_labels()
    if all(profiles.get(wsi_id) is not None for wsi_id in result.assignment.clusters):
        logger.info('Adjusted Rand index against the cohort profiles: %.4f',
                    domain_recovery(result.assignment, profiles))
    return result


def run_train(config, dataset=None):
    if dataset is None:
        _, dataset = load_dataset(config)
    mode = Registry.get(config.train.mode)
    assignment = read_grouping(config.grouping_dir).assignment if mode.uses_grouping else None
    out_dir = _prepare_dir(config.run_dir())
    dump_config(config, os.path.join(out_dir, 'train_config.json'))
    encoder = build_encoder(config.encoder, seed=config.train.seed)
    return train(config.train, dataset, assignment, encoder, out_dir, config.loss)


def run_eval(config, split='val', checkpoint=None):
    cohort, dataset = load_dataset(config)
    checkpoint = checkpoint or os.path.join(config.run_dir(), 'best.pt')
    wsis = cohort.split(split)
    if not wsis or not dataset.filter(split=split):
        raise RejectedInputError('Split {!r} is empty'.format(split))

    out_dir = _prepare_dir(config.eval_dir(config.train.mode, split))
    encoder, _ = load_checkpoint(checkpoint, expected_config=config.encoder)
    patch_report, _ = evaluate_patches(encoder, dataset, split, config.train.eval_batch_size)
    wsi_report = evaluate_wsis(encoder, wsis, config.train.eval_batch_size)

    mask_dir = _prepare_dir(os.path.join(out_dir, 'masks'))
    for wsi_id, predicted in sorted(wsi_report.masks.items()):
        write_mask(predicted.mask, os.path.join(mask_dir, '{}.png'.format(wsi_id)))
    write_metrics_json(patch_report, os.path.join(out_dir, 'metrics.json'),
                       checkpoint=checkpoint, split=split, wsi_views=wsi_report.to_dict())
    dump_config(config, os.path.join(out_dir, 'eval_config.json'))
    logger.info('%s macro-F1 %.4f (precision %.4f, recall %.4f, F1 %.4f)', split,
                patch_report.macro_f1, patch_report.precision, patch_report.recall, patch_report.f1)
    return patch_report


def run_ablate(config, split='test'):
    """
    Generates, tiles and groups the cohort once, then trains and evaluates
    every built-in mode on the same patch manifest.
    """
    out_dir = _prepare_dir(os.path.join(config.out_dir, 'ablation'))
    dump_config(config, os.path.join(out_dir, 'ablate_config.json'))
    run_generate(config)
    run_tile(config)
    run_group(config)
    _, dataset = load_dataset(config)
    manifest_hash = dataset.manifest_hash()

    runs = {}
    for mode in MODE_ORDER:
        mode_config = replace(config, train=replace(config.train, mode=mode))
        logger.info('Training %s on patch manifest %s', mode, manifest_hash)
        result = run_train(mode_config, dataset)
        if dataset.manifest_hash() != manifest_hash:
            raise WSIDGError('Patch manifest changed during the ablation')
        runs[mode] = run_eval(mode_config, split, result.best_checkpoint)

    table, _, _ = report(runs, out_dir)
    print(table.to_string(index=False))
    return table


def run_sweep(config):
    if not Registry.get(config.train.mode).uses_grouping:
        raise RejectedInputError('sweep-k needs a mode that uses pseudo-domains')
    _, dataset = load_dataset(config)
    out_dir = _prepare_dir(os.path.join(config.out_dir, 'sweep'))
    dump_config(config, os.path.join(out_dir, 'sweep_config.json'))

    extractor = style_extractor(config)
    codebook = build_codebook(dataset, extractor, config.grouping)
    vectors, _ = bovw_vectors(dataset, extractor, codebook)
    result = sweep_k(config.train, dataset, config.grouping.k_values, vectors, config.encoder,
                     out_dir, config.loss, grouping_seed=config.grouping.seed)
    print(result.table.to_string(index=False))
    print('best K: {}'.format(result.best_k))
    return result


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', help='experiment config (JSON)')
    common.add_argument('--seed', type=int, help='global seed')
    common.add_argument('--out', help='output directory')
    common.add_argument('--mode', choices=Registry.names(), help='training mode')
    common.add_argument('--set', action='append', default=[], metavar='KEY=VALUE',
                        dest='overrides', help='override a config key, e.g. train.epochs=5')
    common.add_argument('-v', '--verbose', action='store_true', help='debug logging')

    parser = argparse.ArgumentParser(
        prog='wsidg', description='Pseudo-domain contrastive WSI segmentation')
    parser.add_argument('--version', action='version', version=__version__)
    commands = parser.add_subparsers(dest='command', required=True)

    commands.add_parser('generate', parents=[common], help='generate the synthetic cohort')
    commands.add_parser('tile', parents=[common], help='tile the cohort into patches')
    commands.add_parser('group', parents=[common], help='group WSIs into pseudo-domains')
    commands.add_parser('train', parents=[common], help='train an encoder')
    evaluate = commands.add_parser('eval', parents=[common], help='evaluate a checkpoint')
    evaluate.add_argument('--checkpoint', help='defaults to the best checkpoint of --mode')
    evaluate.add_argument('--split', default='val', choices=('train', 'val', 'test'))
    ablate = commands.add_parser('ablate', parents=[common], help='compare all modes')
    ablate.add_argument('--split', default='test', choices=('train', 'val', 'test'))
    commands.add_parser('sweep-k', parents=[common], help='select K on the validation split')
    return parser


def resolve_config(args):
    config = load_config(args.config) if args.config else ExperimentConfig()
    if args.overrides:
        config = config.with_overrides(args.overrides)
    if args.seed is not None:
        config = config.with_seed(args.seed)
    if args.out:
        config = replace(config, out_dir=args.out)
    if args.mode:
        config = replace(config, train=replace(config.train, mode=args.mode))
    return config


def configure_logging(out_dir, verbose=False):
    os.makedirs(out_dir, exist_ok=True)
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format='%(asctime)s %(levelname)s %(name)s: %(message)s',
        handlers=[
            logging.StreamHandler(),
            logging.FileHandler(os.path.join(out_dir, 'wsidg.log')),
        ],
        force=True,
    )


COMMANDS = {
    'generate': lambda config, args: run_generate(config),
    'tile': lambda config, args: run_tile(config),
    'group': lambda config, args: run_group(config),
    'train': lambda config, args: run_train(config),
    'eval': lambda config, args: run_eval(config, args.split, args.checkpoint),
    'ablate': lambda config, args: run_ablate(config, args.split),
    'sweep-k': lambda config, args: run_sweep(config),
}


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        config = resolve_config(args)
        configure_logging(config.out_dir, args.verbose)
        COMMANDS[args.command](config, args)
    except (WSIDGError, OSError) as error:
        logger.error('%s failed: %s', args.command, error)
        return 1
    return 0


if __name__ == '__main__':
    sys.exit(main())
