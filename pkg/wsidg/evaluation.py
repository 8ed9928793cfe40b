"""
Patch classification metrics, WSI mask reconstruction and run reports.

Tumor (label 1) is the positive class. A metric whose denominator is zero
is reported as 0 and its name is added to ``MetricsReport.zero_division``.
"""

import json
import logging
import os

from dataclasses import asdict, dataclass, field

import matplotlib
matplotlib.use('Agg')
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402
import torch  # noqa: E402

from PIL import Image  # noqa: E402

from .encoder import load_checkpoint, to_tensor  # noqa: E402
from .exceptions import CheckpointMismatchError, RejectedInputError  # noqa: E402
from .registry import MODE_ORDER  # noqa: E402
from .tiling import grid_positions  # noqa: E402
from .validators import validate_labels, validate_nonempty, validate_same_length  # noqa: E402

logger = logging.getLogger(__name__)

REPORT_COLUMNS = ('precision', 'recall', 'f1', 'macro_f1')


@dataclass
class ConfusionCounts(object):
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    @property
    def total(self):
        return self.tp + self.fp + self.fn + self.tn

    def swapped(self):
        """
        Counts with non-tumor treated as the positive class.
        """
        return ConfusionCounts(tp=self.tn, fp=self.fn, fn=self.fp, tn=self.tp)


@dataclass
class MetricsReport(object):
    precision: float
    recall: float
    f1: float
    macro_f1: float
    f1_tumor: float
    f1_non_tumor: float
    counts: ConfusionCounts
    zero_division: list = field(default_factory=list)

    def to_dict(self):
        return asdict(self)


def confusion(predictions, truths):
    """
    Tallies a :class:`ConfusionCounts` from two equal-length 0/1 sequences.
    """
    validate_same_length(predictions, truths)
    predictions = np.asarray(predictions, dtype=int)
    truths = np.asarray(truths, dtype=int)
    validate_labels(predictions, 'predictions')
    validate_labels(truths, 'truths')
    return ConfusionCounts(
        tp=int(np.sum((predictions == 1) & (truths == 1))),
        fp=int(np.sum((predictions == 1) & (truths == 0))),
        fn=int(np.sum((predictions == 0) & (truths == 1))),
        tn=int(np.sum((predictions == 0) & (truths == 0))),
    )


def _ratio(numerator, denominator, name, flags):
    if denominator == 0:
        flags.append(name)
        return 0.0
    return numerator / denominator


def _class_scores(counts, suffix, flags):
    precision = _ratio(counts.tp, counts.tp + counts.fp, 'precision' + suffix, flags)
    recall = _ratio(counts.tp, counts.tp + counts.fn, 'recall' + suffix, flags)
    f1 = _ratio(2 * precision * recall, precision + recall, 'f1' + suffix, flags)
    return precision, recall, f1


def metrics(counts):
    """
    Precision, recall and F1 of the tumor class plus macro-F1 over both
    classes.
    """
    if counts.total == 0:
        raise RejectedInputError('Cannot compute metrics from zero evaluated patches')
    flags = []
    precision, recall, f1_tumor = _class_scores(counts, '', flags)
    _, _, f1_non_tumor = _class_scores(counts.swapped(), '_non_tumor', flags)
    return MetricsReport(
        precision=precision,
        recall=recall,
        f1=f1_tumor,
        macro_f1=(f1_tumor + f1_non_tumor) / 2,
        f1_tumor=f1_tumor,
        f1_non_tumor=f1_non_tumor,
        counts=counts,
        zero_division=flags,
    )


def predict_batches(encoder, patches, batch_size=64):
    """
    Argmax class of every patch in the uint8 ``N x H x W x 3`` array.
    """
    was_training = encoder.training
    encoder.eval()
    predictions = []
    with torch.no_grad():
        for start in range(0, len(patches), batch_size):
            _, logits = encoder(to_tensor(patches[start:start + batch_size]))
            predictions.append(logits.argmax(dim=1).numpy())
    encoder.train(was_training)
    if not predictions:
        return np.zeros(0, dtype=int)
    return np.concatenate(predictions)


def evaluate_patches(encoder, dataset, split='val', batch_size=64):
    """
    Metrics over the single-class patches of *split*. Returns
    ``(MetricsReport, predictions)`` with predictions in dataset order.
    """
    records = dataset.filter(split=split)
    if not records:
        raise RejectedInputError('Split {!r} has no patches to evaluate'.format(split))
    predictions = []
    for start in range(0, len(records), batch_size):
        chunk = records[start:start + batch_size]
        images = dataset.load_images([record.patch_id for record in chunk])
        predictions.extend(predict_batches(encoder, images, batch_size))
    report = metrics(confusion(predictions, [record.label for record in records]))
    return report, np.asarray(predictions, dtype=int)


def _resolve_encoder(checkpoint):
    if isinstance(checkpoint, (str, os.PathLike)):
        encoder, _ = load_checkpoint(checkpoint)
        return encoder
    return checkpoint


@dataclass
class PredictedMask(object):
    wsi_id: str
    tiles: np.ndarray
    mask: np.ndarray


def predict_mask(checkpoint, wsi, patch_size=None, batch_size=64):
    """
    Classifies every grid tile of *wsi* (mixed tiles included) and
    upsamples the tile grid to pixel resolution by block replication.
    *checkpoint* is a checkpoint path or a loaded encoder. Pixels beyond the
    last full tile are predicted non-tumor.
    """
    encoder = _resolve_encoder(checkpoint)
    size = encoder.config.input_size
    if patch_size is not None and patch_size != size:
        raise CheckpointMismatchError(
            'Checkpoint expects {0}x{0} patches, got patch_size {1}'.format(size, patch_size)
        )
    if size > min(wsi.height, wsi.width):
        raise RejectedInputError(
            '{} ({}x{}) is smaller than one {}-pixel tile'.format(
                wsi.wsi_id, wsi.height, wsi.width, size)
        )

    positions = list(grid_positions(wsi.height, wsi.width, size, size))
    windows = np.stack([wsi.image[y:y + size, x:x + size] for _, _, y, x in positions])
    predictions = predict_batches(encoder, windows, batch_size)

    tiles = np.zeros((wsi.height // size, wsi.width // size), dtype=np.uint8)
    for (row, col, _, _), label in zip(positions, predictions):
        tiles[row, col] = label
    mask = np.zeros((wsi.height, wsi.width), dtype=np.uint8)
    blocks = np.kron(tiles, np.ones((size, size), dtype=np.uint8))
    mask[:blocks.shape[0], :blocks.shape[1]] = blocks
    return PredictedMask(wsi.wsi_id, tiles, mask)


@dataclass
class WSIEvaluation(object):
    """
    Both evaluation views over a set of WSIs:

    * ``single_class`` - tiles whose mask window is uniform (the training
      patch rule);
    * ``all_tiles`` - every tile, labelled tumor when at least half of its
      mask window is tumor.

    ``pixel_agreement`` is the share of pixels where the reconstructed mask
    equals the ground truth.
    """
    single_class: MetricsReport
    all_tiles: MetricsReport
    pixel_agreement: float
    masks: dict

    def to_dict(self):
        return {
            'single_class': self.single_class.to_dict(),
            'all_tiles': self.all_tiles.to_dict(),
            'pixel_agreement': self.pixel_agreement,
        }


def evaluate_wsis(checkpoint, wsis, batch_size=64):
    validate_nonempty(wsis, 'wsis')
    encoder = _resolve_encoder(checkpoint)
    size = encoder.config.input_size

    single_pred, single_true, all_pred, all_true = [], [], [], []
    agreeing, pixels = 0, 0
    masks = {}
    for wsi in wsis:
        predicted = predict_mask(encoder, wsi, batch_size=batch_size)
        masks[wsi.wsi_id] = predicted
        for row, col, y, x in grid_positions(wsi.height, wsi.width, size, size):
            window = wsi.mask[y:y + size, x:x + size]
            label = int(predicted.tiles[row, col])
            tumor_share = window.mean()
            all_pred.append(label)
            all_true.append(int(tumor_share >= 0.5))
            if tumor_share in (0.0, 1.0):
                single_pred.append(label)
                single_true.append(int(tumor_share))
        agreeing += int(np.sum(predicted.mask == wsi.mask))
        pixels += wsi.mask.size

    if not single_true:
        raise RejectedInputError('The WSIs contain no single-class tile')
    return WSIEvaluation(
        single_class=metrics(confusion(single_pred, single_true)),
        all_tiles=metrics(confusion(all_pred, all_true)),
        pixel_agreement=agreeing / pixels,
        masks=masks,
    )


def write_mask(mask, path):
    Image.fromarray((np.asarray(mask, dtype=np.uint8) * 255)).save(path)


def write_metrics_json(report, path, **extra):
    """
    Dumps *report* (a :class:`MetricsReport` or :class:`WSIEvaluation`)
    plus any *extra* fields to *path*.
    """
    payload = report.to_dict()
    payload.update(extra)
    with open(path, 'w') as handle:
        json.dump(payload, handle, indent=2, sort_keys=True)
    return path


def _ordered_modes(runs):
    known = [mode for mode in MODE_ORDER if mode in runs]
    return known + sorted(mode for mode in runs if mode not in MODE_ORDER)


def report(runs, out_dir, name='comparison'):
    """
    Writes the comparison table of *runs* (``{mode: MetricsReport}``) as
    ``<name>.csv`` and a grouped bar plot as ``<name>.png``. Rows follow
    ``baseline_ce, baseline_ce_supcon, full`` whatever the input order.
    Returns ``(table, csv_path, png_path)``.
    """
    if not runs:
        raise RejectedInputError('report needs at least one run')
    os.makedirs(out_dir, exist_ok=True)

    modes = _ordered_modes(runs)
    table = pd.DataFrame(
        [[round(getattr(runs[mode], column), 4) for column in REPORT_COLUMNS] for mode in modes],
        columns=REPORT_COLUMNS,
    )
    table.insert(0, 'mode', modes)
    csv_path = os.path.join(out_dir, '{}.csv'.format(name))
    table.to_csv(csv_path, index=False, float_format='%.4f')

    figure, axis = plt.subplots(figsize=(7, 4))
    width = 0.8 / len(modes)
    positions = np.arange(len(REPORT_COLUMNS))
    for offset, mode in enumerate(modes):
        axis.bar(positions + offset * width, table.loc[offset, list(REPORT_COLUMNS)], width,
                 label=mode)
    axis.set_xticks(positions + width * (len(modes) - 1) / 2)
    axis.set_xticklabels(['Precision', 'Recall', 'F1', 'Macro-F1'])
    axis.set_ylim(0, 1)
    axis.set_ylabel('Score')
    axis.legend()
    axis.grid(True, axis='y')
    figure.tight_layout()
    png_path = os.path.join(out_dir, '{}.png'.format(name))
    figure.savefig(png_path)
    plt.close(figure)

    logger.info('Comparison table written to %s', csv_path)
    return table, csv_path, png_path
