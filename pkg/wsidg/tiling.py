"""
WSI tiling.

A WSI is cut into ``patch_size x patch_size`` windows on a grid with the
given stride, visiting rows top to bottom and columns left to right. Only
windows lying fully inside the image are considered. A window becomes a
:class:`~wsidg.models.PatchRecord` only if its mask window is entirely one
class; mixed windows are dropped.
"""

import logging

from dataclasses import dataclass

import numpy as np

from .exceptions import RejectedInputError
from .models import PatchDataset, PatchRecord, make_patch_id
from .validators import validate_int, validate_nonempty, validate_split

logger = logging.getLogger(__name__)


@dataclass
class TilingSettings(object):
    patch_size: int = 256
    stride: int = 256

    def __post_init__(self):
        validate_int(self.patch_size, 'patch_size', minimum=1)
        validate_int(self.stride, 'stride', minimum=1)


def grid_positions(height, width, patch_size, stride):
    """
    Yields ``(row, col, y, x)`` for every in-bounds window, row-major.
    """
    for row, y in enumerate(range(0, height - patch_size + 1, stride)):
        for col, x in enumerate(range(0, width - patch_size + 1, stride)):
            yield row, col, y, x


def window_label(mask_window):
    """
    Returns the class of a uniform mask window, or ``None`` if it is mixed.
    """
    first = mask_window.flat[0]
    if np.all(mask_window == first):
        return int(first)
    return None


def _check_tiling(wsi, patch_size, stride):
    validate_int(patch_size, 'patch_size', minimum=1)
    validate_int(stride, 'stride', minimum=1)
    if patch_size > min(wsi.height, wsi.width):
        raise RejectedInputError(
            'patch_size {} exceeds the dimensions of {} ({}x{})'.format(
                patch_size, wsi.wsi_id, wsi.height, wsi.width)
        )


def tile_wsi(wsi, patch_size=256, stride=256):
    """
    Returns the single-class tiles of *wsi* as a list of
    :class:`~wsidg.models.PatchRecord` objects in row-major order. Each
    tile's label is the uniform value of its mask window.
    """
    _check_tiling(wsi, patch_size, stride)

    records = []
    for row, col, y, x in grid_positions(wsi.height, wsi.width, patch_size, stride):
        label = window_label(wsi.mask[y:y + patch_size, x:x + patch_size])
        if label is None:
            continue
        records.append(PatchRecord(
            patch_id=make_patch_id(wsi.wsi_id, row, col),
            wsi_id=wsi.wsi_id,
            row=row,
            col=col,
            label=label,
            split=wsi.split,
            y=y,
            x=x,
        ))
    return records


def build_dataset(wsis, splits=None, patch_size=256, stride=256):
    """
    Tiles every WSI whose split is in *splits* (all splits when ``None``)
    and returns a :class:`~wsidg.models.PatchDataset`.

    WSIs without a single-class tile stay in the dataset with an empty
    index entry and are reported in ``dataset.summary()['flagged_wsis']``.
    """
    validate_nonempty(wsis, 'wsis')
    if splits is not None:
        splits = (splits,) if isinstance(splits, str) else tuple(splits)
        for split in splits:
            validate_split(split, 'splits')
        wsis = [wsi for wsi in wsis if wsi.split in splits]
        if not wsis:
            raise RejectedInputError('No WSI belongs to splits {}'.format(', '.join(splits)))

    records = []
    for wsi in wsis:
        records.extend(tile_wsi(wsi, patch_size, stride))

    dataset = PatchDataset(
        records,
        {wsi.wsi_id: wsi.split for wsi in wsis},
        wsis=wsis,
        patch_size=patch_size,
        stride=stride,
    )

    summary = dataset.summary()
    logger.info(
        '%d patches in total (%d tumor, %d non-tumor) from %d WSIs',
        summary['total'], summary['tumor'], summary['non_tumor'], summary['n_wsis'],
    )
    for split, counts in summary['splits'].items():
        logger.info('  %s: %d tumor, %d non-tumor', split, counts['tumor'], counts['non_tumor'])
    for wsi_id in summary['flagged_wsis']:
        logger.warning('%s yielded no single-class tile', wsi_id)
    return dataset
