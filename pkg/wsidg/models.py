"""
This module defines the records shared by every pipeline stage:
    * :class:`DomainParams`
    * :class:`SyntheticWSISpec`
    * :class:`WSIRecord`
    * :class:`PatchRecord`

Along with the :class:`PatchDataset` container, which keeps a per-WSI,
per-class index of patch ids next to the flat record list.
"""

import hashlib
import json
import logging
import os

from dataclasses import asdict, dataclass, field, replace

import numpy as np

from PIL import Image

from .exceptions import MissingArtifactError, RejectedInputError
from .validators import (
    LABELS,
    validate_fraction,
    validate_grid_dimension,
    validate_int,
    validate_label,
    validate_nonnegative,
    validate_positive,
    validate_split,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class DomainParams(object):
    """
    WSI-level appearance factors. One instance is applied uniformly to a
    whole slide, never per patch.

    *stain_hue_shift* is in degrees, *brightness_scale* and
    *contrast_scale* are multiplicative, *noise_sigma* is the standard
    deviation of additive Gaussian noise in 0-255 pixel units and
    *texture_seed* drives the procedural tissue texture.
    """
    stain_hue_shift: float = 0.0
    brightness_scale: float = 1.0
    contrast_scale: float = 1.0
    noise_sigma: float = 0.0
    texture_seed: int = 0

    def __post_init__(self):
        validate_nonnegative(abs(self.stain_hue_shift), 'stain_hue_shift')
        if abs(self.stain_hue_shift) > 180:
            raise RejectedInputError(
                'stain_hue_shift must lie in [-180, 180], got {}'.format(self.stain_hue_shift)
            )
        validate_positive(self.brightness_scale, 'brightness_scale')
        validate_positive(self.contrast_scale, 'contrast_scale')
        validate_nonnegative(self.noise_sigma, 'noise_sigma')
        validate_int(self.texture_seed, 'texture_seed', minimum=0)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        return cls(**data)


@dataclass(frozen=True)
class SyntheticWSISpec(object):
    width_px: int = 1024
    height_px: int = 1024
    tumor_fraction_target: float = 0.25
    n_tumor_blobs: int = 3
    domain: DomainParams = field(default_factory=DomainParams)

    def __post_init__(self):
        validate_grid_dimension(self.width_px, 'width_px')
        validate_grid_dimension(self.height_px, 'height_px')
        validate_fraction(self.tumor_fraction_target, 'tumor_fraction_target')
        validate_int(self.n_tumor_blobs, 'n_tumor_blobs', minimum=0)
        if self.tumor_fraction_target == 0 and self.n_tumor_blobs != 0:
            raise RejectedInputError(
                'n_tumor_blobs must be 0 when tumor_fraction_target is 0'
            )


@dataclass
class WSIRecord(object):
    """
    One synthetic slide. *mask* holds 1 for tumor and 0 for non-tumor
    pixels and has the spatial shape of *image*.

    *profile_index* is the hidden domain profile the slide was drawn from
    (``None`` when generated on its own); *tumor_fraction* is the achieved
    mask fraction and *warnings* lists generation diagnostics.
    """
    wsi_id: str
    image: np.ndarray
    mask: np.ndarray
    domain: DomainParams
    split: str = 'train'
    profile_index: int = None
    tumor_fraction: float = 0.0
    warnings: tuple = ()

    def __post_init__(self):
        validate_split(self.split)
        if self.image.ndim != 3 or self.image.shape[2] != 3:
            raise RejectedInputError(
                'image of {} must be H x W x 3, got {}'.format(self.wsi_id, self.image.shape)
            )
        if self.mask.shape != self.image.shape[:2]:
            raise RejectedInputError(
                'mask of {} has shape {}, image has {}'.format(
                    self.wsi_id, self.mask.shape, self.image.shape[:2])
            )
        if not np.isin(self.mask, LABELS).all():
            raise RejectedInputError('mask of {} must only contain 0 and 1'.format(self.wsi_id))

    @property
    def height(self):
        return self.image.shape[0]

    @property
    def width(self):
        return self.image.shape[1]


@dataclass(frozen=True)
class PatchRecord(object):
    """
    One single-class tile. *row* and *col* are tile indices on the tiling
    grid, *y* and *x* the pixel offset of the tile's top-left corner.
    """
    patch_id: str
    wsi_id: str
    row: int
    col: int
    label: int
    split: str = 'train'
    y: int = 0
    x: int = 0
    image_path: str = ''

    def __post_init__(self):
        validate_label(self.label)
        validate_int(self.row, 'row', minimum=0)
        validate_int(self.col, 'col', minimum=0)

    def to_dict(self):
        return asdict(self)


def make_patch_id(wsi_id, row, col):
    return '{}_r{:03d}_c{:03d}'.format(wsi_id, row, col)


class PatchDataset(object):
    """
    The patch set D. Holds the flat list of :class:`PatchRecord` objects and
    an index mapping ``wsi_id -> {label -> [patch_id, ...]}``.

    Every WSI that was tiled appears in the index, including WSIs that
    yielded no single-class tile (those are listed in *flagged*).

    Pixels are looked up either from the in-memory *wsis* the dataset was
    built from, or from each record's ``image_path``.
    """

    def __init__(self, records, wsi_splits, wsis=None, patch_size=256, stride=256):
        self.records = list(records)
        self.wsi_splits = dict(wsi_splits)
        self.wsis = {wsi.wsi_id: wsi for wsi in (wsis or ())}
        self.patch_size = patch_size
        self.stride = stride
        self._by_id = {}
        self._cache = {}

        seen = set()
        for record in self.records:
            key = (record.wsi_id, record.row, record.col)
            if key in seen:
                raise RejectedInputError('Duplicate tile {} in dataset'.format(key))
            if record.wsi_id not in self.wsi_splits:
                raise RejectedInputError(
                    'Patch {} refers to unknown WSI {}'.format(record.patch_id, record.wsi_id)
                )
            seen.add(key)
            self._by_id[record.patch_id] = record

        self.index = self.rebuild_index()

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def __getitem__(self, patch_id):
        return self._by_id[patch_id]

    @property
    def flagged(self):
        """
        WSIs that contributed no single-class tile.
        """
        return sorted(
            wsi_id for wsi_id, classes in self.index.items()
            if not any(classes[label] for label in LABELS)
        )

    def rebuild_index(self):
        """
        Recomputes the per-WSI per-class index from :attr:`records`.
        """
        index = {wsi_id: {label: [] for label in LABELS} for wsi_id in sorted(self.wsi_splits)}
        for record in self.records:
            index[record.wsi_id][record.label].append(record.patch_id)
        return index

    def check_index(self):
        return self.rebuild_index() == self.index

    def wsi_ids(self, split=None):
        return sorted(
            wsi_id for wsi_id, wsi_split in self.wsi_splits.items()
            if split is None or wsi_split == split
        )

    def filter(self, split=None, label=None, wsi_ids=None):
        """
        Returns the records matching every given criterion, in dataset order::

            dataset.filter(split='train', label=0)
        """
        if wsi_ids is not None:
            wsi_ids = set(wsi_ids)
        return [
            record for record in self.records
            if (split is None or record.split == split)
            and (label is None or record.label == label)
            and (wsi_ids is None or record.wsi_id in wsi_ids)
        ]

    def summary(self):
        """
        Per-split per-class counts plus totals and flagged WSIs.
        """
        splits = {}
        for record in self.records:
            counts = splits.setdefault(record.split, {'tumor': 0, 'non_tumor': 0})
            counts['tumor' if record.label == 1 else 'non_tumor'] += 1
        tumor = sum(counts['tumor'] for counts in splits.values())
        return {
            'total': len(self.records),
            'tumor': tumor,
            'non_tumor': len(self.records) - tumor,
            'splits': {split: splits[split] for split in sorted(splits)},
            'n_wsis': len(self.wsi_splits),
            'flagged_wsis': self.flagged,
        }

    def load_image(self, record):
        """
        Returns the ``patch_size x patch_size x 3`` uint8 pixels of *record*.
        """
        wsi = self.wsis.get(record.wsi_id)
        if wsi is not None:
            return wsi.image[record.y:record.y + self.patch_size,
                             record.x:record.x + self.patch_size]

        if record.patch_id not in self._cache:
            if not record.image_path or not os.path.exists(record.image_path):
                raise MissingArtifactError('Patch image', record.image_path or record.patch_id)
            with Image.open(record.image_path) as image:
                self._cache[record.patch_id] = np.asarray(image.convert('RGB'))
        return self._cache[record.patch_id]

    def load_images(self, patch_ids):
        return np.stack([self.load_image(self._by_id[pid]) for pid in patch_ids])

    def write_patches(self, out_dir):
        """
        Writes every patch as a PNG below *out_dir* and returns a new dataset
        whose records carry the written ``image_path``.
        """
        os.makedirs(out_dir, exist_ok=True)
        records = []
        for record in self.records:
            path = os.path.join(out_dir, '{}.png'.format(record.patch_id))
            Image.fromarray(np.ascontiguousarray(self.load_image(record))).save(path)
            records.append(replace(record, image_path=path))
        return PatchDataset(records, self.wsi_splits, self.wsis.values(),
                            self.patch_size, self.stride)

    def to_manifest(self):
        return {
            'patch_size': self.patch_size,
            'stride': self.stride,
            'wsis': {wsi_id: self.wsi_splits[wsi_id] for wsi_id in sorted(self.wsi_splits)},
            'records': [record.to_dict() for record in self.records],
        }

    def manifest_hash(self):
        """
        SHA-256 of the canonical manifest, ignoring where patches live on disk.
        """
        manifest = self.to_manifest()
        for record in manifest['records']:
            record.pop('image_path')
        payload = json.dumps(manifest, sort_keys=True).encode('utf-8')
        return hashlib.sha256(payload).hexdigest()

    def dump_manifest(self, path):
        with open(path, 'w') as handle:
            json.dump(self.to_manifest(), handle, indent=2, sort_keys=True)

    @classmethod
    def load_manifest(cls, path, wsis=None):
        if not os.path.exists(path):
            raise MissingArtifactError('Patch manifest', path)
        with open(path) as handle:
            manifest = json.load(handle)
        records = [PatchRecord(**data) for data in manifest['records']]
        return cls(records, manifest['wsis'], wsis,
                   manifest['patch_size'], manifest['stride'])
