"""
This module generates synthetic WSIs with ground-truth tumor masks.

A slide is composed in two steps:

1. Non-tumor tissue is drawn over the whole canvas and tumor tissue is
   pasted inside a union of disks (the tumor mask). The two textures differ
   in base color, nucleus density and grain size, so the class signal lives
   in local structure.

2. The slide's :class:`~wsidg.models.DomainParams` are applied to the
   composed image in the fixed order hue -> brightness -> contrast -> noise.
   The shift is uniform across the slide.

Cohorts draw every WSI from one of several domain profiles with a small
jitter, and record the profile index as hidden ground truth.
"""

import hashlib
import json
import logging
import math
import os

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from PIL import Image
from skimage.color import hsv2rgb, rgb2hsv
from skimage.draw import disk
from skimage.filters import gaussian

from .exceptions import MissingArtifactError, RejectedInputError
from .models import DomainParams, SyntheticWSISpec, WSIRecord
from .validators import (
    validate_fraction,
    validate_int,
    validate_nonempty,
    validate_split,
)

logger = logging.getLogger(__name__)

NON_TUMOR_BASE = (0.93, 0.74, 0.82)
NON_TUMOR_NUCLEUS = (0.52, 0.30, 0.58)
TUMOR_BASE = (0.72, 0.50, 0.74)
TUMOR_NUCLEUS = (0.30, 0.14, 0.44)

#: Achieved tumor fractions further than this from the target are reported.
FRACTION_TOLERANCE = 0.05

_GROWTH_FACTOR = 1.03
_MAX_GROWTH_STEPS = 200

DEFAULT_PROFILES = (
    DomainParams(stain_hue_shift=0.0, brightness_scale=1.0, contrast_scale=1.0, noise_sigma=3.0),
    DomainParams(stain_hue_shift=45.0, brightness_scale=0.8, contrast_scale=1.25, noise_sigma=3.0),
    DomainParams(stain_hue_shift=-55.0, brightness_scale=1.12, contrast_scale=0.75, noise_sigma=6.0),
)


def _texture(rng, shape, base, nucleus, grain_sigma, density):
    """
    Flat *base* color with low-amplitude mottling and *nucleus* colored
    specks covering roughly *density* of the area. Larger *grain_sigma*
    yields larger, rounder specks.
    """
    height, width = shape
    field_ = gaussian(rng.random((height, width)), sigma=grain_sigma)
    nuclei = field_ > np.quantile(field_, 1.0 - density)

    mottle = gaussian(rng.standard_normal((height, width)), sigma=2 * grain_sigma)
    mottle /= np.abs(mottle).max() + 1e-12

    image = np.empty((height, width, 3))
    image[:] = base
    image += 0.04 * mottle[..., None]
    image[nuclei] = nucleus
    return gaussian(image, sigma=0.7, channel_axis=-1)


def _tumor_mask(rng, height, width, fraction, n_blobs):
    """
    Union of *n_blobs* disks whose common radius grows until the covered
    fraction reaches *fraction*.
    """
    mask = np.zeros((height, width), dtype=np.uint8)
    if fraction == 0 or n_blobs == 0:
        return mask

    radius = math.sqrt(fraction * height * width / (n_blobs * math.pi))
    margin_y, margin_x = min(radius, height / 2.0), min(radius, width / 2.0)
    centres = [
        (rng.uniform(margin_y, height - margin_y), rng.uniform(margin_x, width - margin_x))
        for _ in range(n_blobs)
    ]

    scale = 1.0
    for _ in range(_MAX_GROWTH_STEPS):
        mask[:] = 0
        for cy, cx in centres:
            rr, cc = disk((cy, cx), radius * scale, shape=(height, width))
            mask[rr, cc] = 1
        if mask.mean() >= fraction:
            break
        scale *= _GROWTH_FACTOR
    return mask


def apply_domain(image, domain, rng):
    """
    Applies *domain* to a float RGB *image* in [0, 1] and returns uint8
    pixels. Order: hue shift, brightness, contrast (around the slide mean),
    additive Gaussian noise.
    """
    hsv = rgb2hsv(np.clip(image, 0.0, 1.0))
    hsv[..., 0] = (hsv[..., 0] + domain.stain_hue_shift / 360.0) % 1.0
    shifted = hsv2rgb(hsv)

    shifted = shifted * domain.brightness_scale
    mean = shifted.mean()
    shifted = (shifted - mean) * domain.contrast_scale + mean
    if domain.noise_sigma > 0:
        shifted = shifted + rng.normal(0.0, domain.noise_sigma / 255.0, size=shifted.shape)

    return np.round(np.clip(shifted, 0.0, 1.0) * 255.0).astype(np.uint8)


def generate_wsi(spec, seed, wsi_id=None, split='train', profile_index=None):
    """
    Generates one :class:`~wsidg.models.WSIRecord` from *spec*. The output
    is a pure function of ``(spec, seed)``.

    If the requested tumor fraction cannot be reached (e.g. a positive
    target with zero blobs) the achieved fraction is recorded and a message
    is added to ``record.warnings``.
    """
    if not isinstance(spec, SyntheticWSISpec):
        raise RejectedInputError('spec must be a SyntheticWSISpec, got {!r}'.format(spec))
    validate_int(seed, 'seed', minimum=0)

    mask_seq, texture_seq, noise_seq = np.random.SeedSequence(
        [seed, spec.domain.texture_seed]).spawn(3)
    height, width = spec.height_px, spec.width_px

    mask = _tumor_mask(np.random.default_rng(mask_seq), height, width,
                       spec.tumor_fraction_target, spec.n_tumor_blobs)

    texture_rng = np.random.default_rng(texture_seq)
    tissue = _texture(texture_rng, (height, width), NON_TUMOR_BASE, NON_TUMOR_NUCLEUS,
                      grain_sigma=1.0, density=0.04)
    tumor = _texture(texture_rng, (height, width), TUMOR_BASE, TUMOR_NUCLEUS,
                     grain_sigma=3.0, density=0.30)
    composed = np.where(mask[..., None] == 1, tumor, tissue)

    image = apply_domain(composed, spec.domain, np.random.default_rng(noise_seq))

    achieved = float(mask.mean())
    warnings = ()
    if abs(achieved - spec.tumor_fraction_target) > FRACTION_TOLERANCE:
        warnings = (
            'tumor fraction {:.4f} unreachable with {} blobs; achieved {:.4f}'.format(
                spec.tumor_fraction_target, spec.n_tumor_blobs, achieved),
        )
        logger.warning('%s: %s', wsi_id or 'wsi', warnings[0])

    return WSIRecord(
        wsi_id=wsi_id or 'wsi_{}'.format(seed),
        image=image,
        mask=mask,
        domain=spec.domain,
        split=split,
        profile_index=profile_index,
        tumor_fraction=achieved,
        warnings=warnings,
    )


@dataclass
class CohortSettings(object):
    """
    Desk-scale cohort layout.

    1. width_px, height_px - slide size, multiples of 256.
    2. tumor_fraction_range - each WSI draws its tumor fraction uniformly
       from this range.
    3. hue_jitter - intra-profile hue jitter in degrees.
    4. scale_jitter - relative intra-profile jitter of brightness and
       contrast.
    5. split_fractions - (train, val, test) fractions applied within each
       profile.
    6. profile_splits - optional per-profile split overriding the fractions,
       e.g. ``[None, None, 'test']`` holds profile 2 out for testing.
    """
    width_px: int = 1024
    height_px: int = 1024
    tumor_fraction_range: tuple = (0.15, 0.35)
    n_tumor_blobs: int = 3
    hue_jitter: float = 5.0
    scale_jitter: float = 0.05
    split_fractions: tuple = (0.7, 0.15, 0.15)
    profile_splits: list = field(default_factory=list)
    workers: int = 1

    def __post_init__(self):
        low, high = self.tumor_fraction_range
        validate_fraction(low, 'tumor_fraction_range[0]')
        validate_fraction(high, 'tumor_fraction_range[1]')
        if low > high:
            raise RejectedInputError('tumor_fraction_range must be increasing')
        if len(self.split_fractions) != 3 or abs(sum(self.split_fractions) - 1.0) > 1e-6:
            raise RejectedInputError(
                'split_fractions must be three fractions summing to 1, got {}'.format(
                    self.split_fractions)
            )
        for split in self.profile_splits:
            if split is not None:
                validate_split(split, 'profile_splits')


class Cohort(object):
    """
    Generated WSIs plus the manifest describing them. Manifest entries carry
    ``wsi_id, image_path, mask_path, profile_index, split, domain_params``;
    paths are relative to the directory the cohort was written to.
    """

    def __init__(self, records, manifest):
        self.records = list(records)
        self.manifest = list(manifest)

    def __len__(self):
        return len(self.records)

    def split(self, name):
        return [record for record in self.records if record.split == name]

    def profile_labels(self):
        return {entry['wsi_id']: entry['profile_index'] for entry in self.manifest}

    def manifest_hash(self):
        payload = json.dumps(self.manifest, sort_keys=True).encode('utf-8')
        return hashlib.sha256(payload).hexdigest()


def _jitter(rng, profile, settings):
    hue = profile.stain_hue_shift + rng.uniform(-settings.hue_jitter, settings.hue_jitter)
    hue = float(np.clip(hue, -180.0, 180.0))
    low, high = 1.0 - settings.scale_jitter, 1.0 + settings.scale_jitter
    return replace(
        profile,
        stain_hue_shift=hue,
        brightness_scale=profile.brightness_scale * rng.uniform(low, high),
        contrast_scale=profile.contrast_scale * rng.uniform(low, high),
        texture_seed=int(rng.integers(0, 2 ** 31 - 1)),
    )


def _assign_splits(rng, count, fractions, pinned):
    if pinned is not None:
        return [pinned] * count
    n_train = int(round(fractions[0] * count))
    n_val = min(count - n_train, int(round(fractions[1] * count)))
    splits = ['train'] * n_train + ['val'] * n_val + ['test'] * (count - n_train - n_val)
    return [splits[i] for i in rng.permutation(count)]


def generate_cohort(n_wsis, domain_profiles, per_profile_counts, seed, settings=None):
    """
    Generates *n_wsis* slides, ``per_profile_counts[p]`` of them from
    ``domain_profiles[p]``, and returns a :class:`Cohort`.
    """
    settings = settings or CohortSettings()
    validate_nonempty(domain_profiles, 'domain_profiles')
    if len(domain_profiles) != len(per_profile_counts):
        raise RejectedInputError(
            'Got {} domain profiles but {} counts'.format(
                len(domain_profiles), len(per_profile_counts))
        )
    for count in per_profile_counts:
        validate_int(count, 'per_profile_counts', minimum=0)
    if sum(per_profile_counts) != n_wsis:
        raise RejectedInputError(
            'per_profile_counts sum to {}, expected n_wsis={}'.format(
                sum(per_profile_counts), n_wsis)
        )
    if settings.profile_splits and len(settings.profile_splits) != len(domain_profiles):
        raise RejectedInputError('profile_splits must have one entry per profile')
    validate_int(seed, 'seed', minimum=0)

    rng = np.random.default_rng(seed)
    jobs = []
    for profile_index, (profile, count) in enumerate(zip(domain_profiles, per_profile_counts)):
        pinned = settings.profile_splits[profile_index] if settings.profile_splits else None
        splits = _assign_splits(rng, count, settings.split_fractions, pinned)
        for split in splits:
            fraction = float(rng.uniform(*settings.tumor_fraction_range))
            spec = SyntheticWSISpec(
                width_px=settings.width_px,
                height_px=settings.height_px,
                tumor_fraction_target=fraction,
                n_tumor_blobs=settings.n_tumor_blobs if fraction > 0 else 0,
                domain=_jitter(rng, profile, settings),
            )
            wsi_id = 'wsi_{:03d}'.format(len(jobs))
            jobs.append((spec, int(rng.integers(0, 2 ** 31 - 1)), wsi_id, split, profile_index))

    def _run(job):
        spec, wsi_seed, wsi_id, split, profile_index = job
        return generate_wsi(spec, wsi_seed, wsi_id=wsi_id, split=split,
                            profile_index=profile_index)

    if settings.workers > 1:
        with ThreadPoolExecutor(max_workers=settings.workers) as pool:
            records = list(pool.map(_run, jobs))
    else:
        records = [_run(job) for job in jobs]

    manifest = [_manifest_entry(record) for record in records]
    return Cohort(records, manifest)


def _manifest_entry(record, image_path='', mask_path=''):
    return {
        'wsi_id': record.wsi_id,
        'image_path': image_path,
        'mask_path': mask_path,
        'profile_index': record.profile_index,
        'split': record.split,
        'domain_params': record.domain.to_dict(),
        'tumor_fraction': record.tumor_fraction,
        'warnings': list(record.warnings),
    }


def write_cohort(cohort, out_dir):
    """
    Writes images and masks as PNG (mask values 0/255) plus
    ``manifest.json`` below *out_dir*. Returns the manifest path.
    """
    for sub in ('images', 'masks'):
        os.makedirs(os.path.join(out_dir, sub), exist_ok=True)

    manifest = []
    for record in cohort.records:
        image_path = os.path.join('images', '{}.png'.format(record.wsi_id))
        mask_path = os.path.join('masks', '{}.png'.format(record.wsi_id))
        Image.fromarray(record.image).save(os.path.join(out_dir, image_path))
        Image.fromarray((record.mask * 255).astype(np.uint8)).save(os.path.join(out_dir, mask_path))
        manifest.append(_manifest_entry(record, image_path, mask_path))

    cohort.manifest = manifest
    path = os.path.join(out_dir, 'manifest.json')
    with open(path, 'w') as handle:
        json.dump(manifest, handle, indent=2, sort_keys=True)
    return path


def read_cohort(out_dir):
    """
    Loads a cohort written by :func:`write_cohort`.
    """
    path = os.path.join(out_dir, 'manifest.json')
    if not os.path.exists(path):
        raise MissingArtifactError('Cohort manifest', path)
    with open(path) as handle:
        manifest = json.load(handle)

    records = []
    for entry in manifest:
        with Image.open(os.path.join(out_dir, entry['image_path'])) as image:
            pixels = np.asarray(image.convert('RGB'))
        with Image.open(os.path.join(out_dir, entry['mask_path'])) as mask:
            labels = (np.asarray(mask.convert('L')) > 127).astype(np.uint8)
        records.append(WSIRecord(
            wsi_id=entry['wsi_id'],
            image=pixels,
            mask=labels,
            domain=DomainParams.from_dict(entry['domain_params']),
            split=entry['split'],
            profile_index=entry['profile_index'],
            tumor_fraction=entry.get('tumor_fraction', float(labels.mean())),
            warnings=tuple(entry.get('warnings', ())),
        ))
    return Cohort(records, manifest)

