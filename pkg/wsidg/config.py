"""
Experiment configuration.

An :class:`ExperimentConfig` gathers the settings of every stage and is
stored as JSON::

    {
        "seed": 0,
        "out_dir": "out",
        "n_wsis": 12,
        "per_profile_counts": [4, 4, 4],
        "profiles": [{"stain_hue_shift": 0.0, ...}, ...],
        "cohort": {...},    # wsidg.synthesis.CohortSettings
        "tiling": {...},    # wsidg.tiling.TilingSettings
        "encoder": {...},   # wsidg.encoder.EncoderConfig
        "grouping": {...},  # wsidg.grouping.GroupingSettings
        "loss": {...},      # wsidg.losses.LossConfig
        "train": {...}      # wsidg.trainer.TrainConfig
    }

Missing keys take their defaults and unknown keys are rejected. The
defaults describe the desk-scale experiment: profiles 0 and 1 are split
between train and val, profile 2 is held out as the test set. A desk-scale
slide yields a few dozen tiles, so the codebook has 3 words. Contrastive
terms are averaged over anchors and SGD (lr 0.01, momentum 0.9) clips
gradients to norm 1.
"""

import json
import logging
import os

from dataclasses import asdict, dataclass, field, fields, replace

from .encoder import EncoderConfig
from .exceptions import MissingArtifactError, RejectedInputError
from .grouping import GroupingSettings
from .losses import LossConfig
from .models import DomainParams
from .synthesis import DEFAULT_PROFILES, CohortSettings
from .tiling import TilingSettings
from .trainer import TrainConfig
from .validators import validate_int

logger = logging.getLogger(__name__)

SECTIONS = {
    'cohort': CohortSettings,
    'tiling': TilingSettings,
    'encoder': EncoderConfig,
    'grouping': GroupingSettings,
    'loss': LossConfig,
    'train': TrainConfig,
}

DESK_PATCH_SIZE = 128


def _default_cohort():
    return CohortSettings(split_fractions=(0.75, 0.25, 0.0), profile_splits=[None, None, 'test'])


def _default_train():
    return TrainConfig(learning_rate=0.01, momentum=0.9, max_grad_norm=1.0, epochs=20)


@dataclass
class ExperimentConfig(object):
    seed: int = 0
    out_dir: str = 'out'
    n_wsis: int = 12
    per_profile_counts: list = field(default_factory=lambda: [4, 4, 4])
    profiles: list = field(default_factory=lambda: [p.to_dict() for p in DEFAULT_PROFILES])
    cohort: CohortSettings = field(default_factory=_default_cohort)
    tiling: TilingSettings = field(
        default_factory=lambda: TilingSettings(DESK_PATCH_SIZE, DESK_PATCH_SIZE))
    encoder: EncoderConfig = field(
        default_factory=lambda: EncoderConfig(input_size=DESK_PATCH_SIZE))
    grouping: GroupingSettings = field(default_factory=lambda: GroupingSettings(k1=3))
    loss: LossConfig = field(default_factory=lambda: LossConfig(reduction='mean'))
    train: TrainConfig = field(default_factory=_default_train)

    def __post_init__(self):
        validate_int(self.seed, 'seed', minimum=0)
        validate_int(self.n_wsis, 'n_wsis', minimum=1)
        self.domain_profiles()
        if self.tiling.patch_size != self.encoder.input_size:
            raise RejectedInputError(
                'tiling.patch_size ({}) must equal encoder.input_size ({})'.format(
                    self.tiling.patch_size, self.encoder.input_size)
            )

    def domain_profiles(self):
        return [DomainParams.from_dict(profile) for profile in self.profiles]

    @property
    def cohort_dir(self):
        return os.path.join(self.out_dir, 'cohort')

    @property
    def patches_dir(self):
        return os.path.join(self.out_dir, 'patches')

    @property
    def grouping_dir(self):
        return os.path.join(self.out_dir, 'grouping')

    def run_dir(self, mode=None):
        return os.path.join(self.out_dir, 'runs', mode or self.train.mode)

    def eval_dir(self, mode, split):
        return os.path.join(self.out_dir, 'eval', mode, split)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise RejectedInputError('Unknown config keys: {}'.format(', '.join(unknown)))

        default = cls()
        values = {}
        for name in known:
            if name in SECTIONS:
                values[name] = _build_section(name, getattr(default, name), data.get(name, {}))
            else:
                values[name] = data.get(name, getattr(default, name))
        return cls(**values)

    def with_overrides(self, overrides):
        """
        Applies ``key=value`` or ``section.key=value`` strings. Values are
        parsed as JSON and fall back to plain strings.
        """
        data = self.to_dict()
        for override in overrides:
            key, sep, raw = override.partition('=')
            if not sep:
                raise RejectedInputError('Override {!r} is not of the form key=value'.format(override))
            try:
                value = json.loads(raw)
            except ValueError:
                value = raw
            section, _, name = key.strip().rpartition('.')
            target = data
            if section:
                if section not in SECTIONS:
                    raise RejectedInputError('Unknown config section {!r}'.format(section))
                target = data[section]
            if name not in target:
                raise RejectedInputError('Unknown config key {!r}'.format(key))
            target[name] = value
        return type(self).from_dict(data)

    def with_seed(self, seed):
        """
        Sets the global seed and the stage seeds derived from it.
        """
        return replace(
            self,
            seed=seed,
            grouping=replace(self.grouping, seed=seed),
            train=replace(self.train, seed=seed),
        )


def _build_section(name, default, values):
    section_cls = SECTIONS[name]
    if not isinstance(values, dict):
        raise RejectedInputError('Config section {!r} must be an object'.format(name))
    known = {f.name for f in fields(section_cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise RejectedInputError(
            'Unknown keys in config section {!r}: {}'.format(name, ', '.join(unknown))
        )
    merged = asdict(default)
    merged.update(values)
    return section_cls(**merged)


def load_config(path):
    if not os.path.exists(path):
        raise MissingArtifactError('Config file', path)
    with open(path) as handle:
        try:
            data = json.load(handle)
        except ValueError as error:
            raise RejectedInputError('Config {} is not valid JSON: {}'.format(path, error))
    return ExperimentConfig.from_dict(data)


def dump_config(config, path):
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, 'w') as handle:
        json.dump(config.to_dict(), handle, indent=2, sort_keys=True)
    return path
