"""
Training batch samplers.

:class:`PairedBatchSampler` builds one WSI pair per step. By default the
two WSIs come from different pseudo-domains: an unordered cluster pair is
drawn uniformly, then one eligible WSI from each cluster. With
``pairing='intra_cluster'`` both WSIs come from the same cluster instead.
A WSI is eligible when it has at least one patch of each class.

For every (WSI, class) ``patches_per_class`` patch ids are drawn without
replacement, or with replacement when fewer exist.

:class:`UniformBatchSampler` draws ``batch_size`` training patches
uniformly and never looks at pseudo-domains.
"""

import itertools
import logging

from dataclasses import dataclass, field

from .exceptions import RejectedInputError, SamplingInfeasibleError
from .validators import LABELS, validate_int, validate_split

logger = logging.getLogger(__name__)

PAIRINGS = ('cross_cluster', 'intra_cluster')


@dataclass
class BatchSpec(object):
    """
    One paired batch. ``patches[wsi_id][label]`` is the list of sampled
    patch ids (a multiset when oversampled).
    """
    wsi_a: str
    wsi_b: str
    cluster_a: int
    cluster_b: int
    patches: dict = field(default_factory=dict)

    @property
    def patch_ids(self):
        return [pid for wsi_id in (self.wsi_a, self.wsi_b)
                for label in LABELS for pid in self.patches[wsi_id][label]]

    @property
    def labels(self):
        return [label for wsi_id in (self.wsi_a, self.wsi_b)
                for label in LABELS for _ in self.patches[wsi_id][label]]

    @property
    def wsi_ids(self):
        return [wsi_id for wsi_id in (self.wsi_a, self.wsi_b)
                for label in LABELS for _ in self.patches[wsi_id][label]]

    def __len__(self):
        return len(self.patch_ids)

    def check(self, patches_per_class, cross_cluster=True):
        """
        Raises ``RejectedInputError`` if the batch breaks the pairing rules.
        """
        if self.wsi_a == self.wsi_b:
            raise RejectedInputError('A batch needs two different WSIs')
        if cross_cluster and self.cluster_a == self.cluster_b:
            raise RejectedInputError(
                'WSIs {} and {} share cluster {}'.format(self.wsi_a, self.wsi_b, self.cluster_a)
            )
        for wsi_id in (self.wsi_a, self.wsi_b):
            for label in LABELS:
                if len(self.patches[wsi_id][label]) != patches_per_class:
                    raise RejectedInputError(
                        '{} class {} has {} patches, expected {}'.format(
                            wsi_id, label, len(self.patches[wsi_id][label]), patches_per_class)
                    )

    def to_dict(self):
        return {
            'wsi_a': self.wsi_a,
            'wsi_b': self.wsi_b,
            'cluster_a': self.cluster_a,
            'cluster_b': self.cluster_b,
            'patch_ids': self.patch_ids,
            'labels': self.labels,
        }


@dataclass
class UniformBatch(object):
    patch_ids: list
    labels: list
    wsi_ids: list

    def __len__(self):
        return len(self.patch_ids)

    def to_dict(self):
        return {'patch_ids': self.patch_ids, 'labels': self.labels}


def draw_patches(rng, patch_ids, n):
    """
    *n* ids from *patch_ids*; repeats only when fewer than *n* exist.
    """
    replace = len(patch_ids) < n
    picks = rng.choice(len(patch_ids), size=n, replace=replace)
    return [patch_ids[i] for i in picks]


class PairedBatchSampler(object):

    def __init__(self, dataset, assignment, patches_per_class=32,
                 pairing='cross_cluster', split='train'):
        validate_int(patches_per_class, 'patches_per_class', minimum=1)
        validate_split(split)
        if pairing not in PAIRINGS:
            raise RejectedInputError(
                'pairing must be one of {}, got {!r}'.format(', '.join(PAIRINGS), pairing)
            )
        self.dataset = dataset
        self.patches_per_class = patches_per_class
        self.pairing = pairing

        self.clusters = {cluster: [] for cluster in range(assignment.k)}
        for wsi_id in sorted(assignment.clusters):
            if dataset.wsi_splits.get(wsi_id) != split:
                continue
            classes = dataset.index[wsi_id]
            if all(classes[label] for label in LABELS):
                self.clusters[assignment.clusters[wsi_id]].append(wsi_id)
            else:
                logger.info('%s lacks a class and is left out of pairing', wsi_id)

        populations = {cluster: len(wsis) for cluster, wsis in self.clusters.items()}
        if pairing == 'cross_cluster':
            populated = [cluster for cluster, wsis in self.clusters.items() if wsis]
            self.choices = list(itertools.combinations(populated, 2))
            if not self.choices:
                raise SamplingInfeasibleError(
                    'Cross-cluster pairing needs eligible WSIs in two clusters', populations
                )
        else:
            self.choices = [cluster for cluster, wsis in self.clusters.items() if len(wsis) >= 2]
            if not self.choices:
                raise SamplingInfeasibleError(
                    'Intra-cluster pairing needs a cluster with two eligible WSIs', populations
                )

    def pick_wsis(self, rng):
        if self.pairing == 'cross_cluster':
            cluster_a, cluster_b = self.choices[rng.integers(len(self.choices))]
            wsi_a = self.clusters[cluster_a][rng.integers(len(self.clusters[cluster_a]))]
            wsi_b = self.clusters[cluster_b][rng.integers(len(self.clusters[cluster_b]))]
            return wsi_a, wsi_b, cluster_a, cluster_b

        cluster = self.choices[rng.integers(len(self.choices))]
        first, second = rng.choice(len(self.clusters[cluster]), size=2, replace=False)
        members = self.clusters[cluster]
        return members[first], members[second], cluster, cluster

    def sample(self, rng):
        """
        Draws one :class:`BatchSpec` using the numpy Generator *rng*.
        """
        wsi_a, wsi_b, cluster_a, cluster_b = self.pick_wsis(rng)
        patches = {
            wsi_id: {
                label: draw_patches(rng, self.dataset.index[wsi_id][label], self.patches_per_class)
                for label in LABELS
            }
            for wsi_id in (wsi_a, wsi_b)
        }
        return BatchSpec(wsi_a, wsi_b, int(cluster_a), int(cluster_b), patches)


class UniformBatchSampler(object):

    def __init__(self, dataset, batch_size=128, split='train'):
        validate_int(batch_size, 'batch_size', minimum=1)
        self.batch_size = batch_size
        self.records = dataset.filter(split=split)
        if not self.records:
            raise SamplingInfeasibleError('No {} patches to sample from'.format(split), {})

    def sample(self, rng):
        picks = rng.choice(len(self.records), size=self.batch_size,
                           replace=len(self.records) < self.batch_size)
        records = [self.records[i] for i in picks]
        return UniformBatch(
            [record.patch_id for record in records],
            [record.label for record in records],
            [record.wsi_id for record in records],
        )


def sample_batch(dataset, assignment, rng, patches_per_class=32, pairing='cross_cluster'):
    """
    Draws a single :class:`BatchSpec`; see :class:`PairedBatchSampler`.
    """
    return PairedBatchSampler(dataset, assignment, patches_per_class, pairing).sample(rng)
