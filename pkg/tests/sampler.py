import unittest

from collections import Counter

import numpy as np

from wsidg.exceptions import RejectedInputError, SamplingInfeasibleError
from wsidg.grouping import PseudoDomainAssignment
from wsidg.models import PatchDataset
from wsidg.sampler import (
    BatchSpec,
    PairedBatchSampler,
    UniformBatchSampler,
    draw_patches,
    sample_batch,
)
from wsidg.tiling import build_dataset

from .test_settings import PATCH_SIZE, striped_dataset, striped_wsi


class PairedBatchSamplerTests(unittest.TestCase):

    def test_batch_contract(self):
        dataset, assignment = striped_dataset(6, clusters=[0, 0, 1, 1, 2, 2])
        sampler = PairedBatchSampler(dataset, assignment)
        rng = np.random.default_rng(0)
        for _ in range(1000):
            batch = sampler.sample(rng)
            batch.check(32)
            self.assertEqual(len(batch), 128)
            self.assertNotEqual(assignment[batch.wsi_a], assignment[batch.wsi_b])
            self.assertEqual(Counter(batch.labels), {0: 64, 1: 64})
            self.assertEqual(Counter(batch.wsi_ids), {batch.wsi_a: 64, batch.wsi_b: 64})

    def test_cluster_pairs_are_uniform(self):
        dataset, assignment = striped_dataset(6, clusters=[0, 0, 1, 1, 2, 2])
        sampler = PairedBatchSampler(dataset, assignment, patches_per_class=1)
        rng = np.random.default_rng(1)
        pairs = Counter()
        n = 10000
        for _ in range(n):
            batch = sampler.sample(rng)
            pairs[frozenset((batch.cluster_a, batch.cluster_b))] += 1
        self.assertEqual(len(pairs), 3)
        for count in pairs.values():
            self.assertAlmostEqual(count / float(n), 1.0 / 3, delta=0.05)

    def test_only_cross_cluster_pairs(self):
        dataset, assignment = striped_dataset(3, clusters=[0, 0, 1])
        sampler = PairedBatchSampler(dataset, assignment, patches_per_class=2)
        rng = np.random.default_rng(2)
        for _ in range(50):
            batch = sampler.sample(rng)
            self.assertIn('wsi_02', (batch.wsi_a, batch.wsi_b))

    def test_oversamples_small_classes(self):
        dataset, assignment = striped_dataset(2, clusters=[0, 1])
        batch = sample_batch(dataset, assignment, np.random.default_rng(3), patches_per_class=32)
        tumor = batch.patches['wsi_00'][1]
        self.assertEqual(len(tumor), 32)
        self.assertEqual(set(tumor), set(dataset.index['wsi_00'][1]))

    def test_no_repeats_when_enough_patches(self):
        wsis = [striped_wsi('a', size=4 * PATCH_SIZE, tumor_cols=2 * PATCH_SIZE),
                striped_wsi('b', size=4 * PATCH_SIZE, tumor_cols=2 * PATCH_SIZE, seed=1)]
        dataset = build_dataset(wsis, patch_size=PATCH_SIZE, stride=PATCH_SIZE)
        assignment = PseudoDomainAssignment({'a': 0, 'b': 1}, k=2)
        batch = sample_batch(dataset, assignment, np.random.default_rng(4), patches_per_class=8)
        for wsi_id in ('a', 'b'):
            for label in (0, 1):
                self.assertEqual(len(set(batch.patches[wsi_id][label])), 8)

    def test_single_cluster_is_infeasible(self):
        dataset, assignment = striped_dataset(3, clusters=[1, 1, 1])
        with self.assertRaises(SamplingInfeasibleError) as context:
            PairedBatchSampler(dataset, assignment)
        self.assertEqual(context.exception.populations, {0: 0, 1: 3})

    def test_wsis_missing_a_class_are_skipped(self):
        dataset, assignment = striped_dataset(3, clusters=[0, 1, 1])
        records = [r for r in dataset if not (r.wsi_id == 'wsi_00' and r.label == 1)]
        dataset = PatchDataset(records, dataset.wsi_splits, wsis=dataset.wsis.values(),
                               patch_size=PATCH_SIZE, stride=PATCH_SIZE)
        self.assertRaises(SamplingInfeasibleError, PairedBatchSampler, dataset, assignment)

    def test_other_splits_are_ignored(self):
        dataset, assignment = striped_dataset(3, clusters=[0, 1, 1],
                                              splits=['val', 'train', 'train'])
        self.assertRaises(SamplingInfeasibleError, PairedBatchSampler, dataset, assignment)

    def test_intra_cluster_pairing(self):
        dataset, assignment = striped_dataset(5, clusters=[0, 0, 1, 1, 2])
        sampler = PairedBatchSampler(dataset, assignment, patches_per_class=2,
                                     pairing='intra_cluster')
        self.assertEqual(sampler.choices, [0, 1])
        rng = np.random.default_rng(5)
        for _ in range(100):
            batch = sampler.sample(rng)
            batch.check(2, cross_cluster=False)
            self.assertEqual(batch.cluster_a, batch.cluster_b)

    def test_same_seed_same_batches(self):
        dataset, assignment = striped_dataset(4, clusters=[0, 0, 1, 1])
        sampler = PairedBatchSampler(dataset, assignment, patches_per_class=3)
        first = [sampler.sample(np.random.default_rng(6)).to_dict() for _ in range(2)]
        second = [sampler.sample(np.random.default_rng(6)).to_dict() for _ in range(2)]
        self.assertEqual(first, second)

    def test_rejects_bad_arguments(self):
        dataset, assignment = striped_dataset(2, clusters=[0, 1])
        self.assertRaises(RejectedInputError, PairedBatchSampler, dataset, assignment, 0)
        self.assertRaises(RejectedInputError, PairedBatchSampler, dataset, assignment,
                          pairing='random')


class BatchSpecTests(unittest.TestCase):

    def test_check_rejects_same_cluster(self):
        patches = {'a': {0: ['a0'], 1: ['a1']}, 'b': {0: ['b0'], 1: ['b1']}}
        batch = BatchSpec('a', 'b', 0, 0, patches)
        self.assertRaises(RejectedInputError, batch.check, 1)
        batch.check(1, cross_cluster=False)
        self.assertRaises(RejectedInputError, batch.check, 2, cross_cluster=False)

    def test_flat_order(self):
        patches = {'a': {0: ['a0'], 1: ['a1']}, 'b': {0: ['b0'], 1: ['b1']}}
        batch = BatchSpec('a', 'b', 0, 1, patches)
        self.assertEqual(batch.patch_ids, ['a0', 'a1', 'b0', 'b1'])
        self.assertEqual(batch.labels, [0, 1, 0, 1])
        self.assertEqual(batch.wsi_ids, ['a', 'a', 'b', 'b'])


class UniformSamplerTests(unittest.TestCase):

    def test_batch_size(self):
        dataset, _ = striped_dataset(2)
        batch = UniformBatchSampler(dataset, batch_size=16).sample(np.random.default_rng(0))
        self.assertEqual(len(batch), 16)
        self.assertTrue(set(batch.patch_ids) <= {r.patch_id for r in dataset})

    def test_empty_split(self):
        dataset, _ = striped_dataset(2)
        self.assertRaises(SamplingInfeasibleError, UniformBatchSampler, dataset, 4, 'test')

    def test_draw_patches(self):
        rng = np.random.default_rng(0)
        self.assertEqual(sorted(draw_patches(rng, ['a', 'b', 'c'], 3)), ['a', 'b', 'c'])
        self.assertEqual(len(draw_patches(rng, ['a'], 4)), 4)
