import math
import unittest

import numpy as np
import torch
import torch.nn.functional as F

from wsidg.encoder import build_encoder, to_tensor
from wsidg.exceptions import DegeneratePrototypeError, RejectedInputError
from wsidg.losses import (
    LossConfig,
    PairSpec,
    Prototype,
    PrototypeSet,
    class_prototypes,
    patch_level_loss,
    patch_pairs,
    prototype_pairs,
    similarity,
    total_loss,
    wsi_level_loss,
)

from .test_settings import PATCH_SIZE, tiny_encoder_config

LOG_2 = math.log(2.0)


def unit_rows(rng, n, dim):
    rows = rng.normal(size=(n, dim))
    return rows / np.linalg.norm(rows, axis=1, keepdims=True)


def direct_loss(vectors, positives, negatives, temperature):
    """
    Term-by-term scalar evaluation of the contrastive form.
    """
    def s(i, j):
        return math.exp(float(np.dot(vectors[i], vectors[j])) / temperature)

    total = 0.0
    for anchor in range(len(vectors)):
        if not positives[anchor]:
            continue
        negative_sum = sum(s(anchor, n) for n in negatives[anchor])
        term = 0.0
        for p in positives[anchor]:
            term += math.log(s(anchor, p) / (s(anchor, p) + negative_sum))
        total += -term / len(positives[anchor])
    return total


def direct_patch_loss(vectors, labels, temperature):
    n = len(labels)
    positives = [[j for j in range(n) if j != i and labels[j] == labels[i]] for i in range(n)]
    negatives = [[j for j in range(n) if labels[j] != labels[i]] for i in range(n)]
    return direct_loss(vectors, positives, negatives, temperature)


def direct_wsi_loss(vectors, wsi_ids, labels, temperature):
    n = len(labels)
    positives = [[j for j in range(n) if labels[j] == labels[i] and wsi_ids[j] != wsi_ids[i]]
                 for i in range(n)]
    negatives = [[j for j in range(n) if labels[j] != labels[i]] for i in range(n)]
    return direct_loss(vectors, positives, negatives, temperature)


def prototype_set(vectors, wsi_ids, labels):
    return PrototypeSet([
        Prototype(wsi_id, label, torch.as_tensor(vector), 1)
        for wsi_id, label, vector in zip(wsi_ids, labels, vectors)
    ])


class SimilarityTests(unittest.TestCase):

    def test_examples(self):
        v = np.array([0.6, 0.8])
        self.assertAlmostEqual(similarity(v, v, 1.0), math.e)
        self.assertAlmostEqual(similarity(np.array([1.0, 0.0]), np.array([0.0, 1.0]), 0.3), 1.0)
        self.assertAlmostEqual(similarity(v, -v, 0.5), 0.135335, places=6)

    def test_symmetric(self):
        a, b = unit_rows(np.random.default_rng(0), 2, 5)
        self.assertAlmostEqual(similarity(a, b, 0.1), similarity(b, a, 0.1))

    def test_torch_inputs(self):
        v = torch.tensor([1.0, 0.0], dtype=torch.float64)
        self.assertAlmostEqual(float(similarity(v, v, 0.1)), math.exp(10.0))

    def test_rejects_bad_input(self):
        self.assertRaises(RejectedInputError, similarity, np.array([np.nan]), np.array([1.0]), 1.0)
        self.assertRaises(RejectedInputError, similarity, np.array([1.0]), np.array([1.0]), 0.0)


class PrototypeTests(unittest.TestCase):

    def test_single_member(self):
        v = torch.tensor([[0.6, 0.8]], dtype=torch.float64)
        prototypes = class_prototypes(v, [1], ['a'])
        self.assertEqual(len(prototypes), 1)
        self.assertTrue(torch.allclose(prototypes.get('a', 1).vector, v[0]))

    def test_mean_then_renormalize(self):
        v = torch.tensor([[1.0, 0.0], [0.0, 1.0]], dtype=torch.float64)
        prototype = class_prototypes(v, [0, 0], ['a', 'a']).get('a', 0)
        half = math.sqrt(2.0) / 2.0
        self.assertTrue(torch.allclose(prototype.vector, torch.tensor([half, half], dtype=torch.float64)))
        self.assertEqual(prototype.count, 2)

    def test_absent_class_has_no_entry(self):
        v = torch.eye(3, dtype=torch.float64)
        prototypes = class_prototypes(v, [0, 0, 1], ['a', 'a', 'b'])
        self.assertEqual([(p.wsi_id, p.label) for p in prototypes], [('a', 0), ('b', 1)])
        self.assertIsNone(prototypes.get('a', 1))

    def test_member_order_does_not_matter(self):
        v = torch.as_tensor(unit_rows(np.random.default_rng(1), 6, 4))
        labels = [0, 1, 0, 1, 0, 1]
        wsi_ids = ['a', 'a', 'a', 'b', 'b', 'b']
        order = [5, 2, 0, 4, 1, 3]
        first = class_prototypes(v, labels, wsi_ids)
        second = class_prototypes(v[order], [labels[i] for i in order], [wsi_ids[i] for i in order])
        self.assertEqual(first.labels, second.labels)
        self.assertTrue(torch.allclose(first.vectors, second.vectors, atol=1e-12))

    def test_antipodal_members(self):
        v = torch.tensor([[1.0, 0.0], [-1.0, 0.0]], dtype=torch.float64)
        with self.assertRaises(DegeneratePrototypeError) as context:
            class_prototypes(v, [1, 1], ['a', 'a'])
        self.assertEqual((context.exception.wsi_id, context.exception.label), ('a', 1))

    def test_rejects_empty_batch(self):
        self.assertRaises(RejectedInputError, class_prototypes, torch.zeros((0, 2)), [], [])


class PairSpecTests(unittest.TestCase):

    def test_rejects_anchor_in_own_sets(self):
        self.assertRaises(RejectedInputError, PairSpec, [[0]], [[]])
        self.assertRaises(RejectedInputError, PairSpec, [[1], [0]], [[1], []])

    def test_rejects_out_of_range(self):
        spec = PairSpec([[3], []], [[], []])
        self.assertRaises(RejectedInputError, spec.masks, 2)
        self.assertRaises(RejectedInputError, spec.masks, 3)
        embeddings = torch.eye(2)
        self.assertRaises(RejectedInputError, patch_level_loss, embeddings, [0, 0], spec)

    def test_patch_pairs(self):
        spec = patch_pairs([0, 1, 0])
        self.assertEqual(spec.positives, [[2], [], [0]])
        self.assertEqual(spec.negatives, [[1], [0, 2], [1]])

    def test_prototype_pairs_cross_wsi_only(self):
        prototypes = prototype_set(np.eye(4), ['a', 'a', 'b', 'b'], [0, 1, 0, 1])
        spec = prototype_pairs(prototypes)
        self.assertEqual(spec.positives, [[2], [3], [0], [1]])
        self.assertEqual(spec.negatives, [[1, 3], [0, 2], [1, 3], [0, 2]])


class PatchLossTests(unittest.TestCase):

    def test_two_same_class_embeddings(self):
        embeddings = torch.as_tensor(unit_rows(np.random.default_rng(0), 2, 3))
        term = patch_level_loss(embeddings, [1, 1])
        self.assertAlmostEqual(float(term.value), 0.0)
        self.assertEqual(term.empty_positive, 0)

    def test_equal_similarity_gives_log_two(self):
        embeddings = torch.tensor([[1.0, 0.0], [0.0, 1.0], [0.0, -1.0]], dtype=torch.float64)
        spec = PairSpec([[1], [], []], [[2], [], []])
        term = patch_level_loss(embeddings, [0, 0, 1], spec)
        self.assertAlmostEqual(float(term.value), LOG_2)
        self.assertEqual(term.empty_positive, 2)

    def test_matches_direct_sum(self):
        rng = np.random.default_rng(7)
        for _ in range(100):
            n = int(rng.integers(2, 17))
            dim = int(rng.integers(2, 9))
            vectors = unit_rows(rng, n, dim)
            labels = rng.integers(0, 2, size=n).tolist()
            expected = direct_patch_loss(vectors, labels, 0.1)
            actual = float(patch_level_loss(torch.as_tensor(vectors), labels).value)
            self.assertAlmostEqual(actual, expected, delta=1e-6 * max(abs(expected), 1e-12))

    def test_fixed_labels_example(self):
        vectors = unit_rows(np.random.default_rng(11), 6, 4)
        labels = [0, 0, 0, 1, 1, 1]
        expected = direct_patch_loss(vectors, labels, 0.1)
        actual = float(patch_level_loss(torch.as_tensor(vectors), labels).value)
        self.assertAlmostEqual(actual, expected, delta=1e-6 * expected)
        self.assertGreaterEqual(actual, 0.0)

    def test_label_swap(self):
        vectors = torch.as_tensor(unit_rows(np.random.default_rng(2), 8, 4))
        labels = [0, 1, 1, 0, 0, 1, 0, 0]
        swapped = [1 - label for label in labels]
        self.assertAlmostEqual(float(patch_level_loss(vectors, labels).value),
                               float(patch_level_loss(vectors, swapped).value), places=9)

    def test_scale_invariance(self):
        embeddings = torch.as_tensor(np.random.default_rng(3).normal(size=(8, 4)))
        labels = [0, 1] * 4
        base = float(patch_level_loss(embeddings, labels).value)
        self.assertAlmostEqual(float(patch_level_loss(embeddings * 7.5, labels).value), base, places=9)

    def test_order_invariance(self):
        embeddings = torch.as_tensor(unit_rows(np.random.default_rng(4), 8, 4))
        labels = [0, 0, 1, 1, 0, 1, 1, 0]
        order = np.random.default_rng(5).permutation(8).tolist()
        permuted = patch_level_loss(embeddings[order], [labels[i] for i in order])
        self.assertAlmostEqual(float(permuted.value),
                               float(patch_level_loss(embeddings, labels).value), delta=1e-9)

    def test_mean_reduction(self):
        embeddings = torch.as_tensor(unit_rows(np.random.default_rng(6), 6, 3))
        labels = [0, 0, 0, 1, 1, 1]
        summed = float(patch_level_loss(embeddings, labels).value)
        mean = float(patch_level_loss(embeddings, labels, config=LossConfig(reduction='mean')).value)
        self.assertAlmostEqual(mean, summed / 6)


class WSILossTests(unittest.TestCase):

    def test_equal_similarity_gives_log_two(self):
        prototypes = prototype_set(np.array([[1.0, 0.0], [0.0, 1.0], [0.0, -1.0]]),
                                   ['a', 'a', 'b'], [0, 1, 0])
        spec = PairSpec([[1], [], []], [[2], [], []])
        self.assertAlmostEqual(float(wsi_level_loss(prototypes, pair_spec=spec).value), LOG_2)

    def test_no_negatives_gives_zero(self):
        prototypes = prototype_set(unit_rows(np.random.default_rng(0), 2, 3), ['a', 'b'], [1, 1])
        term = wsi_level_loss(prototypes)
        self.assertAlmostEqual(float(term.value), 0.0)
        self.assertEqual(term.empty_positive, 0)

    def test_matches_direct_transcription(self):
        rng = np.random.default_rng(9)
        wsi_ids = ['a', 'a', 'b', 'b']
        labels = [0, 1, 0, 1]
        for _ in range(100):
            vectors = unit_rows(rng, 4, int(rng.integers(2, 9)))
            expected = direct_wsi_loss(vectors, wsi_ids, labels, 0.1)
            actual = float(wsi_level_loss(prototype_set(vectors, wsi_ids, labels)).value)
            self.assertAlmostEqual(actual, expected, delta=1e-6 * max(abs(expected), 1e-12))

    def test_missing_class_counts_empty_anchor(self):
        prototypes = prototype_set(unit_rows(np.random.default_rng(1), 3, 3),
                                   ['a', 'a', 'b'], [0, 1, 0])
        self.assertEqual(wsi_level_loss(prototypes).empty_positive, 1)

    def test_label_swap(self):
        vectors = unit_rows(np.random.default_rng(3), 4, 5)
        wsi_ids = ['a', 'a', 'b', 'b']
        first = wsi_level_loss(prototype_set(vectors, wsi_ids, [0, 1, 0, 1]))
        second = wsi_level_loss(prototype_set(vectors, wsi_ids, [1, 0, 1, 0]))
        self.assertAlmostEqual(float(first.value), float(second.value), places=9)

    def test_rejects_empty_set(self):
        self.assertRaises(RejectedInputError, wsi_level_loss, PrototypeSet([]))

    def test_needs_exactly_two_wsis(self):
        rng = np.random.default_rng(4)
        single = prototype_set(unit_rows(rng, 2, 3), ['a', 'a'], [0, 1])
        self.assertRaises(RejectedInputError, wsi_level_loss, single)
        three = prototype_set(unit_rows(rng, 3, 3), ['a', 'b', 'c'], [0, 0, 1])
        self.assertRaises(RejectedInputError, wsi_level_loss, three)


class TotalLossTests(unittest.TestCase):

    def test_uniform_logits(self):
        breakdown = total_loss(None, None, torch.zeros((4, 2)), [0, 1, 1, 0])
        self.assertAlmostEqual(float(breakdown.ce), LOG_2, places=6)
        self.assertAlmostEqual(float(breakdown.total), LOG_2, places=6)

    def test_ce_only_weights(self):
        logits = torch.tensor([[2.0, -1.0], [0.5, 0.3]])
        config = LossConfig(weights=(0, 0, 1))
        breakdown = total_loss(torch.tensor(3.0), torch.tensor(5.0), logits, [0, 1], config)
        self.assertEqual(float(breakdown.total), float(breakdown.ce))
        self.assertEqual(breakdown.as_row()['L_w'], 3.0)

    def test_weighted_sum(self):
        logits = torch.zeros((2, 2))
        breakdown = total_loss(torch.tensor(1.0), torch.tensor(2.0), logits, [0, 1],
                               LossConfig(weights=(2, 3, 1)))
        self.assertAlmostEqual(float(breakdown.total), 2.0 + 6.0 + LOG_2, places=6)

    def test_rejects_mismatched_logits(self):
        self.assertRaises(RejectedInputError, total_loss, None, None, torch.zeros((3, 2)), [0, 1])
        self.assertRaises(RejectedInputError, total_loss, None, None, torch.zeros((2, 3)), [0, 1])

    def test_bad_config(self):
        self.assertRaises(RejectedInputError, LossConfig, temperature_patch=0)
        self.assertRaises(RejectedInputError, LossConfig, weights=(1, 1))
        self.assertRaises(RejectedInputError, LossConfig, reduction='max')


class GradientTests(unittest.TestCase):
    """
    Central finite differences of L_w + L_p + L_c through a tiny encoder.
    """

    def combined(self, encoder, images, labels, wsi_ids):
        embeddings, logits = encoder(images)
        l_p = patch_level_loss(embeddings, labels)
        prototypes = class_prototypes(F.normalize(embeddings, dim=1), labels, wsi_ids)
        l_w = wsi_level_loss(prototypes)
        return total_loss(l_w, l_p, logits, labels).total

    def test_matches_finite_differences(self):
        rng = np.random.default_rng(0)
        encoder = build_encoder(tiny_encoder_config(), seed=0).double()
        parameters = list(encoder.parameters())
        eps = 1e-6

        for _ in range(5):
            pixels = rng.integers(0, 256, size=(8, PATCH_SIZE, PATCH_SIZE, 3), dtype=np.uint8)
            images = to_tensor(pixels).double()
            labels = [0, 0, 1, 1, 0, 0, 1, 1]
            wsi_ids = ['a'] * 4 + ['b'] * 4

            encoder.zero_grad()
            self.combined(encoder, images, labels, wsi_ids).backward()

            for _ in range(10):
                parameter = parameters[int(rng.integers(len(parameters)))]
                flat = parameter.data.view(-1)
                index = int(rng.integers(flat.numel()))
                analytic = float(parameter.grad.view(-1)[index])

                original = float(flat[index])
                with torch.no_grad():
                    flat[index] = original + eps
                    upper = float(self.combined(encoder, images, labels, wsi_ids))
                    flat[index] = original - eps
                    lower = float(self.combined(encoder, images, labels, wsi_ids))
                    flat[index] = original
                numeric = (upper - lower) / (2 * eps)

                tolerance = 1e-3 * max(abs(analytic), abs(numeric)) + 1e-7
                self.assertLessEqual(abs(analytic - numeric), tolerance)
