import json
import os
import tempfile
import unittest

from collections import Counter

import numpy as np
import pandas as pd

from wsidg.cli import run_train
from wsidg.encoder import build_encoder, save_checkpoint
from wsidg.evaluation import (
    ConfusionCounts,
    confusion,
    evaluate_patches,
    evaluate_wsis,
    metrics,
    predict_mask,
    report,
    write_mask,
    write_metrics_json,
)
from wsidg.exceptions import CheckpointMismatchError, RejectedInputError
from wsidg.synthesis import read_cohort

from .test_settings import (
    PATCH_SIZE,
    SLOW,
    desk_experiment,
    striped_dataset,
    striped_wsi,
    tiny_encoder_config,
)


class MetricsTests(unittest.TestCase):

    def test_worked_example(self):
        result = metrics(ConfusionCounts(tp=3, fp=1, fn=2, tn=4))
        self.assertAlmostEqual(result.precision, 0.75, places=6)
        self.assertAlmostEqual(result.recall, 0.6, places=6)
        self.assertAlmostEqual(result.f1, 0.666667, places=6)
        self.assertAlmostEqual(result.f1_non_tumor, 0.727273, places=6)
        self.assertAlmostEqual(result.macro_f1, 0.696970, places=6)
        self.assertEqual(result.zero_division, [])

    def test_perfect_predictions(self):
        truths = [0, 1, 1, 0, 1]
        result = metrics(confusion(truths, truths))
        self.assertEqual((result.precision, result.recall, result.f1, result.macro_f1),
                         (1.0, 1.0, 1.0, 1.0))

    def test_no_tumor_anywhere(self):
        result = metrics(confusion([0, 0, 0], [0, 0, 0]))
        self.assertEqual(result.precision, 0.0)
        self.assertEqual(result.f1, 0.0)
        self.assertEqual(result.f1_non_tumor, 1.0)
        self.assertEqual(result.macro_f1, 0.5)
        self.assertEqual(result.zero_division, ['precision', 'recall', 'f1'])

    def test_recount_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            n = int(rng.integers(1, 200))
            predictions = rng.integers(0, 2, size=n).tolist()
            truths = rng.integers(0, 2, size=n).tolist()
            pairs = Counter(zip(predictions, truths))
            counts = confusion(predictions, truths)
            self.assertEqual((counts.tp, counts.fp, counts.fn, counts.tn),
                             (pairs[(1, 1)], pairs[(1, 0)], pairs[(0, 1)], pairs[(0, 0)]))

            result = metrics(counts)
            tp, fp, fn, tn = pairs[(1, 1)], pairs[(1, 0)], pairs[(0, 1)], pairs[(0, 0)]
            f1_tumor = 2.0 * tp / (2 * tp + fp + fn) if tp else 0.0
            f1_non_tumor = 2.0 * tn / (2 * tn + fp + fn) if tn else 0.0
            self.assertAlmostEqual(result.f1, f1_tumor, places=9)
            self.assertAlmostEqual(result.macro_f1, (f1_tumor + f1_non_tumor) / 2, places=9)

    def test_rejects_bad_input(self):
        self.assertRaises(RejectedInputError, confusion, [0, 1], [1])
        self.assertRaises(RejectedInputError, confusion, [2], [1])
        self.assertRaises(RejectedInputError, metrics, ConfusionCounts())


class PredictionTests(unittest.TestCase):

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.encoder = build_encoder(tiny_encoder_config(), seed=0)

    def tearDown(self):
        self.tmp.cleanup()

    def test_evaluate_patches(self):
        dataset, _ = striped_dataset(3, splits=['train', 'val', 'val'])
        first, predictions = evaluate_patches(self.encoder, dataset, 'val', batch_size=3)
        second, _ = evaluate_patches(self.encoder, dataset, 'val', batch_size=8)
        self.assertEqual(len(predictions), 8)
        self.assertEqual(first.counts.total, 8)
        self.assertEqual(first, second)
        self.assertTrue(0.0 <= first.macro_f1 <= 1.0)
        self.assertRaises(RejectedInputError, evaluate_patches, self.encoder, dataset, 'test')

    def test_mask_is_block_replicated(self):
        wsi = striped_wsi('slide', size=3 * PATCH_SIZE)
        predicted = predict_mask(self.encoder, wsi)
        self.assertEqual(predicted.tiles.shape, (3, 3))
        self.assertEqual(predicted.mask.shape, (3 * PATCH_SIZE, 3 * PATCH_SIZE))
        for row in range(3):
            for col in range(3):
                block = predicted.mask[row * PATCH_SIZE:(row + 1) * PATCH_SIZE,
                                       col * PATCH_SIZE:(col + 1) * PATCH_SIZE]
                self.assertTrue(np.all(block == predicted.tiles[row, col]))

    def test_mask_from_checkpoint_path(self):
        path = save_checkpoint(os.path.join(self.tmp.name, 'best.pt'), self.encoder)
        wsi = striped_wsi('slide')
        from_path = predict_mask(path, wsi, patch_size=PATCH_SIZE)
        from_encoder = predict_mask(self.encoder, wsi)
        self.assertTrue(np.array_equal(from_path.mask, from_encoder.mask))

    def test_patch_size_mismatch(self):
        self.assertRaises(CheckpointMismatchError, predict_mask, self.encoder,
                          striped_wsi('slide'), patch_size=2 * PATCH_SIZE)
        self.assertRaises(RejectedInputError, predict_mask, self.encoder,
                          striped_wsi('tiny', size=PATCH_SIZE // 2, tumor_cols=0))

    def test_two_views(self):
        wsis = [striped_wsi('a', tumor_cols=PATCH_SIZE + PATCH_SIZE // 2),
                striped_wsi('b', tumor_cols=PATCH_SIZE + PATCH_SIZE // 2, seed=1)]
        result = evaluate_wsis(self.encoder, wsis)
        self.assertEqual(result.single_class.counts.total, 4)
        self.assertEqual(result.all_tiles.counts.total, 8)
        all_counts = result.all_tiles.counts
        self.assertEqual(all_counts.tp + all_counts.fn, 8)
        self.assertEqual(sorted(result.masks), ['a', 'b'])
        self.assertTrue(0.0 <= result.pixel_agreement <= 1.0)

    def test_write_outputs(self):
        path = os.path.join(self.tmp.name, 'mask.png')
        write_mask(np.eye(4, dtype=np.uint8), path)
        self.assertTrue(os.path.exists(path))

        json_path = os.path.join(self.tmp.name, 'metrics.json')
        write_metrics_json(metrics(ConfusionCounts(1, 1, 1, 1)), json_path, split='val')
        with open(json_path) as handle:
            payload = json.load(handle)
        self.assertEqual(payload['split'], 'val')
        self.assertEqual(payload['counts'], {'tp': 1, 'fp': 1, 'fn': 1, 'tn': 1})


class ReportTests(unittest.TestCase):

    def test_rows_follow_mode_order(self):
        runs = {
            'full': metrics(ConfusionCounts(3, 1, 2, 4)),
            'baseline_ce': metrics(ConfusionCounts(2, 2, 3, 3)),
            'baseline_ce_supcon': metrics(ConfusionCounts(1, 1, 1, 1)),
        }
        with tempfile.TemporaryDirectory() as out_dir:
            table, csv_path, png_path = report(runs, out_dir)
            self.assertEqual(table['mode'].tolist(), ['baseline_ce', 'baseline_ce_supcon', 'full'])
            self.assertTrue(os.path.exists(png_path))

            with open(csv_path) as handle:
                lines = handle.read().splitlines()
            self.assertEqual(lines[0], 'mode,precision,recall,f1,macro_f1')
            self.assertEqual(lines[3], 'full,0.7500,0.6000,0.6667,0.6970')
            self.assertEqual(len(pd.read_csv(csv_path)), 3)

    def test_unknown_modes_go_last(self):
        runs = {'zeta': metrics(ConfusionCounts(1, 0, 0, 1)),
                'full': metrics(ConfusionCounts(1, 0, 0, 1))}
        with tempfile.TemporaryDirectory() as out_dir:
            table, _, _ = report(runs, out_dir, name='extra')
            self.assertEqual(table['mode'].tolist(), ['full', 'zeta'])

    def test_rejects_no_runs(self):
        with tempfile.TemporaryDirectory() as out_dir:
            self.assertRaises(RejectedInputError, report, {}, out_dir)


@unittest.skipUnless(SLOW, 'set WSIDG_SLOW=1 to train on the desk-scale experiment')
class TrainedMaskTests(unittest.TestCase):

    def test_training_improves_pixel_agreement(self):
        with tempfile.TemporaryDirectory() as tmp:
            config = desk_experiment(tmp)
            result = run_train(config)
            wsis = read_cohort(config.cohort_dir).split('val')
            untrained_path = os.path.join(config.run_dir(), 'epoch_000.pt')
            untrained = evaluate_wsis(untrained_path, wsis, config.train.eval_batch_size)
            trained = evaluate_wsis(result.best_checkpoint, wsis, config.train.eval_batch_size)

        self.assertGreater(trained.pixel_agreement, untrained.pixel_agreement)
        self.assertTrue(any(
            not np.array_equal(trained.masks[wsi_id].mask, untrained.masks[wsi_id].mask)
            for wsi_id in trained.masks
        ))
