"""
Optimization loop and K sweep.

Every step draws one batch from the mode's sampler, embeds it, evaluates the
mode's loss terms and applies one SGD update. After each epoch (and once
before training, as epoch 0) the encoder is scored on the validation split;
the checkpoint with the highest validation macro-F1 is copied to
``best.pt``.

Files written to ``out_dir``:

* ``metrics.csv`` - one row per step: step, epoch, L_w, L_p, L_c, total,
  empty_pos;
* ``epochs.csv`` - validation metrics per epoch;
* ``epoch_NNN.pt`` and ``best.pt`` - checkpoints;
* ``replay_step_NNNNNN.json`` - the offending batch when a loss is not
  finite.
"""

import json
import logging
import math
import os
import shutil

from dataclasses import asdict, dataclass, field, replace

import numpy as np
import pandas as pd
import torch

from .encoder import build_encoder, save_checkpoint, to_tensor
from .evaluation import evaluate_patches
from .exceptions import (
    DegeneratePrototypeError,
    NonFiniteLossError,
    RejectedInputError,
    SamplingInfeasibleError,
)
from .grouping import cluster_wsis
from .losses import (
    LossBreakdown,
    LossConfig,
    class_prototypes,
    patch_level_loss,
    total_loss,
    wsi_level_loss,
)
from .registry import Registry
from .sampler import PAIRINGS, PairedBatchSampler, UniformBatchSampler
from .validators import validate_int, validate_positive, validate_split

logger = logging.getLogger(__name__)

METRICS_COLUMNS = ('step', 'epoch', 'L_w', 'L_p', 'L_c', 'total', 'empty_pos')
EPOCH_COLUMNS = ('epoch', 'precision', 'recall', 'f1', 'macro_f1', 'checkpoint')


@dataclass
class TrainConfig(object):
    """
    1. learning_rate - SGD step size.
    2. momentum - SGD momentum (0 is plain SGD).
    3. epochs - number of training epochs.
    4. steps_per_epoch - optimizer steps per epoch; ``None`` means half the
       number of training WSIs, rounded up.
    5. seed - seeds batch sampling and encoder initialization.
    6. mode - name of a registered :class:`~wsidg.registry.TrainingMode`.
    7. patches_per_class - patches per (WSI, class) in paired batches.
    8. batch_size - patches per uniform batch.
    9. pairing - ``cross_cluster`` or ``intra_cluster``.
    10. eval_batch_size - inference batch size during validation.
    11. validation_split - split used for model selection.
    12. max_grad_norm - clip the global gradient norm to this value before
        each update; ``None`` leaves gradients untouched.
    """
    learning_rate: float = 1e-5
    momentum: float = 0.0
    epochs: int = 20
    steps_per_epoch: int = None
    seed: int = 0
    mode: str = 'full'
    patches_per_class: int = 32
    batch_size: int = 128
    pairing: str = 'cross_cluster'
    eval_batch_size: int = 64
    validation_split: str = 'val'
    max_grad_norm: float = None

    def __post_init__(self):
        validate_positive(self.learning_rate, 'learning_rate')
        if not 0 <= self.momentum < 1:
            raise RejectedInputError('momentum must lie in [0, 1), got {}'.format(self.momentum))
        validate_int(self.epochs, 'epochs', minimum=1)
        if self.steps_per_epoch is not None:
            validate_int(self.steps_per_epoch, 'steps_per_epoch', minimum=1)
        validate_int(self.seed, 'seed', minimum=0)
        Registry.get(self.mode)
        validate_int(self.patches_per_class, 'patches_per_class', minimum=1)
        validate_int(self.batch_size, 'batch_size', minimum=1)
        validate_int(self.eval_batch_size, 'eval_batch_size', minimum=1)
        if self.pairing not in PAIRINGS:
            raise RejectedInputError(
                'pairing must be one of {}, got {!r}'.format(', '.join(PAIRINGS), self.pairing)
            )
        validate_split(self.validation_split, 'validation_split')
        if self.max_grad_norm is not None:
            validate_positive(self.max_grad_norm, 'max_grad_norm')


@dataclass
class TrainResult(object):
    best_epoch: int
    best_macro_f1: float
    best_checkpoint: str
    epochs: list = field(default_factory=list)
    metrics_path: str = ''
    epochs_path: str = ''


class Trainer(object):
    """
    Trains *encoder* in place on the training split of *dataset*.

    The mode's weights mask the terms of *loss_config*: a term whose mode
    weight is 0 is never computed, the others are scaled by the
    configured weight. Modes with ``uses_grouping = False`` ignore
    *assignment* entirely.
    """

    def __init__(self, config, dataset, encoder, out_dir, assignment=None, loss_config=None):
        self.config = config
        self.dataset = dataset
        self.encoder = encoder
        self.out_dir = out_dir
        self.mode = Registry.get(config.mode)

        loss_config = loss_config or LossConfig()
        self.loss_config = replace(loss_config, weights=tuple(
            m * w for m, w in zip(self.mode.weights, loss_config.weights)))

        if self.mode.uses_grouping:
            if assignment is None or not assignment.clusters:
                raise RejectedInputError(
                    'Mode {!r} needs a pseudo-domain assignment'.format(config.mode)
                )
            self.assignment = assignment
        else:
            self.assignment = None

        if self.mode.sampler == 'paired':
            self.sampler = PairedBatchSampler(dataset, self.assignment, config.patches_per_class,
                                              config.pairing)
        else:
            self.sampler = UniformBatchSampler(dataset, config.batch_size)

        n_train = len(dataset.wsi_ids('train'))
        self.steps_per_epoch = config.steps_per_epoch or max(1, math.ceil(n_train / 2))
        self.rng = np.random.default_rng(config.seed)
        self.optimizer = torch.optim.SGD(encoder.parameters(), lr=config.learning_rate,
                                         momentum=config.momentum)
        self.step_count = 0

        os.makedirs(out_dir, exist_ok=True)
        self.metrics_path = os.path.join(out_dir, 'metrics.csv')
        self.epochs_path = os.path.join(out_dir, 'epochs.csv')
        for path in (self.metrics_path, self.epochs_path):
            if os.path.exists(path):
                os.remove(path)

    def compute_losses(self, batch):
        images = to_tensor(self.dataset.load_images(batch.patch_ids))
        labels = torch.tensor(batch.labels, dtype=torch.long)
        embeddings, logits = self.encoder(images)

        # Squared norms overflow float32 before the embeddings do.
        norms = torch.linalg.vector_norm(embeddings.detach(), dim=1)
        if not torch.isfinite(norms).all():
            logger.error('Embedding norms overflow at step %d (largest |v_i| %.3g)',
                         self.step_count, embeddings.detach().abs().max().item())
            nan = torch.tensor(float('nan'))
            return LossBreakdown(nan, nan, nan, nan)

        l_p = l_w = None
        if self.mode.computes_patch_loss():
            l_p = patch_level_loss(embeddings, batch.labels, config=self.loss_config)
        if self.mode.computes_wsi_loss():
            unit = torch.nn.functional.normalize(embeddings, dim=1)
            prototypes = class_prototypes(unit, batch.labels, batch.wsi_ids)
            l_w = wsi_level_loss(prototypes, self.loss_config)
        return total_loss(l_w, l_p, logits, labels, self.loss_config)

    def persist_replay(self, batch, epoch, row):
        path = os.path.join(self.out_dir, 'replay_step_{:06d}.json'.format(self.step_count))
        with open(path, 'w') as handle:
            json.dump({
                'step': self.step_count,
                'epoch': epoch,
                'mode': self.config.mode,
                'losses': row,
                'batch': batch.to_dict(),
                'train_config': asdict(self.config),
            }, handle, indent=2)
        return path

    def abort(self, batch, epoch, row, reason):
        path = self.persist_replay(batch, epoch, row)
        logger.error('%s at step %d; batch saved to %s', reason, self.step_count, path)
        raise NonFiniteLossError(self.step_count, path)

    def step(self, epoch):
        """
        Runs one optimizer step, appends its row to ``metrics.csv`` and
        returns the row. A diverged step is logged too, then aborts training
        with :class:`NonFiniteLossError` after saving its batch.
        """
        self.encoder.train()
        self.step_count += 1
        batch = self.sampler.sample(self.rng)
        try:
            breakdown = self.compute_losses(batch)
        except DegeneratePrototypeError as error:
            nan = float('nan')
            row = dict(step=self.step_count, epoch=epoch, L_w=nan, L_p=nan, L_c=nan,
                       total=nan, empty_pos=0)
            _append_rows(self.metrics_path, [row], METRICS_COLUMNS)
            self.abort(batch, epoch, row, str(error))

        row = dict(step=self.step_count, epoch=epoch, **breakdown.as_row())
        _append_rows(self.metrics_path, [row], METRICS_COLUMNS)
        if not torch.isfinite(breakdown.total):
            self.abort(batch, epoch, row, 'Loss is not finite')

        self.optimizer.zero_grad()
        breakdown.total.backward()
        if self.config.max_grad_norm is not None:
            torch.nn.utils.clip_grad_norm_(self.encoder.parameters(), self.config.max_grad_norm)
        self.optimizer.step()
        return row

    def validate(self, epoch):
        split = self.config.validation_split
        if not self.dataset.filter(split=split):
            return None
        report, _ = evaluate_patches(self.encoder, self.dataset, split,
                                     self.config.eval_batch_size)
        logger.info('epoch %d: %s macro-F1 %.4f (precision %.4f, recall %.4f, F1 %.4f)',
                    epoch, split, report.macro_f1, report.precision, report.recall, report.f1)
        return report

    def end_epoch(self, epoch):
        report = self.validate(epoch)
        checkpoint = save_checkpoint(
            os.path.join(self.out_dir, 'epoch_{:03d}.pt'.format(epoch)),
            self.encoder,
            epoch=epoch,
            metrics=report.to_dict() if report else {},
            rng_state=self.rng.bit_generator.state,
        )
        row = {'epoch': epoch, 'checkpoint': checkpoint}
        for column in EPOCH_COLUMNS[1:-1]:
            row[column] = getattr(report, column) if report else float('nan')
        _append_rows(self.epochs_path, [row], EPOCH_COLUMNS)
        return row

    def run(self):
        """
        Trains for ``config.epochs`` epochs and returns a :class:`TrainResult`.
        """
        if not self.dataset.filter(split=self.config.validation_split):
            logger.warning('No %s patches; the last epoch is kept as best',
                           self.config.validation_split)

        history = [self.end_epoch(0)]
        for epoch in range(1, self.config.epochs + 1):
            for _ in range(self.steps_per_epoch):
                self.step(epoch)
            history.append(self.end_epoch(epoch))

        best = _select_best(history)
        best_path = os.path.join(self.out_dir, 'best.pt')
        shutil.copyfile(best['checkpoint'], best_path)
        logger.info('Best epoch %d (validation macro-F1 %.4f) saved to %s',
                    best['epoch'], best['macro_f1'], best_path)
        return TrainResult(best['epoch'], best['macro_f1'], best_path, history,
                           self.metrics_path, self.epochs_path)


def _append_rows(path, rows, columns):
    frame = pd.DataFrame(rows, columns=columns)
    frame.to_csv(path, mode='a', header=not os.path.exists(path), index=False)


def _select_best(history):
    scored = [row for row in history if not math.isnan(row['macro_f1'])]
    if not scored:
        return history[-1]
    best = scored[0]
    for row in scored[1:]:
        if row['macro_f1'] > best['macro_f1']:
            best = row
    return best


def train(config, dataset, assignment, encoder, out_dir, loss_config=None):
    return Trainer(config, dataset, encoder, out_dir, assignment, loss_config).run()


@dataclass
class SweepResult(object):
    best_k: int
    table: pd.DataFrame


def sweep_k(config, dataset, k_values, vectors, encoder_config, out_dir,
            loss_config=None, grouping_seed=0):
    """
    Clusters the cached BoVW *vectors* for each K in *k_values*, trains a
    fresh encoder per K under ``out_dir/k_<K>`` and picks the K with the
    highest validation macro-F1 (smaller K on ties). K values that cannot be
    clustered or sampled are skipped. Writes ``sweep.csv``.
    """
    if not k_values:
        raise RejectedInputError('k_values must not be empty')
    rows = []
    for k in sorted(set(k_values)):
        row = {'K': k, 'status': 'ok', 'macro_f1': float('nan'), 'best_epoch': -1,
               'checkpoint': ''}
        if k > len(vectors):
            row['status'] = 'skipped: {} WSIs < K'.format(len(vectors))
            logger.info('K=%d skipped: only %d groupable WSIs', k, len(vectors))
            rows.append(row)
            continue

        assignment = cluster_wsis(vectors, k, seed=grouping_seed, codebook_seed=grouping_seed)
        k_dir = os.path.join(out_dir, 'k_{}'.format(k))
        os.makedirs(k_dir, exist_ok=True)
        with open(os.path.join(k_dir, 'assignment.json'), 'w') as handle:
            json.dump(assignment.to_dict(), handle, indent=2, sort_keys=True)
        try:
            encoder = build_encoder(encoder_config, seed=config.seed)
            result = train(config, dataset, assignment, encoder, k_dir, loss_config)
        except SamplingInfeasibleError as error:
            row['status'] = 'skipped: {}'.format(error)
            logger.info('K=%d skipped: %s', k, error)
            rows.append(row)
            continue
        row.update(macro_f1=result.best_macro_f1, best_epoch=result.best_epoch,
                   checkpoint=result.best_checkpoint)
        rows.append(row)

    table = pd.DataFrame(rows, columns=['K', 'status', 'macro_f1', 'best_epoch', 'checkpoint'])
    os.makedirs(out_dir, exist_ok=True)
    table.to_csv(os.path.join(out_dir, 'sweep.csv'), index=False)

    feasible = table[table['status'] == 'ok']
    if feasible.empty:
        raise RejectedInputError('No K in {} is feasible'.format(sorted(set(k_values))))
    best_k = None
    best_score = float('-inf')
    for k, score in zip(feasible['K'], feasible['macro_f1'].fillna(-1.0)):
        if score > best_score:
            best_k, best_score = int(k), score
    logger.info('Best K=%d (validation macro-F1 %.4f)', best_k, best_score)
    return SweepResult(best_k, table)
