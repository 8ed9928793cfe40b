"""
Contrastive objectives.

Both contrastive terms share one form. For an anchor ``a`` with positive
set ``P`` and negative set ``N``::

    -1/|P| * sum_{p in P} log( S(a, p) / (S(a, p) + sum_{n in N} S(a, n)) )

with ``S(u, v) = exp(u . v / tau)`` on unit vectors. The patch-level loss
uses the patches of a batch as anchors, the WSI-level loss uses per-(WSI,
class) prototypes. Anchors with an empty positive set contribute 0 and are
counted in :attr:`LossTerm.empty_positive`.

Terms are computed in log space from the cosine logits, so no similarity is
exponentiated explicitly.
"""

import logging

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .exceptions import DegeneratePrototypeError, RejectedInputError
from .validators import LABELS, validate_finite, validate_labels, validate_positive

logger = logging.getLogger(__name__)

REDUCTIONS = ('sum', 'mean')


@dataclass
class LossConfig(object):
    """
    1. temperature_patch - tau of the patch-level loss.
    2. temperature_wsi - tau of the WSI-level loss.
    3. weights - multipliers of (L_w, L_p, L_c).
    4. include_same_wsi_positives - let same-class prototypes of the anchor's
       own WSI count as positives.
    5. reduction - ``sum`` adds anchor terms, ``mean`` averages them over
       anchors with a nonempty positive set.
    """
    temperature_patch: float = 0.1
    temperature_wsi: float = 0.1
    weights: tuple = (1.0, 1.0, 1.0)
    include_same_wsi_positives: bool = False
    reduction: str = 'sum'

    def __post_init__(self):
        validate_positive(self.temperature_patch, 'temperature_patch')
        validate_positive(self.temperature_wsi, 'temperature_wsi')
        self.weights = tuple(float(w) for w in self.weights)
        if len(self.weights) != 3:
            raise RejectedInputError('weights must hold three values (L_w, L_p, L_c)')
        if self.reduction not in REDUCTIONS:
            raise RejectedInputError(
                'reduction must be one of {}, got {!r}'.format(', '.join(REDUCTIONS), self.reduction)
            )


def similarity(v1, v2, temperature):
    """
    ``exp((v1 . v2) / temperature)`` for unit vectors *v1* and *v2*.
    """
    validate_positive(temperature, 'temperature')
    validate_finite(v1, 'v1')
    validate_finite(v2, 'v2')
    if isinstance(v1, torch.Tensor) or isinstance(v2, torch.Tensor):
        return torch.exp(torch.as_tensor(v1) @ torch.as_tensor(v2) / temperature)
    return float(np.exp(np.dot(v1, v2) / temperature))


@dataclass
class Prototype(object):
    wsi_id: str
    label: int
    vector: torch.Tensor
    count: int


class PrototypeSet(object):
    """
    Class prototypes, one per (WSI, class) present in a batch, sorted by
    ``(wsi_id, label)``. :attr:`vectors` stacks them and keeps the graph to
    the embeddings they were computed from.
    """

    def __init__(self, entries):
        self.entries = sorted(entries, key=lambda entry: (entry.wsi_id, entry.label))
        keys = [(entry.wsi_id, entry.label) for entry in self.entries]
        if len(set(keys)) != len(keys):
            raise RejectedInputError('At most one prototype per (wsi, class) is allowed')

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    @property
    def vectors(self):
        return torch.stack([entry.vector for entry in self.entries])

    @property
    def labels(self):
        return [entry.label for entry in self.entries]

    @property
    def wsi_ids(self):
        return [entry.wsi_id for entry in self.entries]

    def get(self, wsi_id, label):
        for entry in self.entries:
            if entry.wsi_id == wsi_id and entry.label == label:
                return entry
        return None


def class_prototypes(embeddings, labels, wsi_ids):
    """
    Builds a :class:`PrototypeSet`: for every (WSI, class) in the batch the
    mean of its unit embeddings, renormalized to unit length. Raises
    ``DegeneratePrototypeError`` when a mean is exactly zero.
    """
    labels = [int(label) for label in labels]
    if len(embeddings) == 0:
        raise RejectedInputError('class_prototypes needs at least one embedding')
    if not len(labels) == len(wsi_ids) == len(embeddings):
        raise RejectedInputError('embeddings, labels and wsi_ids differ in length')
    validate_labels(labels)

    members = {}
    for index, key in enumerate(zip(wsi_ids, labels)):
        members.setdefault(key, []).append(index)

    entries = []
    for (wsi_id, label), indices in sorted(members.items()):
        mean = embeddings[indices].mean(dim=0)
        norm = torch.linalg.vector_norm(mean)
        if norm.item() == 0.0:
            raise DegeneratePrototypeError(wsi_id, label)
        entries.append(Prototype(wsi_id, label, mean / norm, len(indices)))
    return PrototypeSet(entries)


class PairSpec(object):
    """
    Positive and negative index sets per anchor. ``positives[i]`` and
    ``negatives[i]`` are disjoint and never contain ``i``.
    """

    def __init__(self, positives, negatives):
        if len(positives) != len(negatives):
            raise RejectedInputError('positives and negatives cover different anchors')
        self.positives = [sorted(set(p)) for p in positives]
        self.negatives = [sorted(set(n)) for n in negatives]
        for anchor, (pos, neg) in enumerate(zip(self.positives, self.negatives)):
            if anchor in pos or anchor in neg:
                raise RejectedInputError('Anchor {} appears in its own pair sets'.format(anchor))
            if set(pos) & set(neg):
                raise RejectedInputError(
                    'Positive and negative sets of anchor {} overlap'.format(anchor)
                )

    def __len__(self):
        return len(self.positives)

    def masks(self, n, device=None):
        """
        Boolean ``n x n`` positive and negative masks.
        """
        if len(self) != n:
            raise RejectedInputError('PairSpec covers {} anchors, batch has {}'.format(len(self), n))
        positive = torch.zeros((n, n), dtype=torch.bool, device=device)
        negative = torch.zeros((n, n), dtype=torch.bool, device=device)
        for anchor in range(n):
            for target, mask in ((self.positives[anchor], positive),
                                 (self.negatives[anchor], negative)):
                if target and (min(target) < 0 or max(target) >= n):
                    raise RejectedInputError(
                        'PairSpec index out of range for anchor {} (batch of {})'.format(anchor, n)
                    )
                mask[anchor, target] = True
        return positive, negative


def patch_pairs(labels):
    """
    Same-class patches are positives, different-class patches negatives.
    """
    labels = [int(label) for label in labels]
    return PairSpec(
        [[j for j, other in enumerate(labels) if other == label and j != i]
         for i, label in enumerate(labels)],
        [[j for j, other in enumerate(labels) if other != label]
         for label in labels],
    )


def prototype_pairs(prototypes, include_same_wsi=False):
    """
    Positives are same-class prototypes of the other WSI (and of the
    anchor's own WSI with *include_same_wsi*); negatives are the
    different-class prototypes of every WSI.
    """
    entries = list(prototypes)
    positives, negatives = [], []
    for i, anchor in enumerate(entries):
        positives.append([
            j for j, other in enumerate(entries)
            if j != i and other.label == anchor.label
            and (include_same_wsi or other.wsi_id != anchor.wsi_id)
        ])
        negatives.append([j for j, other in enumerate(entries) if other.label != anchor.label])
    return PairSpec(positives, negatives)


@dataclass
class LossTerm(object):
    value: torch.Tensor
    empty_positive: int = 0
    n_anchors: int = 0


def contrastive_term(vectors, pair_spec, temperature, reduction='sum'):
    """
    Evaluates the shared contrastive form over unit *vectors*.
    """
    n = vectors.shape[0]
    positive, negative = pair_spec.masks(n, device=vectors.device)
    logits = vectors @ vectors.t() / temperature

    floor = torch.finfo(logits.dtype).min
    negative_lse = torch.logsumexp(logits.masked_fill(~negative, floor), dim=1)
    # An anchor without negatives gets negative_lse == floor, so the
    # denominator reduces to its positive term.
    negative_lse = torch.where(negative.any(dim=1), negative_lse,
                               torch.full_like(negative_lse, floor))
    log_ratio = logits - torch.logaddexp(logits, negative_lse[:, None])

    counts = positive.sum(dim=1)
    has_positive = counts > 0
    per_anchor = -(log_ratio * positive).sum(dim=1) / counts.clamp(min=1)
    per_anchor = per_anchor * has_positive

    empty = int((~has_positive).sum().item())
    if empty:
        logger.debug('%d of %d anchors have no positive', empty, n)

    value = per_anchor.sum()
    if reduction == 'mean':
        value = value / max(int(has_positive.sum().item()), 1)
    return LossTerm(value, empty, n)


def patch_level_loss(embeddings, labels, pair_spec=None, config=None):
    """
    Patch-level loss L_p over a batch. *embeddings* are normalized here, so
    their scale never matters. *pair_spec* defaults to :func:`patch_pairs`.
    """
    config = config or LossConfig()
    validate_finite(embeddings, 'embeddings')
    if pair_spec is None:
        pair_spec = patch_pairs(labels)
    vectors = F.normalize(embeddings, dim=1)
    return contrastive_term(vectors, pair_spec, config.temperature_patch, config.reduction)


def wsi_level_loss(prototypes, config=None, pair_spec=None):
    """
    WSI-level loss L_w over the prototypes of one sampled WSI pair.
    """
    config = config or LossConfig()
    if len(prototypes) == 0:
        raise RejectedInputError('wsi_level_loss needs a nonempty PrototypeSet')
    wsi_ids = sorted(set(prototypes.wsi_ids))
    if len(wsi_ids) != 2:
        raise RejectedInputError(
            'wsi_level_loss needs prototypes from exactly two WSIs, got {}'.format(wsi_ids)
        )
    if pair_spec is None:
        pair_spec = prototype_pairs(prototypes, config.include_same_wsi_positives)
    return contrastive_term(prototypes.vectors, pair_spec, config.temperature_wsi,
                            config.reduction)


@dataclass
class LossBreakdown(object):
    wsi: torch.Tensor
    patch: torch.Tensor
    ce: torch.Tensor
    total: torch.Tensor
    empty_positive: int = 0

    def as_row(self):
        return {
            'L_w': float(self.wsi.detach()),
            'L_p': float(self.patch.detach()),
            'L_c': float(self.ce.detach()),
            'total': float(self.total.detach()),
            'empty_pos': self.empty_positive,
        }


def _term_value(term, like):
    if term is None:
        return torch.zeros((), dtype=like.dtype, device=like.device), 0
    if isinstance(term, LossTerm):
        return term.value, term.empty_positive
    return torch.as_tensor(term, dtype=like.dtype, device=like.device), 0


def total_loss(l_w, l_p, logits, labels, config=None):
    """
    ``w_w * L_w + w_p * L_p + w_c * L_c`` where L_c is the mean
    cross-entropy of *logits* against *labels*. *l_w* and *l_p* may be
    :class:`LossTerm` objects, tensors or ``None`` (treated as 0).
    """
    config = config or LossConfig()
    labels = torch.as_tensor(labels, dtype=torch.long, device=logits.device)
    if logits.dim() != 2 or logits.shape[1] != len(LABELS) or logits.shape[0] != labels.shape[0]:
        raise RejectedInputError(
            'logits of shape {} do not match {} labels'.format(tuple(logits.shape), labels.shape[0])
        )
    ce = F.cross_entropy(logits, labels)
    wsi, wsi_empty = _term_value(l_w, ce)
    patch, patch_empty = _term_value(l_p, ce)
    w_w, w_p, w_c = config.weights
    total = w_w * wsi + w_p * patch + w_c * ce
    return LossBreakdown(wsi, patch, ce, total, wsi_empty + patch_empty)
