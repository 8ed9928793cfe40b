"""
Grouping WSIs into pseudo-domains.

1. Style features of the *non-tumor* training patches are clustered with
   :func:`kmeans` into a :class:`Codebook` of K1 visual words.
2. Each WSI becomes a :class:`BoVWVector`: the normalized histogram of
   nearest-word assignments of its non-tumor features.
3. The BoVW vectors are clustered with :func:`kmeans` into K groups, each
   treated as a pseudo-domain (:class:`PseudoDomainAssignment`).

Tumor patches never reach steps 1 and 2. WSIs without non-tumor patches
have no BoVW vector and are excluded from clustering. Distances are squared
Euclidean throughout, and nearest-centroid ties go to the lowest index.
"""

import json
import logging
import os

from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from sklearn.metrics import adjusted_rand_score

from .exceptions import (
    IllegalAssignmentError,
    MissingArtifactError,
    ObjectiveIncreaseError,
    RejectedInputError,
    UngroupableWSIError,
)
from .validators import validate_finite, validate_int, validate_labels

logger = logging.getLogger(__name__)

#: Relative slack allowed when checking that the objective never increases.
OBJECTIVE_SLACK = 1e-9


@dataclass
class KMeansResult(object):
    centroids: np.ndarray
    assignments: np.ndarray
    objective: float
    n_iter: int
    converged: bool


def squared_distances(points, centroids):
    """
    ``N x k`` matrix of squared Euclidean distances.
    """
    diff = points[:, None, :] - centroids[None, :, :]
    return np.einsum('nkd,nkd->nk', diff, diff)


def nearest(points, centroids):
    """
    Index of the nearest centroid for each point; ties go to the lowest index.
    """
    return np.argmin(squared_distances(points, centroids), axis=1)


def objective(points, centroids, assignments):
    diff = points - centroids[assignments]
    return float(np.einsum('nd,nd->', diff, diff))


def kmeans_plusplus(points, k, rng):
    """
    k-means++ seeding. Returns the indices of the chosen seed points.
    """
    n = len(points)
    chosen = [int(rng.integers(n))]
    closest = squared_distances(points, points[chosen]).min(axis=1)
    for _ in range(1, k):
        total = closest.sum()
        if total > 0:
            index = int(rng.choice(n, p=closest / total))
        else:
            # Every point coincides with a seed already; pick an unused index.
            unused = np.setdiff1d(np.arange(n), chosen)
            index = int(rng.choice(unused))
        chosen.append(index)
        closest = np.minimum(closest, squared_distances(points, points[[index]])[:, 0])
    return chosen


def _update(points, assignments, k):
    """
    Recomputes centroids as cluster means. An empty cluster is re-seeded at
    the point farthest from its current centroid, which then joins it.
    """
    centroids = np.zeros((k, points.shape[1]))
    for cluster in range(k):
        members = assignments == cluster
        if members.any():
            centroids[cluster] = points[members].mean(axis=0)

    for cluster in range(k):
        if (assignments == cluster).any():
            continue
        distances = np.einsum('nd,nd->n', points - centroids[assignments],
                              points - centroids[assignments])
        # Only take points from clusters that keep at least one member.
        counts = np.bincount(assignments, minlength=k)
        distances[counts[assignments] <= 1] = -1.0
        farthest = int(np.argmax(distances))
        logger.debug('k-means: re-seeding empty cluster %d at point %d', cluster, farthest)
        donor = assignments[farthest]
        assignments[farthest] = cluster
        centroids[cluster] = points[farthest]
        centroids[donor] = points[assignments == donor].mean(axis=0)
    return centroids


def _transfer_refine(points, centroids, assignments, k):
    """
    Moves single points between clusters while doing so lowers the
    objective (exact gain for mean-centred clusters).
    """
    counts = np.bincount(assignments, minlength=k).astype(float)
    improved = True
    while improved:
        improved = False
        for i, point in enumerate(points):
            source = assignments[i]
            if counts[source] <= 1:
                continue
            cost_out = counts[source] / (counts[source] - 1) * np.sum((point - centroids[source]) ** 2)
            gains = counts / (counts + 1) * np.sum((point - centroids) ** 2, axis=1)
            gains[source] = np.inf
            target = int(np.argmin(gains))
            if gains[target] < cost_out - 1e-12:
                centroids[source] = (centroids[source] * counts[source] - point) / (counts[source] - 1)
                centroids[target] = (centroids[target] * counts[target] + point) / (counts[target] + 1)
                counts[source] -= 1
                counts[target] += 1
                assignments[i] = target
                improved = True
    return centroids, assignments


def _check_non_increasing(before, after):
    if after > before * (1 + OBJECTIVE_SLACK) + OBJECTIVE_SLACK:
        raise ObjectiveIncreaseError(before, after)


def _lloyd(points, k, rng, max_iter):
    centroids = points[kmeans_plusplus(points, k, rng)].astype(float)
    assignments = nearest(points, centroids)
    previous = objective(points, centroids, assignments)
    converged = False
    n_iter = 0
    for n_iter in range(1, max_iter + 1):
        centroids = _update(points, assignments, k)
        updated = objective(points, centroids, assignments)
        new_assignments = nearest(points, centroids)
        current = objective(points, centroids, new_assignments)
        _check_non_increasing(previous, updated)
        _check_non_increasing(updated, current)
        previous = current
        if np.array_equal(new_assignments, assignments):
            converged = True
            break
        assignments = new_assignments

    _, assignments = _transfer_refine(points, _update(points, assignments, k), assignments, k)
    centroids = _update(points, assignments, k)
    return KMeansResult(centroids, assignments, objective(points, centroids, assignments),
                        n_iter, converged)


def kmeans(points, k, seed=0, max_iter=300, n_init=10):
    """
    Lloyd's algorithm with k-means++ seeding, restarted *n_init* times; the
    run with the lowest objective (sum of squared distances) wins.

    Returns a :class:`KMeansResult`. ``converged`` is ``False`` if the
    winning run hit *max_iter* before its assignments stopped changing.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim == 1:
        points = points[:, None]
    if points.ndim != 2 or len(points) == 0:
        raise RejectedInputError('points must be a non-empty N x dim array')
    validate_finite(points, 'points')
    validate_int(k, 'k', minimum=1)
    if k > len(points):
        raise RejectedInputError('k={} exceeds the number of points ({})'.format(k, len(points)))

    rng = np.random.default_rng(seed)
    best = None
    for _ in range(n_init):
        result = _lloyd(points, k, rng, max_iter)
        if best is None or result.objective < best.objective:
            best = result
    if not best.converged:
        logger.warning('k-means (k=%d) stopped after %d iterations without converging',
                       k, best.n_iter)
    return best


@dataclass
class Codebook(object):
    centroids: np.ndarray
    seed: int = 0

    @property
    def k1(self):
        return len(self.centroids)

    def assign(self, features):
        return assign_words(features, self)

    def to_frame(self):
        frame = pd.DataFrame(self.centroids,
                             columns=['f{}'.format(i) for i in range(self.centroids.shape[1])])
        frame.insert(0, 'word', np.arange(self.k1))
        return frame


def assign_words(features, codebook):
    """
    Index of the nearest visual word of *codebook* for each feature row.
    """
    return nearest(np.atleast_2d(np.asarray(features, dtype=np.float64)), codebook.centroids)


def fit_codebook(features, labels, k1, seed=0):
    """
    Fits a :class:`Codebook` of *k1* visual words to the style *features*
    of non-tumor patches. *labels* must be all zero; a tumor label is
    rejected.
    """
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    validate_labels(labels)
    if len(labels) != len(features):
        raise RejectedInputError('features and labels differ in length')
    if (labels != 0).any():
        raise RejectedInputError(
            'Codebook input contains {} tumor patches; only non-tumor features are allowed'.format(
                int((labels != 0).sum()))
        )
    validate_int(k1, 'K1', minimum=1)
    if len(features) < k1:
        raise RejectedInputError('Need at least K1={} features, got {}'.format(k1, len(features)))
    if len(np.unique(features, axis=0)) < k1:
        raise RejectedInputError('Fewer distinct features than K1={}'.format(k1))

    return Codebook(kmeans(features, k1, seed=seed).centroids, seed=seed)


@dataclass
class BoVWVector(object):
    wsi_id: str
    histogram: np.ndarray


def bovw_vector(wsi_id, features, codebook):
    """
    ``histogram[w]`` is the share of *features* whose nearest visual word is
    ``w``. Raises ``UngroupableWSIError`` when *features* is empty.
    """
    features = np.asarray(features, dtype=np.float64)
    if features.size == 0:
        raise UngroupableWSIError(wsi_id)
    words = codebook.assign(features)
    counts = np.bincount(words, minlength=codebook.k1)
    return BoVWVector(wsi_id, counts / counts.sum())


@dataclass
class PseudoDomainAssignment(object):
    """
    ``clusters`` maps each grouped WSI id to its pseudo-domain in ``[0, K)``.
    """
    clusters: dict
    k: int
    k1: int = 0
    seed: int = 0
    codebook_seed: int = 0
    objective: float = 0.0

    def __getitem__(self, wsi_id):
        try:
            return self.clusters[wsi_id]
        except KeyError:
            raise IllegalAssignmentError('WSI {} has no pseudo-domain'.format(wsi_id))

    def __contains__(self, wsi_id):
        return wsi_id in self.clusters

    def members(self):
        """
        ``{cluster_id: [wsi_id, ...]}`` with sorted ids.
        """
        groups = {}
        for wsi_id in sorted(self.clusters):
            groups.setdefault(self.clusters[wsi_id], []).append(wsi_id)
        return groups

    def to_dict(self):
        return {
            'clusters': {wsi_id: int(c) for wsi_id, c in sorted(self.clusters.items())},
            'K': self.k,
            'K1': self.k1,
            'seeds': {'clustering': self.seed, 'codebook': self.codebook_seed},
            'objective': self.objective,
        }

    @classmethod
    def from_dict(cls, data):
        return cls(
            clusters=dict(data['clusters']),
            k=data['K'],
            k1=data.get('K1', 0),
            seed=data['seeds']['clustering'],
            codebook_seed=data['seeds']['codebook'],
            objective=data.get('objective', 0.0),
        )


def cluster_wsis(vectors, k, seed=0, codebook_seed=0):
    """
    Clusters BoVW *vectors* into *k* pseudo-domains.
    """
    if len(vectors) < k:
        raise RejectedInputError(
            'Cannot form K={} pseudo-domains from {} WSIs'.format(k, len(vectors))
        )
    vectors = sorted(vectors, key=lambda vector: vector.wsi_id)
    result = kmeans(np.stack([vector.histogram for vector in vectors]), k, seed=seed)
    return PseudoDomainAssignment(
        clusters={v.wsi_id: int(c) for v, c in zip(vectors, result.assignments)},
        k=k,
        k1=len(vectors[0].histogram),
        seed=seed,
        codebook_seed=codebook_seed,
        objective=result.objective,
    )


@dataclass
class GroupingSettings(object):
    """
    1. style_mode - ``A`` (frozen early activations) or ``B`` (raw color).
    2. k1 - number of visual words.
    3. k - number of pseudo-domains.
    4. k_values - candidates for the K sweep.
    5. seed - seeds both the codebook and the WSI clustering.
    """
    style_mode: str = 'A'
    k1: int = 16
    k: int = 2
    k_values: list = field(default_factory=lambda: [2, 4, 6, 8, 10])
    seed: int = 0

    def __post_init__(self):
        if self.style_mode not in ('A', 'B'):
            raise RejectedInputError('style_mode must be A or B, got {!r}'.format(self.style_mode))
        validate_int(self.k1, 'k1', minimum=1)
        validate_int(self.k, 'k', minimum=1)
        for k in self.k_values:
            validate_int(k, 'k_values', minimum=1)
        validate_int(self.seed, 'seed', minimum=0)


@dataclass
class GroupingResult(object):
    codebook: Codebook
    vectors: list
    assignment: PseudoDomainAssignment
    excluded: list


def bovw_vectors(dataset, extractor, codebook, split='train', batch_size=64):
    """
    BoVW vectors for every WSI of *split*; returns ``(vectors, excluded)``
    where *excluded* lists WSIs without non-tumor patches.
    """
    vectors, excluded = [], []
    for wsi_id in dataset.wsi_ids(split):
        features = style_features_for(dataset, extractor, dataset.index[wsi_id][0], batch_size)
        try:
            vectors.append(bovw_vector(wsi_id, features, codebook))
        except UngroupableWSIError:
            logger.warning('%s has no non-tumor patches; excluded from grouping', wsi_id)
            excluded.append(wsi_id)
    return vectors, excluded


def style_features_for(dataset, extractor, patch_ids, batch_size=64):
    chunks = [
        extractor(dataset.load_images(patch_ids[start:start + batch_size]))
        for start in range(0, len(patch_ids), batch_size)
    ]
    if not chunks:
        return np.zeros((0, 0))
    return np.concatenate(chunks, axis=0)


def build_codebook(dataset, extractor, settings, split='train'):
    records = dataset.filter(split=split, label=0)
    features = style_features_for(dataset, extractor, [r.patch_id for r in records])
    return fit_codebook(features, [r.label for r in records], settings.k1, seed=settings.seed)


def build_grouping(dataset, extractor, settings, split='train'):
    """
    Runs the whole grouping on the *split* WSIs of *dataset* and returns a
    :class:`GroupingResult`.
    """
    codebook = build_codebook(dataset, extractor, settings, split)
    vectors, excluded = bovw_vectors(dataset, extractor, codebook, split)
    assignment = cluster_wsis(vectors, settings.k, seed=settings.seed,
                              codebook_seed=settings.seed)
    logger.info('Grouped %d WSIs into %d pseudo-domains (K1=%d, %d excluded)',
                len(vectors), settings.k, codebook.k1, len(excluded))
    return GroupingResult(codebook, vectors, assignment, excluded)


def domain_recovery(assignment, profile_labels):
    """
    Adjusted Rand index between the pseudo-domains and the hidden profile
    labels (``{wsi_id: profile_index}``) of the grouped WSIs.
    """
    wsi_ids = sorted(assignment.clusters)
    return adjusted_rand_score([profile_labels[w] for w in wsi_ids],
                               [assignment.clusters[w] for w in wsi_ids])


def write_grouping(result, out_dir):
    """
    Persists ``codebook.csv``, ``bovw.csv`` and ``assignment.json``.
    """
    os.makedirs(out_dir, exist_ok=True)
    result.codebook.to_frame().to_csv(os.path.join(out_dir, 'codebook.csv'), index=False)

    histograms = np.stack([vector.histogram for vector in result.vectors])
    frame = pd.DataFrame(histograms, columns=['w{}'.format(i) for i in range(histograms.shape[1])])
    frame.insert(0, 'wsi_id', [vector.wsi_id for vector in result.vectors])
    frame.to_csv(os.path.join(out_dir, 'bovw.csv'), index=False)

    assignment = result.assignment.to_dict()
    assignment['excluded'] = list(result.excluded)
    with open(os.path.join(out_dir, 'assignment.json'), 'w') as handle:
        json.dump(assignment, handle, indent=2, sort_keys=True)


def read_grouping(out_dir):
    """
    Loads the artifacts written by :func:`write_grouping`.
    """
    paths = {name: os.path.join(out_dir, name)
             for name in ('codebook.csv', 'bovw.csv', 'assignment.json')}
    for name, path in paths.items():
        if not os.path.exists(path):
            raise MissingArtifactError('Grouping artifact {}'.format(name), path)

    with open(paths['assignment.json']) as handle:
        data = json.load(handle)
    assignment = PseudoDomainAssignment.from_dict(data)

    codebook_frame = pd.read_csv(paths['codebook.csv'])
    codebook = Codebook(codebook_frame.drop(columns='word').to_numpy(dtype=np.float64),
                        seed=assignment.codebook_seed)

    bovw_frame = pd.read_csv(paths['bovw.csv'])
    vectors = [
        BoVWVector(row[0], np.asarray(row[1:], dtype=np.float64))
        for row in bovw_frame.itertuples(index=False)
    ]
    return GroupingResult(codebook, vectors, assignment, data.get('excluded', []))
