"""
This module contains the input validators shared by the pipeline stages.

A validator is a callable that takes a value (and the name of the field it
came from) and raises :class:`~wsidg.exceptions.RejectedInputError` if it
doesn't meet some criteria. Validators return nothing; callers convert the
value themselves once it has been accepted.
"""
import math

import numpy as np

from .exceptions import RejectedInputError

#: Edge length every synthetic WSI dimension must be a multiple of.
GRID_UNIT = 256

LABELS = (0, 1)
SPLITS = ('train', 'val', 'test')


def validate_positive(value, name):
    """
    Raises ``RejectedInputError`` unless *value* is a finite number > 0.
    """
    try:
        number = float(value)
    except (TypeError, ValueError):
        raise RejectedInputError('{} must be a number, got {!r}'.format(name, value))
    if not math.isfinite(number) or number <= 0:
        raise RejectedInputError('{} must be positive, got {!r}'.format(name, value))


def validate_nonnegative(value, name):
    """
    Raises ``RejectedInputError`` unless *value* is a finite number >= 0.
    """
    try:
        number = float(value)
    except (TypeError, ValueError):
        raise RejectedInputError('{} must be a number, got {!r}'.format(name, value))
    if not math.isfinite(number) or number < 0:
        raise RejectedInputError('{} must be nonnegative, got {!r}'.format(name, value))


def validate_int(value, name, minimum=None):
    """
    Raises ``RejectedInputError`` unless *value* is an integer (``bool`` is
    not accepted), optionally at least *minimum*.
    """
    if isinstance(value, bool) or not isinstance(value, (int, np.integer)):
        raise RejectedInputError('{} must be an integer, got {!r}'.format(name, value))
    if minimum is not None and value < minimum:
        raise RejectedInputError('{} must be >= {}, got {}'.format(name, minimum, value))


def validate_fraction(value, name):
    """
    Raises ``RejectedInputError`` unless *value* lies in [0, 1].
    """
    validate_nonnegative(value, name)
    if float(value) > 1:
        raise RejectedInputError('{} must lie in [0, 1], got {!r}'.format(name, value))


def validate_grid_dimension(value, name):
    """
    Raises ``RejectedInputError`` unless *value* is a positive multiple of
    :data:`GRID_UNIT`.
    """
    validate_int(value, name, minimum=GRID_UNIT)
    if value % GRID_UNIT:
        raise RejectedInputError(
            '{} must be a multiple of {}, got {}'.format(name, GRID_UNIT, value)
        )


def validate_label(value, name='label'):
    """
    Raises ``RejectedInputError`` unless *value* is 0 (non-tumor) or 1 (tumor).
    """
    if isinstance(value, bool) or value not in LABELS:
        raise RejectedInputError('{} must be 0 or 1, got {!r}'.format(name, value))


def validate_labels(values, name='labels'):
    """
    Array version of :func:`validate_label`.
    """
    array = np.asarray(values)
    if array.size and not np.isin(array, LABELS).all():
        raise RejectedInputError('{} must only contain 0 and 1'.format(name))


def validate_split(value, name='split'):
    if value not in SPLITS:
        raise RejectedInputError(
            '{} must be one of {}, got {!r}'.format(name, ', '.join(SPLITS), value)
        )


def validate_finite(array, name):
    """
    Raises ``RejectedInputError`` if *array* (numpy or torch) holds NaN or inf.
    """
    if hasattr(array, 'detach'):
        array = array.detach().cpu().numpy()
    if not np.all(np.isfinite(np.asarray(array, dtype=float))):
        raise RejectedInputError('{} must be finite'.format(name))


def validate_same_length(first, second, names=('predictions', 'truths')):
    if len(first) != len(second):
        raise RejectedInputError(
            '{} and {} differ in length ({} != {})'.format(
                names[0], names[1], len(first), len(second))
        )


def validate_nonempty(values, name):
    if len(values) == 0:
        raise RejectedInputError('{} must not be empty'.format(name))
