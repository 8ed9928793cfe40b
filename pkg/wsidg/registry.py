"""This module contains the training mode registry."""

from .exceptions import RejectedInputError


class TrainingMode(object):
    """
    The default ``TrainingMode`` class. A mode is a class whose attributes
    tell the trainer what to compute at every step.

    Available options are as follows:

    1. weights - Multipliers of (L_w, L_p, L_c). Terms with weight 0 are
       not computed.
    2. uses_grouping - Whether the mode reads the pseudo-domain
       assignment. Modes that don't may run without one.
    3. sampler - ``paired`` (one WSI pair per step, 2 classes x
       ``patches_per_class`` patches per WSI) or ``uniform`` (random
       ``batch_size`` training patches).
    4. description - One-line summary used in reports.
    """
    name = None
    weights = (1.0, 1.0, 1.0)
    uses_grouping = True
    sampler = 'paired'
    description = ''

    @classmethod
    def computes_wsi_loss(cls):
        return cls.weights[0] != 0

    @classmethod
    def computes_patch_loss(cls):
        return cls.weights[1] != 0


class Registry(object):
    """
    Handles registration of training modes through the
    :meth:`register` and :meth:`unregister` methods.
    """
    _modes = {}

    @staticmethod
    def register(name, mode_cls=None):
        """
        Registers *mode_cls* under *name*. Without *mode_cls* a subclass of
        :class:`TrainingMode` with default options is created.

        .. note::
           Registering a name twice replaces the earlier mode.
        """
        if mode_cls is None:
            mode_cls = type('%sMode' % name.title().replace('_', ''), (TrainingMode,), {})
        if not (isinstance(mode_cls, type) and issubclass(mode_cls, TrainingMode)):
            raise RejectedInputError('Training modes must subclass TrainingMode.')
        if mode_cls.sampler not in ('paired', 'uniform'):
            raise RejectedInputError('Unknown sampler {!r}'.format(mode_cls.sampler))
        if mode_cls.sampler == 'uniform' and mode_cls.computes_wsi_loss():
            raise RejectedInputError('L_w needs WSI pairs; use the paired sampler.')

        mode_cls.name = name
        Registry._modes[name] = mode_cls
        return mode_cls

    @staticmethod
    def unregister(name):
        """
        Unregisters the mode called *name*.

        .. note::
           Unregistering a name not already registered is harmlessly ignored.
        """
        Registry._modes.pop(name, None)

    @staticmethod
    def get(name):
        try:
            return Registry._modes[name]
        except KeyError:
            raise RejectedInputError(
                'Unknown training mode {!r}; registered: {}'.format(
                    name, ', '.join(Registry.names()))
            )

    @staticmethod
    def names():
        return sorted(Registry._modes)


class FullMode(TrainingMode):
    description = 'Cross-cluster WSI pairs, L_w + L_p + L_c'


class BaselineCEMode(TrainingMode):
    weights = (0.0, 0.0, 1.0)
    uses_grouping = False
    sampler = 'uniform'
    description = 'Cross-entropy only'


class BaselineCESupConMode(TrainingMode):
    weights = (0.0, 1.0, 1.0)
    uses_grouping = False
    sampler = 'uniform'
    description = 'Cross-entropy + supervised contrastive'


#: Order of the comparison table rows.
MODE_ORDER = ('baseline_ce', 'baseline_ce_supcon', 'full')

Registry.register('full', FullMode)
Registry.register('baseline_ce', BaselineCEMode)
Registry.register('baseline_ce_supcon', BaselineCESupConMode)
