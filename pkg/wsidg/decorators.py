"""
This module contains pure wrapper functions used as decorators.
Functions in this module should be simple and not involve complex logic.
"""


def register_mode(name):
    """
    Registers the wrapped ``TrainingMode`` subclass under *name*::

        @register_mode('ce_heavy')
        class CEHeavy(TrainingMode):
            weights = (1.0, 1.0, 4.0)
    """
    from . import register
    from .registry import TrainingMode

    def _mode_wrapper(mode_class):
        if not (isinstance(mode_class, type) and issubclass(mode_class, TrainingMode)):
            raise ValueError('Wrapped class must subclass TrainingMode.')
        register(name, mode_class)
        return mode_class

    return _mode_wrapper
