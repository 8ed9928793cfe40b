__version__ = '0.1.0'

def register(name, mode_cls=None):
    from .registry import Registry
    return Registry.register(name, mode_cls)

def unregister(name):
    from .registry import Registry
    Registry.unregister(name)
